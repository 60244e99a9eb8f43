#pragma once

#include "explicd/autodiff.hpp"

#include <functional>
#include <string>
#include <vector>

namespace explicd::ad {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

struct GradCheckEntry {
    std::string name;
    double max_abs_diff = 0.0;
    /// max|g_ad - g_fd| / max(1e-12, max|g_ad| + max|g_fd|), maxima taken over
    /// the entries of this parameter.
    double rel_error = 0.0;
    bool passed = false;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double tol = 0.0;
    bool passed = false;

    /// Entry with the largest relative error.
    const GradCheckEntry& worst() const;
};

/// Compares reverse-mode gradients of `loss_fn` with central differences.
/// `loss_fn` must build a scalar loss from the given parameters and be
/// deterministic. Parameter values are restored before returning.
/// Throws DomainError if the loss is non-finite at a perturbed point.
GradCheckReport finite_diff_check(const std::function<Tensor()>& loss_fn, std::vector<NamedTensor> params,
                                  double step = 1e-5, double tol = 1e-4);

} // namespace explicd::ad
