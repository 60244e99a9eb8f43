#include "explicd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace explicd::ad {

const GradCheckEntry& GradCheckReport::worst() const {
    if (entries.empty()) throw std::logic_error("gradcheck report has no entries");
    return *std::max_element(entries.begin(), entries.end(),
                             [](const auto& a, const auto& b) { return a.rel_error < b.rel_error; });
}

GradCheckReport finite_diff_check(const std::function<Tensor()>& loss_fn, std::vector<NamedTensor> params,
                                  double step, double tol) {
    if (!(step > 0.0)) throw std::invalid_argument("finite_diff_check: step must be positive");

    for (auto& p : params) p.tensor.zero_grad();
    {
        Tape tape;
        Tensor loss = loss_fn();
        tape.backward(loss);
    }

    auto eval = [&](const std::string& name, std::size_t index) {
        const double v = loss_fn().item();
        if (!std::isfinite(v)) {
            throw DomainError("finite_diff_check: non-finite loss when perturbing " + name + "[" +
                              std::to_string(index) + "]");
        }
        return v;
    };

    GradCheckReport report;
    report.tol = tol;
    report.passed = true;
    for (auto& p : params) {
        std::vector<double> analytic(p.tensor.size(), 0.0);
        if (p.tensor.has_grad()) std::copy(p.tensor.grad().begin(), p.tensor.grad().end(), analytic.begin());

        auto values = p.tensor.mutable_values();
        double max_diff = 0.0, max_ad = 0.0, max_fd = 0.0;
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + step;
            const double up = eval(p.name, i);
            values[i] = saved - step;
            const double down = eval(p.name, i);
            values[i] = saved;
            const double numeric = (up - down) / (2.0 * step);
            max_diff = std::max(max_diff, std::abs(analytic[i] - numeric));
            max_ad = std::max(max_ad, std::abs(analytic[i]));
            max_fd = std::max(max_fd, std::abs(numeric));
        }
        GradCheckEntry e;
        e.name = p.name;
        e.max_abs_diff = max_diff;
        e.rel_error = max_diff / std::max(1e-12, max_ad + max_fd);
        e.passed = e.rel_error <= tol;
        report.passed = report.passed && e.passed;
        report.entries.push_back(std::move(e));
    }
    return report;
}

} // namespace explicd::ad
