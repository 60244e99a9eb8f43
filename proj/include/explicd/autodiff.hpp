#pragma once

// Reverse-mode automatic differentiation over dense row-major float64 tensors.
//
// Operations record themselves on the thread's active Tape when at least one
// input requires a gradient. Without an active tape every operation is a
// plain forward computation, which is what evaluation code uses.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace explicd::ad {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Thrown when operand shapes are incompatible. The message names the
/// operation and both shapes.
class ShapeError : public std::invalid_argument {
public:
    ShapeError(std::string_view op, const Shape& a, const Shape& b);
    ShapeError(std::string_view op, const std::string& detail);
};

/// Thrown when a forward or backward computation leaves the documented domain.
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

namespace detail {
struct Node;
}

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor from(Shape shape, std::vector<double> values);
    static Tensor scalar(double value);
    /// Trainable leaf; gradients accumulate into it across backward passes
    /// until zero_grad().
    static Tensor parameter(Shape shape, std::vector<double> values);

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t dim(std::size_t axis) const;
    std::size_t rank() const { return shape().size(); }
    std::size_t size() const;

    std::span<const double> values() const&;
    std::span<const double> values() const&& = delete;
    /// Direct write access; used by optimizers and finite-difference probes.
    /// Must not be called on a tensor whose node is part of a live tape.
    std::span<double> mutable_values();
    std::vector<double> to_vector() const;
    double item() const;
    double operator[](std::size_t flat) const { return values()[flat]; }

    bool requires_grad() const;
    /// Empty span when no gradient has been accumulated.
    std::span<const double> grad() const&;
    std::span<const double> grad() const&& = delete;
    bool has_grad() const;
    void zero_grad();

    /// Same values, detached from any tape and not trainable.
    Tensor detach() const;

    // Internal.
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    const std::shared_ptr<detail::Node>& node() const noexcept { return node_; }

private:
    std::shared_ptr<detail::Node> node_;
};

/// Define-by-run gradient tape. Constructing a Tape makes it the active tape
/// of the calling thread until destruction; the previously active tape (if
/// any) is restored afterwards.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Seeds d(loss)/d(loss) = 1 and propagates to all recorded nodes in
    /// reverse recording order. Leaves that require gradients accumulate.
    void backward(const Tensor& loss);

    std::size_t size() const noexcept { return nodes_.size(); }

    static Tape* active() noexcept;

    // Internal.
    void record(std::shared_ptr<detail::Node> node);

private:
    std::vector<std::shared_ptr<detail::Node>> nodes_;
    Tape* previous_ = nullptr;
    bool consumed_ = false;
};

// Elementwise and broadcasting arithmetic.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
/// b's shape must equal a trailing suffix of a's shape; b is repeated over
/// the leading axes (bias and positional-embedding broadcast).
Tensor add_trailing(const Tensor& a, const Tensor& b);
Tensor mul_trailing(const Tensor& a, const Tensor& b);

Tensor exp(const Tensor& a);
/// Requires strictly positive inputs.
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
/// tanh approximation of GELU.
Tensor gelu(const Tensor& a);

// Linear algebra. Both operands of matmul must be rank 2.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
/// Batched matmul over rank-3 operands [G,m,k] x [G,k,n]; with transpose_b
/// the second operand is [G,n,k].
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);
/// Repeats a rank-2 tensor into [count, rows, cols]; gradients are summed.
Tensor broadcast_batch(const Tensor& a, std::size_t count);

// Reductions.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Mean over one axis, which is removed from the shape.
Tensor mean_axis(const Tensor& a, std::size_t axis);

// Layout.
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
/// Half-open range [begin, end) along `axis`.
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);

// Normalizations along the last axis.
Tensor softmax(const Tensor& a);
/// Rows with L2 norm below kNormGuard pass through unchanged and
/// l2_normalize_guard_hits() is incremented.
Tensor l2_normalize(const Tensor& a);
Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

/// Mean softmax cross-entropy over rows of a [B, C] logit matrix.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

inline constexpr double kNormGuard = 1e-9;
std::size_t l2_normalize_guard_hits() noexcept;

namespace debug {
/// Negative-control hook: when enabled, the GELU backward rule is scaled by
/// 1.01 so gradient checks must fail.
void set_fault_injection(bool enabled) noexcept;
bool fault_injection() noexcept;
} // namespace debug

} // namespace explicd::ad
