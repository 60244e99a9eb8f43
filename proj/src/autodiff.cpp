#include "explicd/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <new>
#include <numbers>
#include <numeric>
#include <sstream>

namespace explicd::ad {

namespace detail {

// Allocator whose value-less construct() leaves elements uninitialized, so
// buffers that are written in full skip the zero fill. Storage is aligned to
// 64 bytes so vectorized reductions always split a buffer the same way.
template <typename T>
struct DefaultInitAllocator : std::allocator<T> {
    static constexpr std::align_val_t kAlign{64};
    template <typename U>
    struct rebind {
        using other = DefaultInitAllocator<U>;
    };
    using std::allocator<T>::allocator;
    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
    template <typename U>
    void construct(U* p) noexcept {
        ::new (static_cast<void*>(p)) U;
    }
    template <typename U, typename... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

using Buffer = std::vector<double, DefaultInitAllocator<double>>;

struct Node {
    Shape shape;
    Buffer value;
    Buffer grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    Buffer& grad_buffer() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
        return grad;
    }

    /// Sizes an untouched gradient without clearing it and returns true; the
    /// caller must then overwrite every element instead of accumulating.
    bool open_grad() {
        if (!grad.empty()) return false;
        grad.resize(value.size());
        return true;
    }
};

} // namespace detail

using detail::Buffer;
using detail::Node;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

thread_local Tape* g_active_tape = nullptr;
std::atomic<bool> g_fault_injection{false};
std::atomic<std::size_t> g_guard_hits{0};

// Builds the output node of an operation. The backward rule and input links
// are kept only when a tape is active and some input needs a gradient.
Tensor make_result(Shape shape, Buffer value,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(Node&)> backward) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    Tape* tape = Tape::active();
    bool needs = false;
    if (tape != nullptr) {
        for (const Tensor* t : inputs) needs = needs || t->requires_grad();
    }
    if (needs) {
        node->requires_grad = true;
        for (const Tensor* t : inputs) node->inputs.push_back(t->node());
        node->backward = std::move(backward);
        tape->record(node);
    }
    return Tensor(std::move(node));
}

Tensor make_result_n(Shape shape, Buffer value, const std::vector<Tensor>& inputs,
                     std::function<void(Node&)> backward) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    Tape* tape = Tape::active();
    bool needs = false;
    if (tape != nullptr) {
        for (const Tensor& t : inputs) needs = needs || t.requires_grad();
    }
    if (needs) {
        node->requires_grad = true;
        for (const Tensor& t : inputs) node->inputs.push_back(t.node());
        node->backward = std::move(backward);
        tape->record(node);
    }
    return Tensor(std::move(node));
}

void require_defined(const Tensor& t, std::string_view op) {
    if (!t.defined()) throw ShapeError(op, "undefined tensor operand");
}

void require_same(std::string_view op, const Tensor& a, const Tensor& b) {
    require_defined(a, op);
    require_defined(b, op);
    if (a.shape() != b.shape()) throw ShapeError(op, a.shape(), b.shape());
}

void require_rank(std::string_view op, const Tensor& a, std::size_t rank) {
    require_defined(a, op);
    if (a.rank() != rank) {
        throw ShapeError(op, "expected rank " + std::to_string(rank) + ", got " + shape_str(a.shape()));
    }
}

std::size_t prod(const Shape& s, std::size_t from, std::size_t to) {
    std::size_t p = 1;
    for (std::size_t i = from; i < to; ++i) p *= s[i];
    return p;
}

// Adds contribution(i) to every gradient element of `in`, overwriting a
// freshly opened buffer.
template <typename F>
void accumulate(Node& in, F contribution) {
    const bool fresh = in.open_grad();
    double* g = in.grad.data();
    const std::size_t n = in.grad.size();
    if (fresh) {
        for (std::size_t i = 0; i < n; ++i) g[i] = contribution(i);
    } else {
        for (std::size_t i = 0; i < n; ++i) g[i] += contribution(i);
    }
}

template <typename Dst, typename Expr>
void store(bool fresh, Dst&& dst, const Expr& expr) {
    if (fresh) {
        dst = expr;
    } else {
        dst += expr;
    }
}

template <typename F, typename D>
Tensor unary(const Tensor& a, std::string_view op, F f, D dfdx) {
    require_defined(a, op);
    auto x = a.values();
    Buffer y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
    return make_result(a.shape(), std::move(y), {&a}, [dfdx](Node& self) {
        Node& in = *self.inputs[0];
        if (!in.requires_grad) return;
        accumulate(in, [&](std::size_t i) { return self.grad[i] * dfdx(in.value[i], self.value[i]); });
    });
}

} // namespace

// ---------------------------------------------------------------------------
// Shapes and errors

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) { return prod(shape, 0, shape.size()); }

ShapeError::ShapeError(std::string_view op, const Shape& a, const Shape& b)
    : std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                            shape_str(b)) {}

ShapeError::ShapeError(std::string_view op, const std::string& detail)
    : std::invalid_argument(std::string(op) + ": " + detail) {}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::from(Shape shape, std::vector<double> values) {
    for (std::size_t e : shape) {
        if (e == 0) throw ShapeError("tensor", "zero extent in shape " + shape_str(shape));
    }
    if (shape_numel(shape) != values.size()) {
        throw ShapeError("tensor", "shape " + shape_str(shape) + " holds " +
                                       std::to_string(shape_numel(shape)) + " values, got " +
                                       std::to_string(values.size()));
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value.assign(values.begin(), values.end());
    return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
    Tensor t = from(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= rank()) throw ShapeError("dim", "axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
    return node_->shape[axis];
}

std::size_t Tensor::size() const { return node_->value.size(); }

std::span<const double> Tensor::values() const& { return node_->value; }

std::span<double> Tensor::mutable_values() { return node_->value; }

std::vector<double> Tensor::to_vector() const { return {node_->value.begin(), node_->value.end()}; }

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item", "tensor " + shape_str(shape()) + " is not a scalar");
    return node_->value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

std::span<const double> Tensor::grad() const& { return node_->grad; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const { return from(shape(), to_vector()); }

// ---------------------------------------------------------------------------
// Tape

Tape::Tape() : previous_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() noexcept { return g_active_tape; }

void Tape::record(std::shared_ptr<Node> node) { nodes_.push_back(std::move(node)); }

void Tape::backward(const Tensor& loss) {
    require_defined(loss, "backward");
    if (loss.size() != 1) throw ShapeError("backward", "loss must be a scalar, got " + shape_str(loss.shape()));
    if (consumed_) throw std::logic_error("backward: tape already consumed");
    consumed_ = true;
    if (!loss.requires_grad()) return;
    loss.node()->grad_buffer()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node& n = **it;
        if (!n.grad.empty() && n.backward) n.backward(n);
    }
    // Release intermediate buffers; leaf gradients stay with their owners.
    nodes_.clear();
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    require_same("add", a, b);
    Buffer y(a.values().begin(), a.values().end());
    auto bv = b.values();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
    return make_result(a.shape(), std::move(y), {&a, &b}, [](Node& self) {
        for (auto& in : self.inputs) {
            if (!in->requires_grad) continue;
            accumulate(*in, [&](std::size_t i) { return self.grad[i]; });
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same("sub", a, b);
    Buffer y(a.values().begin(), a.values().end());
    auto bv = b.values();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
    return make_result(a.shape(), std::move(y), {&a, &b}, [](Node& self) {
        for (std::size_t k = 0; k < 2; ++k) {
            Node& in = *self.inputs[k];
            if (!in.requires_grad) continue;
            const double sign = k == 0 ? 1.0 : -1.0;
            accumulate(in, [&](std::size_t i) { return sign * self.grad[i]; });
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same("mul", a, b);
    auto av = a.values();
    auto bv = b.values();
    Buffer y(av.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
    return make_result(a.shape(), std::move(y), {&a, &b}, [](Node& self) {
        Node& x = *self.inputs[0];
        Node& z = *self.inputs[1];
        if (x.requires_grad) accumulate(x, [&](std::size_t i) { return self.grad[i] * z.value[i]; });
        if (z.requires_grad) accumulate(z, [&](std::size_t i) { return self.grad[i] * x.value[i]; });
    });
}

Tensor scale(const Tensor& a, double s) {
    return unary(a, "scale", [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_trailing(const Tensor& a, const Tensor& b) {
    require_defined(a, "add_trailing");
    require_defined(b, "add_trailing");
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (bs.size() > as.size() || !std::equal(bs.rbegin(), bs.rend(), as.rbegin())) {
        throw ShapeError("add_trailing", as, bs);
    }
    const std::size_t inner = b.size();
    const std::size_t reps = a.size() / inner;
    Buffer y(a.values().begin(), a.values().end());
    auto bv = b.values();
    for (std::size_t r = 0; r < reps; ++r) {
        for (std::size_t i = 0; i < inner; ++i) y[r * inner + i] += bv[i];
    }
    return make_result(as, std::move(y), {&a, &b}, [inner, reps](Node& self) {
        Node& x = *self.inputs[0];
        Node& bias = *self.inputs[1];
        if (x.requires_grad) accumulate(x, [&](std::size_t i) { return self.grad[i]; });
        if (bias.requires_grad) {
            auto& g = bias.grad_buffer();
            for (std::size_t r = 0; r < reps; ++r) {
                for (std::size_t i = 0; i < inner; ++i) g[i] += self.grad[r * inner + i];
            }
        }
    });
}

Tensor mul_trailing(const Tensor& a, const Tensor& b) {
    require_defined(a, "mul_trailing");
    require_defined(b, "mul_trailing");
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (bs.size() > as.size() || !std::equal(bs.rbegin(), bs.rend(), as.rbegin())) {
        throw ShapeError("mul_trailing", as, bs);
    }
    const std::size_t inner = b.size();
    const std::size_t reps = a.size() / inner;
    auto av = a.values();
    auto bv = b.values();
    Buffer y(av.size());
    for (std::size_t r = 0; r < reps; ++r) {
        for (std::size_t i = 0; i < inner; ++i) y[r * inner + i] = av[r * inner + i] * bv[i];
    }
    return make_result(as, std::move(y), {&a, &b}, [inner, reps](Node& self) {
        Node& x = *self.inputs[0];
        Node& w = *self.inputs[1];
        if (x.requires_grad) accumulate(x, [&](std::size_t i) { return self.grad[i] * w.value[i % inner]; });
        if (w.requires_grad) {
            auto& g = w.grad_buffer();
            for (std::size_t r = 0; r < reps; ++r) {
                for (std::size_t i = 0; i < inner; ++i) g[i] += self.grad[r * inner + i] * x.value[r * inner + i];
            }
        }
    });
}

Tensor exp(const Tensor& a) {
    return unary(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    require_defined(a, "log");
    for (double v : a.values()) {
        if (!(v > 0.0)) throw DomainError("log: non-positive input " + std::to_string(v));
    }
    return unary(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor tanh(const Tensor& a) {
    return unary(a, "tanh", [](double x) { return std::tanh(x); },
                 [](double, double y) { return 1.0 - y * y; });
}

Tensor gelu(const Tensor& a) {
    require_defined(a, "gelu");
    static constexpr double c = 0.7978845608028654; // sqrt(2/pi)
    static constexpr double k = 0.044715;
    const double fault = debug::fault_injection() ? 1.01 : 1.0;
    auto xv = a.values();
    const auto n = static_cast<Eigen::Index>(xv.size());
    const Eigen::Map<const Eigen::ArrayXd> x(xv.data(), n);
    // tanh(u) = 1 - 2 / (exp(2u) + 1), evaluated with the vectorized exp.
    auto t = std::make_shared<Eigen::ArrayXd>(1.0 - 2.0 / ((2.0 * c * (x + k * x.cube())).exp() + 1.0));
    Buffer y(xv.size());
    Eigen::Map<Eigen::ArrayXd>(y.data(), n) = 0.5 * x * (1.0 + *t);
    return make_result(a.shape(), std::move(y), {&a}, [t, fault, n](Node& self) {
        Node& in = *self.inputs[0];
        if (!in.requires_grad) return;
        const Eigen::Map<const Eigen::ArrayXd> x(in.value.data(), n);
        const Eigen::Map<const Eigen::ArrayXd> dy(self.grad.data(), n);
        const bool fresh = in.open_grad();
        store(fresh, Eigen::Map<Eigen::ArrayXd>(in.grad.data(), n),
            dy * (fault * (0.5 * (1.0 + *t) + 0.5 * x * (1.0 - t->square()) * c * (1.0 + 3.0 * k * x.square()))));
    });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank("matmul", a, 2);
    require_rank("matmul", b, 2);
    const Eigen::Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (a.dim(1) != b.dim(0)) throw ShapeError("matmul", a.shape(), b.shape());
    Buffer y(static_cast<std::size_t>(m * n));
    MutMap(y.data(), m, n).noalias() = ConstMap(a.values().data(), m, k) * ConstMap(b.values().data(), k, n);
    return make_result({a.dim(0), b.dim(1)}, std::move(y), {&a, &b}, [m, k, n](Node& self) {
        Node& x = *self.inputs[0];
        Node& w = *self.inputs[1];
        ConstMap dy(self.grad.data(), m, n);
        if (x.requires_grad) {
            const bool fresh = x.open_grad();
            store(fresh, MutMap(x.grad.data(), m, k).noalias(), dy * ConstMap(w.value.data(), k, n).transpose());
        }
        if (w.requires_grad) {
            const bool fresh = w.open_grad();
            store(fresh, MutMap(w.grad.data(), k, n).noalias(), ConstMap(x.value.data(), m, k).transpose() * dy);
        }
    });
}

Tensor transpose(const Tensor& a) {
    require_rank("transpose", a, 2);
    return permute(a, {1, 0});
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
    require_rank("bmm", a, 3);
    require_rank("bmm", b, 3);
    const std::size_t groups = a.dim(0);
    const Eigen::Index m = a.dim(1), k = a.dim(2);
    const Eigen::Index n = transpose_b ? b.dim(1) : b.dim(2);
    const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
    if (b.dim(0) != groups || bk != static_cast<std::size_t>(k)) throw ShapeError("bmm", a.shape(), b.shape());
    Buffer y(groups * m * n);
    const std::size_t sa = m * k, sb = k * n, sy = m * n;
    for (std::size_t g = 0; g < groups; ++g) {
        ConstMap x(a.values().data() + g * sa, m, k);
        MutMap out(y.data() + g * sy, m, n);
        if (transpose_b) {
            out.noalias() = x * ConstMap(b.values().data() + g * sb, n, k).transpose();
        } else {
            out.noalias() = x * ConstMap(b.values().data() + g * sb, k, n);
        }
    }
    return make_result({groups, a.dim(1), static_cast<std::size_t>(n)}, std::move(y), {&a, &b},
                       [=](Node& self) {
                           Node& x = *self.inputs[0];
                           Node& w = *self.inputs[1];
                           const bool fresh_x = x.requires_grad && x.open_grad();
                           const bool fresh_w = w.requires_grad && w.open_grad();
                           for (std::size_t g = 0; g < groups; ++g) {
                               ConstMap dy(self.grad.data() + g * sy, m, n);
                               if (x.requires_grad) {
                                   MutMap dx(x.grad.data() + g * sa, m, k);
                                   if (transpose_b) {
                                       store(fresh_x, dx.noalias(), dy * ConstMap(w.value.data() + g * sb, n, k));
                                   } else {
                                       store(fresh_x, dx.noalias(),
                                             dy * ConstMap(w.value.data() + g * sb, k, n).transpose());
                                   }
                               }
                               if (w.requires_grad) {
                                   ConstMap xv(x.value.data() + g * sa, m, k);
                                   if (transpose_b) {
                                       store(fresh_w, MutMap(w.grad.data() + g * sb, n, k).noalias(),
                                             dy.transpose() * xv);
                                   } else {
                                       store(fresh_w, MutMap(w.grad.data() + g * sb, k, n).noalias(),
                                             xv.transpose() * dy);
                                   }
                               }
                           }
                       });
}

Tensor broadcast_batch(const Tensor& a, std::size_t count) {
    require_rank("broadcast_batch", a, 2);
    if (count == 0) throw ShapeError("broadcast_batch", "count must be positive");
    const std::size_t n = a.size();
    Buffer y(count * n);
    for (std::size_t c = 0; c < count; ++c) std::copy(a.values().begin(), a.values().end(), y.begin() + c * n);
    return make_result({count, a.dim(0), a.dim(1)}, std::move(y), {&a}, [count, n](Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t c = 0; c < count; ++c) {
            for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[c * n + i];
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
    require_defined(a, "sum");
    double s = 0.0;
    for (double v : a.values()) s += v;
    return make_result({}, {s}, {&a}, [](Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (double& v : g) v += self.grad[0];
    });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Tensor mean_axis(const Tensor& a, std::size_t axis) {
    require_defined(a, "mean_axis");
    const Shape& s = a.shape();
    if (axis >= s.size()) throw ShapeError("mean_axis", "axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    const std::size_t outer = prod(s, 0, axis), n = s[axis], inner = prod(s, axis + 1, s.size());
    Shape out_shape = s;
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
    Buffer y(outer * inner, 0.0);
    auto x = a.values();
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < n; ++j) {
            const double* src = x.data() + (o * n + j) * inner;
            double* dst = y.data() + o * inner;
            for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    }
    for (double& v : y) v *= inv;
    return make_result(std::move(out_shape), std::move(y), {&a}, [outer, n, inner, inv](Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t j = 0; j < n; ++j) {
                for (std::size_t i = 0; i < inner; ++i) g[(o * n + j) * inner + i] += inv * self.grad[o * inner + i];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Layout

Tensor reshape(const Tensor& a, Shape shape) {
    require_defined(a, "reshape");
    if (shape_numel(shape) != a.size()) throw ShapeError("reshape", a.shape(), shape);
    Buffer y(a.values().begin(), a.values().end());
    return make_result(std::move(shape), std::move(y), {&a}, [](Node& self) {
        accumulate(*self.inputs[0], [&](std::size_t i) { return self.grad[i]; });
    });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
    require_defined(a, "permute");
    const Shape& s = a.shape();
    const std::size_t r = s.size();
    std::vector<bool> seen(r, false);
    if (axes.size() != r) throw ShapeError("permute", "axis list length mismatch for " + shape_str(s));
    for (std::size_t ax : axes) {
        if (ax >= r || seen[ax]) throw ShapeError("permute", "invalid axis permutation for " + shape_str(s));
        seen[ax] = true;
    }
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) out_shape[i] = s[axes[i]];
    // in_strides[axes[i]] is the input stride walked by output axis i
    std::vector<std::size_t> in_stride(r, 1);
    for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * s[i];
    std::vector<std::size_t> walk(r);
    for (std::size_t i = 0; i < r; ++i) walk[i] = in_stride[axes[i]];
    // Gather map: output flat index -> input flat index.
    const std::size_t n = a.size();
    auto index = std::make_shared<std::vector<std::size_t>>(n);
    std::vector<std::size_t> counter(r, 0);
    std::size_t src = 0;
    for (std::size_t o = 0; o < n; ++o) {
        (*index)[o] = src;
        for (std::size_t i = r; i-- > 0;) {
            if (++counter[i] < out_shape[i]) {
                src += walk[i];
                break;
            }
            src -= walk[i] * (out_shape[i] - 1);
            counter[i] = 0;
        }
    }
    Buffer y(n);
    auto x = a.values();
    for (std::size_t o = 0; o < n; ++o) y[o] = x[(*index)[o]];
    return make_result(std::move(out_shape), std::move(y), {&a}, [index](Node& self) {
        Node& in = *self.inputs[0];
        const bool fresh = in.open_grad();
        double* g = in.grad.data();
        if (fresh) {
            for (std::size_t o = 0; o < self.grad.size(); ++o) g[(*index)[o]] = self.grad[o];
        } else {
            for (std::size_t o = 0; o < self.grad.size(); ++o) g[(*index)[o]] += self.grad[o];
        }
    });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat", "no operands");
    for (const Tensor& p : parts) require_defined(p, "concat");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) throw ShapeError("concat", "axis " + std::to_string(axis) + " out of range for " + shape_str(s0));
    Shape out_shape = s0;
    out_shape[axis] = 0;
    for (const Tensor& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == s0.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == s0[i];
        if (!ok) throw ShapeError("concat", s0, s);
        out_shape[axis] += s[axis];
    }
    const std::size_t outer = prod(s0, 0, axis), inner = prod(s0, axis + 1, s0.size());
    std::vector<std::size_t> widths;
    for (const Tensor& p : parts) widths.push_back(p.dim(axis) * inner);
    const std::size_t row = out_shape[axis] * inner;
    Buffer y(outer * row);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        auto x = parts[k].values();
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(x.data() + o * widths[k], widths[k], y.data() + o * row + offset);
        }
        offset += widths[k];
    }
    return make_result_n(std::move(out_shape), std::move(y), parts, [outer, row, widths](Node& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < self.inputs.size(); ++k) {
            Node& in = *self.inputs[k];
            if (in.requires_grad) {
                const std::size_t w = widths[k];
                accumulate(in, [&](std::size_t i) { return self.grad[(i / w) * row + off + i % w]; });
            }
            off += widths[k];
        }
    });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
    require_defined(a, "slice");
    const Shape& s = a.shape();
    if (axis >= s.size() || begin >= end || end > s[axis]) {
        throw ShapeError("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                                      std::to_string(axis) + " invalid for " + shape_str(s));
    }
    const std::size_t outer = prod(s, 0, axis), inner = prod(s, axis + 1, s.size());
    const std::size_t row = s[axis] * inner, width = (end - begin) * inner, off = begin * inner;
    Shape out_shape = s;
    out_shape[axis] = end - begin;
    Buffer y(outer * width);
    auto x = a.values();
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(x.data() + o * row + off, width, y.data() + o * width);
    return make_result(std::move(out_shape), std::move(y), {&a}, [outer, row, width, off](Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t i = 0; i < width; ++i) g[o * row + off + i] += self.grad[o * width + i];
        }
    });
}

// ---------------------------------------------------------------------------
// Normalizations

Tensor softmax(const Tensor& a) {
    require_defined(a, "softmax");
    if (a.rank() == 0) throw ShapeError("softmax", "empty axis on scalar input");
    const std::size_t n = a.shape().back();
    const std::size_t rows = a.size() / n;
    auto x = a.values();
    Buffer y(a.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * n;
        double* yr = y.data() + r * n;
        const Eigen::Map<const Eigen::ArrayXd> in(xr, static_cast<Eigen::Index>(n));
        Eigen::Map<Eigen::ArrayXd> row(yr, static_cast<Eigen::Index>(n));
        row = (in - in.maxCoeff()).exp();
        row *= 1.0 / row.sum();
    }
    return make_result(a.shape(), std::move(y), {&a}, [rows, n](Node& self) {
        Node& in = *self.inputs[0];
        const bool fresh = in.open_grad();
        const auto len = static_cast<Eigen::Index>(n);
        for (std::size_t r = 0; r < rows; ++r) {
            const Eigen::Map<const Eigen::ArrayXd> yr(self.value.data() + r * n, len);
            const Eigen::Map<const Eigen::ArrayXd> dy(self.grad.data() + r * n, len);
            store(fresh, Eigen::Map<Eigen::ArrayXd>(in.grad.data() + r * n, len), yr * (dy - (yr * dy).sum()));
        }
    });
}

Tensor l2_normalize(const Tensor& a) {
    require_defined(a, "l2_normalize");
    if (a.rank() == 0) throw ShapeError("l2_normalize", "empty axis on scalar input");
    const std::size_t n = a.shape().back();
    const std::size_t rows = a.size() / n;
    auto x = a.values();
    Buffer y(a.size());
    auto inv_norm = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double ss = 0.0;
        for (std::size_t i = 0; i < n; ++i) ss += x[r * n + i] * x[r * n + i];
        const double norm = std::sqrt(ss);
        double inv = 1.0;
        if (norm < kNormGuard) {
            g_guard_hits.fetch_add(1, std::memory_order_relaxed);
            inv = 0.0; // marks pass-through
            std::copy_n(x.data() + r * n, n, y.data() + r * n);
        } else {
            inv = 1.0 / norm;
            for (std::size_t i = 0; i < n; ++i) y[r * n + i] = x[r * n + i] * inv;
        }
        (*inv_norm)[r] = inv;
    }
    return make_result(a.shape(), std::move(y), {&a}, [rows, n, inv_norm](Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            const double inv = (*inv_norm)[r];
            const double* yr = self.value.data() + r * n;
            const double* dy = self.grad.data() + r * n;
            if (inv == 0.0) {
                for (std::size_t i = 0; i < n; ++i) g[r * n + i] += dy[i];
                continue;
            }
            double dot = 0.0;
            for (std::size_t i = 0; i < n; ++i) dot += yr[i] * dy[i];
            for (std::size_t i = 0; i < n; ++i) g[r * n + i] += inv * (dy[i] - yr[i] * dot);
        }
    });
}

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps) {
    require_defined(a, "layer_norm");
    require_defined(gain, "layer_norm");
    require_defined(bias, "layer_norm");
    if (a.rank() == 0) throw ShapeError("layer_norm", "empty axis on scalar input");
    const std::size_t n = a.shape().back();
    if (gain.shape() != Shape{n}) throw ShapeError("layer_norm", a.shape(), gain.shape());
    if (bias.shape() != Shape{n}) throw ShapeError("layer_norm", a.shape(), bias.shape());
    const std::size_t rows = a.size() / n;
    auto x = a.values();
    auto gv = gain.values();
    auto bv = bias.values();
    auto xhat = std::make_shared<Buffer>(a.size());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    Buffer y(a.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * n;
        double mu = 0.0;
        for (std::size_t i = 0; i < n; ++i) mu += xr[i];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) var += (xr[i] - mu) * (xr[i] - mu);
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t i = 0; i < n; ++i) {
            const double h = (xr[i] - mu) * is;
            (*xhat)[r * n + i] = h;
            y[r * n + i] = h * gv[i] + bv[i];
        }
    }
    return make_result(a.shape(), std::move(y), {&a, &gain, &bias}, [rows, n, xhat, inv_std](Node& self) {
        Node& in = *self.inputs[0];
        Node& g = *self.inputs[1];
        Node& b = *self.inputs[2];
        if (g.requires_grad) {
            auto& gg = g.grad_buffer();
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t i = 0; i < n; ++i) gg[i] += self.grad[r * n + i] * (*xhat)[r * n + i];
            }
        }
        if (b.requires_grad) {
            auto& bg = b.grad_buffer();
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t i = 0; i < n; ++i) bg[i] += self.grad[r * n + i];
            }
        }
        if (!in.requires_grad) return;
        const bool fresh = in.open_grad();
        double* dx = in.grad.data();
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* h = xhat->data() + r * n;
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double dh = self.grad[r * n + i] * g.value[i];
                m1 += dh;
                m2 += dh * h[i];
            }
            m1 *= inv_n;
            m2 *= inv_n;
            for (std::size_t i = 0; i < n; ++i) {
                const double dh = self.grad[r * n + i] * g.value[i];
                const double v = (*inv_std)[r] * (dh - m1 - h[i] * m2);
                dx[r * n + i] = fresh ? v : dx[r * n + i] + v;
            }
        }
    });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
    require_rank("cross_entropy", logits, 2);
    const std::size_t rows = logits.dim(0), n = logits.dim(1);
    if (labels.size() != rows) {
        throw ShapeError("cross_entropy", "expected " + std::to_string(rows) + " labels, got " + std::to_string(labels.size()));
    }
    for (int l : labels) {
        if (l < 0 || static_cast<std::size_t>(l) >= n) {
            throw std::out_of_range("cross_entropy: label " + std::to_string(l) + " outside [0," + std::to_string(n) + ")");
        }
    }
    auto x = logits.values();
    auto probs = std::make_shared<std::vector<double>>(logits.size());
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * n;
        double* pr = probs->data() + r * n;
        const double mx = *std::max_element(xr, xr + n);
        double z = 0.0;
        for (std::size_t i = 0; i < n; ++i) z += (pr[i] = std::exp(xr[i] - mx));
        for (std::size_t i = 0; i < n; ++i) pr[i] /= z;
        total += std::log(z) - (xr[labels[r]] - mx);
    }
    std::vector<int> lab(labels.begin(), labels.end());
    const double inv_rows = 1.0 / static_cast<double>(rows);
    return make_result({}, {total * inv_rows}, {&logits}, [rows, n, probs, lab, inv_rows](Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        const double s = self.grad[0] * inv_rows;
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t i = 0; i < n; ++i) {
                const double target = static_cast<std::size_t>(lab[r]) == i ? 1.0 : 0.0;
                g[r * n + i] += s * ((*probs)[r * n + i] - target);
            }
        }
    });
}

std::size_t l2_normalize_guard_hits() noexcept { return g_guard_hits.load(std::memory_order_relaxed); }

namespace debug {
void set_fault_injection(bool enabled) noexcept { g_fault_injection.store(enabled); }
bool fault_injection() noexcept { return g_fault_injection.load(); }
} // namespace debug

} // namespace explicd::ad
