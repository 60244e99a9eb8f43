#include "doctest.h"

#include "explicd/autodiff.hpp"
#include "explicd/gradcheck.hpp"
#include "explicd/rng.hpp"

#include <cmath>
#include <functional>
#include <vector>

using namespace explicd;
using namespace explicd::ad;

namespace {

Tensor random_param(SplitMix64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = lo + (hi - lo) * rng.uniform();
    return Tensor::parameter(std::move(shape), std::move(v));
}

// Checks d(sum(w * f(x)))/dx with a random weighting w, so every output
// element contributes a distinct cotangent.
void check_primitive(const char* name, std::vector<NamedTensor> params, const std::function<Tensor()>& f,
                     std::uint64_t seed = 99) {
    Tensor probe = f();
    SplitMix64 rng(seed);
    std::vector<double> w(probe.size());
    for (double& x : w) x = rng.uniform_signed();
    Tensor weights = Tensor::from(probe.shape(), w);
    auto loss = [&] { return sum(mul(f(), weights)); };
    auto report = finite_diff_check(loss, std::move(params), 1e-5, 1e-6);
    INFO(name, " worst=", report.worst().name, " rel=", report.worst().rel_error);
    CHECK(report.passed);
}

} // namespace

TEST_CASE("softmax of equal logits is uniform and shift invariant") {
    Tensor x = Tensor::from({3}, {0, 0, 0});
    auto y = softmax(x).to_vector();
    for (double v : y) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    SplitMix64 rng(1);
    Tensor a = random_param(rng, {4, 5}, -3, 3);
    std::vector<double> shifted(a.values().begin(), a.values().end());
    for (double& v : shifted) v += 17.25;
    auto s1 = softmax(a).to_vector();
    auto s2 = softmax(Tensor::from({4, 5}, shifted)).to_vector();
    for (std::size_t i = 0; i < s1.size(); ++i) CHECK(s1[i] == doctest::Approx(s2[i]).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one") {
    SplitMix64 rng(2);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor a = random_param(rng, {3, 7}, -30, 30);
        auto y = softmax(a).to_vector();
        for (std::size_t r = 0; r < 3; ++r) {
            double s = 0;
            for (std::size_t i = 0; i < 7; ++i) s += y[r * 7 + i];
            CHECK(std::abs(s - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("softmax rejects empty axis") {
    CHECK_THROWS_AS(softmax(Tensor::scalar(1.0)), ShapeError);
}

TEST_CASE("matmul matches triple loop") {
    SplitMix64 rng(3);
    Tensor a = random_param(rng, {2, 3});
    Tensor b = random_param(rng, {3, 2});
    auto c = matmul(a, b).to_vector();
    for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t j = 0; j < 2; ++j) {
            double s = 0;
            for (std::size_t k = 0; k < 3; ++k) s += a[i * 3 + k] * b[k * 2 + j];
            CHECK(std::abs(c[i * 2 + j] - s) <= 1e-15);
        }
    }
}

TEST_CASE("shape errors name the operation and shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({2, 3});
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        CHECK(msg.find("matmul") != std::string::npos);
        CHECK(msg.find("[2,3]") != std::string::npos);
    }
    CHECK_THROWS_AS(add(a, Tensor::zeros({3, 2})), ShapeError);
    CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
    CHECK_THROWS_AS(log(Tensor::from({2}, {1.0, 0.0})), DomainError);
}

TEST_CASE("backward of sum gives ones and of mean square gives x over n") {
    SplitMix64 rng(4);
    Tensor x = random_param(rng, {3, 4});
    {
        Tape tape;
        tape.backward(sum(x));
    }
    for (double g : x.grad()) CHECK(g == 1.0);

    x.zero_grad();
    {
        Tape tape;
        tape.backward(scale(mean(mul(x, x)), 0.5));
    }
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(x.grad()[i] == doctest::Approx(x[i] / 12.0).epsilon(1e-14));
}

TEST_CASE("backward rejects non-scalar loss") {
    Tensor x = Tensor::parameter({2}, {1, 2});
    Tape tape;
    Tensor y = scale(x, 2.0);
    CHECK_THROWS_AS(tape.backward(y), ShapeError);
}

TEST_CASE("finite_diff_check on x*x at 3") {
    Tensor x = Tensor::parameter({}, {3.0});
    auto report = finite_diff_check([&] { return mul(x, x); }, {{"x", x}}, 1e-5, 1e-8);
    CHECK(report.passed);
    CHECK(x.grad()[0] == doctest::Approx(6.0));
    CHECK(report.entries[0].rel_error < 1e-8);
}

TEST_CASE("finite_diff_check on quadratic form matches (A + A^T) x") {
    SplitMix64 rng(5);
    Tensor a = Tensor::from({3, 3}, [&] {
        std::vector<double> v(9);
        for (double& x : v) x = rng.uniform_signed();
        return v;
    }());
    Tensor x = random_param(rng, {3, 1});
    auto report = finite_diff_check([&] { return sum(mul(x, matmul(a, x))); }, {{"x", x}}, 1e-5, 1e-8);
    CHECK(report.passed);
    for (std::size_t i = 0; i < 3; ++i) {
        double expected = 0;
        for (std::size_t j = 0; j < 3; ++j) expected += (a[i * 3 + j] + a[j * 3 + i]) * x[j];
        CHECK(x.grad()[i] == doctest::Approx(expected).epsilon(1e-12));
    }
}

TEST_CASE("finite_diff_check reports non-finite loss") {
    Tensor x = Tensor::parameter({1}, {1.0});
    CHECK_THROWS_AS(finite_diff_check([&] { return sum(scale(exp(scale(x, 1e6)), 1e300)); }, {{"x", x}}), DomainError);
}

TEST_CASE("every primitive passes central differences at 1e-6") {
    SplitMix64 rng(6);
    Tensor a = random_param(rng, {3, 4});
    Tensor b = random_param(rng, {3, 4});
    Tensor m = random_param(rng, {4, 2});
    Tensor bias = random_param(rng, {4});
    Tensor pos = random_param(rng, {3, 4});
    Tensor g3a = random_param(rng, {2, 3, 4});
    Tensor g3b = random_param(rng, {2, 4, 5});
    Tensor g3c = random_param(rng, {2, 5, 4});
    Tensor positive = random_param(rng, {3, 4}, 0.5, 2.0);

    check_primitive("add", {{"a", a}, {"b", b}}, [&] { return add(a, b); });
    check_primitive("sub", {{"a", a}, {"b", b}}, [&] { return sub(a, b); });
    check_primitive("mul", {{"a", a}, {"b", b}}, [&] { return mul(a, b); });
    check_primitive("scale", {{"a", a}}, [&] { return scale(a, -2.5); });
    check_primitive("add_trailing", {{"a", g3a}, {"bias", bias}}, [&] { return add_trailing(g3a, bias); });
    check_primitive("add_trailing2", {{"a", g3a}, {"pos", pos}}, [&] { return add_trailing(g3a, pos); });
    check_primitive("mul_trailing", {{"a", g3a}, {"bias", bias}}, [&] { return mul_trailing(g3a, bias); });
    check_primitive("matmul", {{"a", a}, {"m", m}}, [&] { return matmul(a, m); });
    check_primitive("transpose", {{"a", a}}, [&] { return transpose(a); });
    check_primitive("bmm", {{"x", g3a}, {"y", g3b}}, [&] { return bmm(g3a, g3b); });
    check_primitive("bmm_t", {{"x", g3a}, {"y", g3c}}, [&] { return bmm(g3a, g3c, true); });
    check_primitive("broadcast_batch", {{"a", a}}, [&] { return broadcast_batch(a, 3); });
    check_primitive("softmax", {{"a", a}}, [&] { return softmax(scale(a, 3.0)); });
    check_primitive("log", {{"p", positive}}, [&] { return log(positive); });
    check_primitive("exp", {{"a", a}}, [&] { return exp(a); });
    check_primitive("tanh", {{"a", a}}, [&] { return tanh(a); });
    check_primitive("gelu", {{"a", a}}, [&] { return gelu(scale(a, 2.0)); });
    check_primitive("sum", {{"a", a}}, [&] { return sum(a); });
    check_primitive("mean", {{"a", a}}, [&] { return mean(a); });
    check_primitive("mean_axis", {{"a", g3a}}, [&] { return mean_axis(g3a, 1); });
    check_primitive("concat0", {{"a", a}, {"b", b}}, [&] { return concat({a, b}, 0); });
    check_primitive("concat1", {{"a", a}, {"p", positive}}, [&] { return concat({a, positive}, 1); });
    check_primitive("slice", {{"a", g3a}}, [&] { return slice(g3a, 1, 1, 3); });
    check_primitive("reshape", {{"a", a}}, [&] { return reshape(a, {2, 6}); });
    check_primitive("permute", {{"a", g3a}}, [&] { return permute(g3a, {2, 0, 1}); });
    check_primitive("l2_normalize", {{"a", a}}, [&] { return l2_normalize(a); });
    Tensor gain = random_param(rng, {4}, 0.5, 1.5);
    check_primitive("layer_norm", {{"a", a}, {"gain", gain}, {"bias", bias}},
                    [&] { return layer_norm(a, gain, bias); });
    std::vector<int> labels{1, 3, 0};
    check_primitive("cross_entropy", {{"a", a}}, [&] { return cross_entropy(scale(a, 2.0), labels); });
}

TEST_CASE("permute matches index arithmetic") {
    std::vector<double> v(24);
    for (std::size_t i = 0; i < 24; ++i) v[i] = static_cast<double>(i);
    Tensor x = Tensor::from({2, 3, 4}, v);
    Tensor y = permute(x, {1, 2, 0});
    REQUIRE(y.shape() == Shape{3, 4, 2});
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            for (std::size_t k = 0; k < 4; ++k) CHECK(y[(j * 4 + k) * 2 + i] == x[(i * 3 + j) * 4 + k]);
}

TEST_CASE("l2_normalize yields unit rows and guards tiny rows") {
    SplitMix64 rng(7);
    Tensor a = random_param(rng, {5, 6});
    auto y = l2_normalize(a).to_vector();
    for (std::size_t r = 0; r < 5; ++r) {
        double ss = 0;
        for (std::size_t i = 0; i < 6; ++i) ss += y[r * 6 + i] * y[r * 6 + i];
        CHECK(std::abs(std::sqrt(ss) - 1.0) <= 1e-12);
    }
    const auto hits = l2_normalize_guard_hits();
    Tensor tiny = Tensor::from({1, 3}, {1e-12, 0, 0});
    auto t = l2_normalize(tiny).to_vector();
    CHECK(t[0] == 1e-12);
    CHECK(l2_normalize_guard_hits() == hits + 1);
}

TEST_CASE("reused tensor accumulates gradients like the single-use rewrite") {
    SplitMix64 rng(8);
    Tensor x = random_param(rng, {2, 3});
    {
        Tape tape;
        tape.backward(sum(mul(x, x)));
    }
    std::vector<double> reused(x.grad().begin(), x.grad().end());

    // Single-use rewrite: x*x with one operand a detached copy, times two.
    x.zero_grad();
    Tensor copy = x.detach();
    {
        Tape tape;
        tape.backward(scale(sum(mul(x, copy)), 2.0));
    }
    for (std::size_t i = 0; i < reused.size(); ++i) {
        CHECK(reused[i] == doctest::Approx(x.grad()[i]).epsilon(1e-15));
        CHECK(reused[i] == doctest::Approx(2.0 * x[i]).epsilon(1e-15));
    }
}

TEST_CASE("no tape means no recording") {
    Tensor x = Tensor::parameter({2}, {1, 2});
    Tensor y = scale(x, 2.0);
    CHECK_FALSE(y.requires_grad());
    Tape tape;
    Tensor z = scale(x, 2.0);
    CHECK(z.requires_grad());
    CHECK(tape.size() == 1);
}

TEST_CASE("cross entropy rejects out of range labels") {
    Tensor logits = Tensor::zeros({2, 3});
    std::vector<int> bad{0, 3};
    CHECK_THROWS_AS(cross_entropy(logits, bad), std::out_of_range);
    std::vector<int> ok{0, 2};
    CHECK(cross_entropy(logits, ok).item() == doctest::Approx(std::log(3.0)).epsilon(1e-15));
}

TEST_CASE("fault injection breaks the gelu gradient check") {
    SplitMix64 rng(9);
    Tensor a = random_param(rng, {3, 3});
    debug::set_fault_injection(true);
    auto report = finite_diff_check([&] { return sum(gelu(a)); }, {{"a", a}}, 1e-5, 1e-4);
    debug::set_fault_injection(false);
    CHECK_FALSE(report.passed);
}
