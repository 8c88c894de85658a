#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "ssmc/tape.hpp"
#include "ssmc/tensor.hpp"

using namespace ssmc;

namespace {

// Central finite differences of a scalar-valued function of one tensor input,
// the independent oracle for every primitive's backward.
Tensor fd_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h = 1e-6) {
    Tensor g(x.shape());
    Tensor xp = x;
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double orig = xp[i];
        xp[i] = orig + h;
        const double fp = f(xp);
        xp[i] = orig - h;
        const double fm = f(xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

void check_close(const Tensor& got, const Tensor& want, double rtol = 1e-4, double atol = 1e-8) {
    REQUIRE(got.shape() == want.shape());
    for (int64_t i = 0; i < got.numel(); ++i) {
        const double tol = atol + rtol * std::max(std::abs(got[i]), std::abs(want[i]));
        CHECK(std::abs(got[i] - want[i]) <= tol);
    }
}

// Checks d(weighted sum of op(x)) / dx against finite differences, using a
// fixed random cotangent so every output element participates.
void grad_check(const std::function<Value(Tape&, Value)>& op, const Tensor& x, uint64_t seed = 7) {
    std::mt19937_64 rng(seed);
    Tape probe;
    Value xv = probe.leaf(x);
    Tensor cot = Tensor::randn(op(probe, xv).val().shape(), rng);

    auto scalarize = [&](const Tensor& in) {
        Tape t;
        Value v = op(t, t.leaf(in));
        return t_dot(v.val(), cot);
    };

    Tape t;
    Value in = t.leaf(x);
    Value out = op(t, in);
    Value loss = t.leaf(cot);
    t.backward(sum_all(mul(out, loss)));
    check_close(t.grad(in), fd_grad(scalarize, x));
}

Tensor rand_t(Shape s, uint64_t seed, double lo = -2.0, double hi = 2.0) {
    std::mt19937_64 rng(seed);
    return Tensor::uniform(std::move(s), rng, lo, hi);
}

}  // namespace

TEST_CASE("closed-form values of scalar nonlinearities") {
    Tape t;
    Value z = t.leaf(Tensor::scalar(0.0));
    CHECK(softplus(z).val().item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(silu(z).val().item() == 0.0);
    CHECK(sigmoid(z).val().item() == 0.5);
}

TEST_CASE("backward of sum(x*x) is 2x") {
    Tape t;
    Value x = t.leaf(Tensor({2}, {1.0, 2.0}));
    t.backward(sum_all(mul(x, x)));
    Tensor g = t.grad(x);
    CHECK(g[0] == doctest::Approx(2.0));
    CHECK(g[1] == doctest::Approx(4.0));
}

TEST_CASE("gradient of a constant w.r.t. x is zero") {
    Tape t;
    Value x = t.leaf(Tensor({3}, {1.0, 2.0, 3.0}));
    Value c = t.leaf(Tensor::scalar(5.0));
    t.backward(mul(c, c));
    Tensor g = t.grad(x);
    for (int64_t i = 0; i < g.numel(); ++i) CHECK(g[i] == 0.0);
}

TEST_CASE("non-scalar loss is rejected") {
    Tape t;
    Value x = t.leaf(Tensor({2}, {1.0, 2.0}));
    CHECK_THROWS_AS(t.backward(mul(x, x)), ShapeError);
}

TEST_CASE("finite-difference check: elementwise unary ops") {
    Tensor x = rand_t({3, 4}, 11);
    grad_check([](Tape&, Value v) { return exp(v); }, x);
    grad_check([](Tape&, Value v) { return sigmoid(v); }, x);
    grad_check([](Tape&, Value v) { return silu(v); }, x);
    grad_check([](Tape&, Value v) { return softplus(v); }, x);
    Tensor pos = rand_t({3, 4}, 12, 0.1, 3.0);
    grad_check([](Tape&, Value v) { return log(v); }, pos);
    grad_check([](Tape&, Value v) { return sqrt(v); }, pos);
}

TEST_CASE("finite-difference check: binary elementwise ops") {
    Tensor x = rand_t({2, 5}, 21);
    Tensor y = rand_t({2, 5}, 22, 0.5, 2.0);
    grad_check([&](Tape& t, Value v) { return add(v, t.leaf(y)); }, x);
    grad_check([&](Tape& t, Value v) { return sub(t.leaf(y), v); }, x);
    grad_check([&](Tape& t, Value v) { return mul(v, t.leaf(y)); }, x);
    grad_check([&](Tape& t, Value v) { return div(v, t.leaf(y)); }, x);
    grad_check([&](Tape& t, Value v) { return div(t.leaf(y), v); }, rand_t({2, 5}, 23, 0.5, 2.0));
    grad_check([](Tape&, Value v) { return add_scalar(mul_scalar(v, 3.0), -1.0); }, x);
}

TEST_CASE("finite-difference check: matmul both sides") {
    Tensor a = rand_t({3, 4}, 31);
    Tensor b = rand_t({4, 2}, 32);
    grad_check([&](Tape& t, Value v) { return matmul(v, t.leaf(b)); }, a);
    grad_check([&](Tape& t, Value v) { return matmul(t.leaf(a), v); }, b);
}

TEST_CASE("matmul shape mismatch names op and shapes") {
    Tape t;
    Value a = t.leaf(Tensor({2, 3}));
    Value b = t.leaf(Tensor({2, 3}));
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        CHECK(msg.find("matmul") != std::string::npos);
        CHECK(msg.find("[2,3]") != std::string::npos);
    }
}

TEST_CASE("finite-difference check: shape ops") {
    Tensor x = rand_t({2, 3, 4}, 41);
    grad_check([](Tape&, Value v) { return reshape(v, {6, 4}); }, x);
    grad_check([](Tape&, Value v) { return permute(v, {2, 0, 1}); }, x);
    grad_check([](Tape&, Value v) { return slice(v, 1, 1, 3); }, x);
    grad_check([](Tape&, Value v) { return clone(v); }, x);
    Tensor e = rand_t({2, 1, 4}, 42);
    grad_check([](Tape&, Value v) { return expand(v, 1, 5); }, e);
    grad_check([&](Tape& t, Value v) {
        Value other = t.leaf(rand_t({2, 2, 4}, 43));
        return concat({v, other, v}, 1);
    }, x);
}

TEST_CASE("finite-difference check: reductions and softmax") {
    Tensor x = rand_t({3, 5}, 51);
    grad_check([](Tape&, Value v) { return sum_axis(v, 0); }, x);
    grad_check([](Tape&, Value v) { return sum_axis(v, 1, true); }, x);
    grad_check([](Tape&, Value v) { return mean_axis(v, 1); }, x);
    grad_check([](Tape&, Value v) { return sum_all(v); }, x);
    grad_check([](Tape&, Value v) { return softmax_lastdim(v); }, x);
    grad_check([](Tape&, Value v) { return log_softmax_lastdim(v); }, x);
}

TEST_CASE("softmax rows sum to one within 1e-12") {
    Tape t;
    Tensor x = rand_t({7, 9}, 61, -30.0, 30.0);
    Value s = softmax_lastdim(t.leaf(x));
    for (int64_t r = 0; r < 7; ++r) {
        double sum = 0.0;
        for (int64_t i = 0; i < 9; ++i) sum += s.val().at({r, i});
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }
}

TEST_CASE("finite-difference check: gather_rows") {
    Tensor table = rand_t({6, 3}, 71);
    std::vector<int64_t> ids = {0, 5, 2, 2, 1, 0};
    grad_check([&](Tape&, Value v) { return gather_rows(v, ids, 2, 3); }, table);
}

TEST_CASE("gather_rows rejects out-of-range ids") {
    Tape t;
    Value table = t.leaf(Tensor({4, 2}));
    CHECK_THROWS_AS(gather_rows(table, {0, 4}, 1, 2), std::out_of_range);
}

TEST_CASE("finite-difference check: conv1d_causal all three inputs") {
    Tensor x = rand_t({2, 3, 6}, 81);
    Tensor w = rand_t({3, 4}, 82);
    Tensor b = rand_t({3}, 83);
    grad_check([&](Tape& t, Value v) { return conv1d_causal(v, t.leaf(w), t.leaf(b)); }, x);
    grad_check([&](Tape& t, Value v) { return conv1d_causal(t.leaf(x), v, t.leaf(b)); }, w);
    grad_check([&](Tape& t, Value v) { return conv1d_causal(t.leaf(x), t.leaf(w), v); }, b);
}

TEST_CASE("conv1d with delta filter at the current position is the identity") {
    Tape t;
    Tensor x = rand_t({1, 2, 8}, 91);
    Tensor w({2, 4}, {0, 0, 0, 1, 0, 0, 0, 1});
    Value out = conv1d_causal(t.leaf(x), t.leaf(w), t.leaf(Tensor({2})));
    CHECK(t_max_abs_diff(out.val(), x) == 0.0);
}

TEST_CASE("conv1d causality: output at t never sees inputs after t") {
    std::mt19937_64 rng(101);
    Tensor x = Tensor::randn({1, 3, 10}, rng);
    Tensor w = Tensor::randn({3, 4}, rng);
    Tensor b = Tensor::randn({3}, rng);
    Tape t1;
    Tensor y1 = conv1d_causal(t1.leaf(x), t1.leaf(w), t1.leaf(b)).val();
    for (int64_t tp = 1; tp < 10; ++tp) {
        Tensor xp = x;
        for (int64_t c = 0; c < 3; ++c) xp.at({0, c, tp}) += 10.0;
        Tape t2;
        Tensor y2 = conv1d_causal(t2.leaf(xp), t2.leaf(w), t2.leaf(b)).val();
        for (int64_t c = 0; c < 3; ++c) {
            for (int64_t s = 0; s < tp; ++s) {
                CHECK(y1.at({0, c, s}) == y2.at({0, c, s}));  // bit-for-bit
            }
        }
    }
}

TEST_CASE("backward hook captures the tape gradient for that node") {
    Tape t;
    Value x = t.leaf(rand_t({4}, 111), "x");
    Value y = mul(x, x);
    t.name_node(y, "y");
    Value loss = sum_all(y);
    auto hook_x = t.register_backward_hook("x");
    auto hook_y = t.register_backward_hook("y");
    CHECK_THROWS_AS(t.register_backward_hook("nope"), std::invalid_argument);
    t.backward(loss);
    check_close(hook_x.grad(), t.grad(x), 1e-15, 0.0);
    // hook on the loss input: same as the backward() entry for that node
    check_close(hook_y.grad(), Tensor::full({4}, 1.0), 1e-15, 0.0);
}

TEST_CASE("hook on a node unreachable from the loss reports zeros") {
    Tape t;
    Value x = t.leaf(rand_t({3}, 121), "x");
    Value orphan = exp(x);
    t.name_node(orphan, "orphan");
    Value loss = sum_all(mul(x, x));
    auto hook = t.register_backward_hook("orphan");
    t.backward(loss);
    CHECK(hook.grad().max_abs() == 0.0);
}

TEST_CASE("tape replay determinism: identical inputs, identical values and grads") {
    auto run = [](std::vector<double>& vals, Tensor& grad) {
        Tape t;
        Value x = t.leaf(rand_t({4, 4}, 131));
        Value y = softmax_lastdim(matmul(x, transpose2d(silu(x))));
        Value loss = sum_all(mul(y, y));
        t.backward(loss);
        vals.assign(y.val().vec().begin(), y.val().vec().end());
        grad = t.grad(x);
    };
    std::vector<double> v1, v2;
    Tensor g1, g2;
    run(v1, g1);
    run(v2, g2);
    CHECK(v1 == v2);
    CHECK(t_max_abs_diff(g1, g2) == 0.0);
}

TEST_CASE("shape mismatch on elementwise op names both shapes") {
    Tape t;
    Value a = t.leaf(Tensor({2, 3}));
    Value b = t.leaf(Tensor({3, 2}));
    try {
        add(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[3,2]") != std::string::npos);
    }
}

TEST_CASE("grad-disabled tape records values but refuses backward") {
    Tape t(false);
    Value x = t.leaf(rand_t({2}, 141));
    Value y = silu(x);
    CHECK(y.val().numel() == 2);
    CHECK_THROWS(t.backward(sum_all(y)));
}
