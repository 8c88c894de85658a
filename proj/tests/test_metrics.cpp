#include <doctest.h>

#include <cmath>
#include <random>

#include "ssmc/metrics.hpp"

using namespace ssmc;

namespace {

MetricInput rand_input(uint64_t seed, int64_t v = 10) {
    std::mt19937_64 rng(seed);
    MetricInput in;
    in.unpatched = Tensor::randn({v}, rng, 3.0);
    in.corrupted = Tensor::randn({v}, rng, 3.0);
    in.patched = Tensor::randn({v}, rng, 3.0);
    in.answer_tok = 2;
    in.corrupted_answer_tok = 5;
    return in;
}

}  // namespace

TEST_CASE("patched == unpatched gives exactly 1, patched == corrupted exactly 0") {
    for (uint64_t seed = 0; seed < 50; ++seed) {
        MetricInput in = rand_input(seed);
        // endpoint-1 identity holds on the model-correct orientation (max >= min)
        const NldBaseline base = nld_baseline(in.unpatched, in.corrupted, in.answer_tok, in.corrupted_answer_tok);
        if (base.max_diff < base.min_diff) std::swap(in.unpatched, in.corrupted);
        in.patched = in.unpatched;
        CHECK(normalized_logit_diff(in) == 1.0);
        in.patched = in.corrupted;
        CHECK(normalized_logit_diff(in) == 0.0);
    }
}

TEST_CASE("zero range is replaced by 1, result = logit_diff - min_diff") {
    MetricInput in;
    in.unpatched = Tensor({4}, {3.0, 0.0, 1.0, 0.0});
    in.corrupted = Tensor({4}, {5.0, 2.0, 3.0, 0.0});  // same A-B diff = 2
    in.patched = Tensor({4}, {7.5, 0.0, 4.0, 0.0});    // A-B = 3.5
    in.answer_tok = 0;
    in.corrupted_answer_tok = 2;
    CHECK(normalized_logit_diff(in) == doctest::Approx(3.5 - 2.0).epsilon(1e-15));
}

TEST_CASE("values outside [0,1] pass through unclamped") {
    MetricInput in;
    in.unpatched = Tensor({3}, {2.0, 0.0, 0.0});   // max_diff = 2
    in.corrupted = Tensor({3}, {-1.0, 0.0, 0.0});  // min_diff = -1
    in.patched = Tensor({3}, {8.0, 0.0, 0.0});     // diff 8 -> (8+1)/3 = 3
    in.answer_tok = 0;
    in.corrupted_answer_tok = 1;
    CHECK(normalized_logit_diff(in) == doctest::Approx(3.0).epsilon(1e-15));
    in.patched = Tensor({3}, {-4.0, 0.0, 0.0});  // (-4+1)/3 = -1
    CHECK(normalized_logit_diff(in) == doctest::Approx(-1.0).epsilon(1e-15));
}

TEST_CASE("abs fix: the denominator is positive even when the model is wrong") {
    MetricInput in;
    in.unpatched = Tensor({3}, {-2.0, 0.0, 1.0});  // max_diff = -3 (model incorrect)
    in.corrupted = Tensor({3}, {1.0, 0.0, 0.0});   // min_diff = 1
    in.patched = Tensor({3}, {2.0, 0.0, 0.0});     // diff 2 -> (2-1)/|-4| = 0.25
    in.answer_tok = 0;
    in.corrupted_answer_tok = 2;
    CHECK(normalized_logit_diff(in) == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("relative probability: all-equal logits give 1/4; +50 gap saturates") {
    MetricInput in;
    in.unpatched = Tensor({6});
    in.corrupted = Tensor({6});
    in.patched = Tensor({6});
    in.answer_tok = 1;
    in.corrupted_answer_tok = 2;
    in.candidates = {1, 2, 3, 4};
    CHECK(relative_probability(in) == doctest::Approx(0.25).epsilon(1e-15));
    in.patched[1] = 50.0;
    CHECK(relative_probability(in) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("duplicate candidates are rejected") {
    MetricInput in = rand_input(3);
    in.candidates = {1, 2, 2, 4};
    CHECK_THROWS_AS(relative_probability(in), std::invalid_argument);
}

TEST_CASE("identical distributions give KL exactly 0") {
    MetricInput in = rand_input(4);
    in.patched = in.unpatched;
    CHECK(kl_divergence(in) == 0.0);
}

TEST_CASE("KL is positive for differing distributions") {
    MetricInput in = rand_input(5);
    CHECK(kl_divergence(in) > 0.0);
}

TEST_CASE("logit_diff of patched == corrupted equals min_diff") {
    MetricInput in = rand_input(6);
    in.patched = in.corrupted;
    const NldBaseline base = nld_baseline(in.unpatched, in.corrupted, in.answer_tok, in.corrupted_answer_tok);
    CHECK(logit_diff(in) == base.min_diff);
}

TEST_CASE("accuracy matches an exhaustive recount") {
    int correct = 0;
    std::vector<MetricInput> batch;
    for (uint64_t seed = 0; seed < 64; ++seed) {
        MetricInput in = rand_input(seed, 12);
        int64_t best = 0;
        for (int64_t v = 1; v < 12; ++v) {
            if (in.patched[v] > in.patched[best]) best = v;
        }
        if (best == in.answer_tok) ++correct;
        batch.push_back(in);
    }
    CHECK(batch_mean(MetricKind::accuracy, batch) == doctest::Approx(correct / 64.0).epsilon(1e-15));
}

TEST_CASE("batch mean equals the mean of per-example values") {
    std::vector<MetricInput> batch;
    double sum = 0.0;
    for (uint64_t seed = 100; seed < 132; ++seed) {
        batch.push_back(rand_input(seed));
        sum += normalized_logit_diff(batch.back());
    }
    CHECK(batch_mean(MetricKind::nld, batch) == doctest::Approx(sum / 32.0).epsilon(1e-15));
}

TEST_CASE("answer == corrupted answer is rejected") {
    MetricInput in = rand_input(7);
    in.corrupted_answer_tok = in.answer_tok;
    CHECK_THROWS_AS(normalized_logit_diff(in), std::invalid_argument);
}

TEST_CASE("differentiable nld agrees with the plain version") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        MetricInput in = rand_input(seed);
        const NldBaseline base = nld_baseline(in.unpatched, in.corrupted, in.answer_tok, in.corrupted_answer_tok);
        Tape t;
        Value row = t.leaf(in.patched);
        Value v = nld_on_tape(t, row, in.answer_tok, in.corrupted_answer_tok, base.min_diff, base.max_diff);
        CHECK(v.val().item() == doctest::Approx(normalized_logit_diff(in)).epsilon(1e-14));
        // gradient: d nld / d logits = (+1 at A, -1 at B) / range
        t.backward(v);
        Tensor g = t.grad(row);
        double range = std::abs(base.max_diff - base.min_diff);
        if (range == 0.0) range = 1.0;
        CHECK(g[in.answer_tok] == doctest::Approx(1.0 / range));
        CHECK(g[in.corrupted_answer_tok] == doctest::Approx(-1.0 / range));
    }
}
