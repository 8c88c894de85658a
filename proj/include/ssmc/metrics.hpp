#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ssmc/tape.hpp"
#include "ssmc/tensor.hpp"

namespace ssmc {

// Logit rows at the answer position for the three runs of one example.
// "unpatched" is the baseline forward pass, "corrupted" the corrupted-prompt
// pass, "patched" the intervened pass under evaluation.
struct MetricInput {
    Tensor unpatched;  // [V]
    Tensor corrupted;  // [V]
    Tensor patched;    // [V]
    int64_t answer_tok = -1;            // A
    int64_t corrupted_answer_tok = -1;  // B
    std::vector<int64_t> candidates;    // optional, for relative_probability

    void check() const;  // A != B, ids in range
};

// (patched A-B - min_diff) / |max_diff - min_diff|, zero ranges replaced by 1.
// 1 means the model acts like the unpatched pass, 0 like the corrupted pass;
// values outside [0,1] are legal and never clamped.
double normalized_logit_diff(const MetricInput& in);

double logit_diff(const MetricInput& in);  // patched A - B
double accuracy(const MetricInput& in);    // argmax over the full vocab == A
double kl_divergence(const MetricInput& in);  // KL(patched || unpatched)

// Softmax over exactly the candidate logits of the patched run; probability of
// the answer token. Errors on duplicate candidates.
double relative_probability(const MetricInput& in);

// neg_kl is -KL(patched || unpatched): an orientation-free "act like the
// clean run" score whose maximum 0 is reached exactly at a no-op patch.
enum class MetricKind { nld, logit_diff, accuracy, kl, neg_kl, relative_prob };
std::string metric_name(MetricKind m);
MetricKind metric_from_name(const std::string& name);
double eval_metric(MetricKind m, const MetricInput& in);

// Mean of per-example values (batch aggregation is mean-of-normalized).
double batch_mean(MetricKind m, const std::vector<MetricInput>& ins);

// Differentiable normalized logit diff for a patched logits row on the tape;
// the unpatched/corrupted endpoint diffs enter as constants.
Value nld_on_tape(Tape& tape, Value patched_logits_row, int64_t answer_tok, int64_t corrupted_answer_tok,
                  double min_diff, double max_diff);

// The endpoint diffs from baseline runs: A-B on unpatched (max) and corrupted (min).
struct NldBaseline {
    double min_diff = 0.0;
    double max_diff = 0.0;
};
NldBaseline nld_baseline(const Tensor& unpatched, const Tensor& corrupted, int64_t a, int64_t b);

}  // namespace ssmc
