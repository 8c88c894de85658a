#include "ssmc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace ssmc {

void MetricInput::check() const {
    if (answer_tok == corrupted_answer_tok) {
        throw std::invalid_argument("MetricInput: answer and corrupted answer must differ");
    }
    const int64_t v = unpatched.numel();
    auto in_range = [&](int64_t t) { return t >= 0 && t < v; };
    if (!in_range(answer_tok) || !in_range(corrupted_answer_tok)) {
        throw std::invalid_argument("MetricInput: token id out of range");
    }
    for (int64_t c : candidates) {
        if (!in_range(c)) throw std::invalid_argument("MetricInput: candidate token id out of range");
    }
    if (corrupted.numel() != v || patched.numel() != v) {
        throw std::invalid_argument("MetricInput: logit rows must agree in size");
    }
}

NldBaseline nld_baseline(const Tensor& unpatched, const Tensor& corrupted, int64_t a, int64_t b) {
    NldBaseline base;
    base.min_diff = corrupted[a] - corrupted[b];
    base.max_diff = unpatched[a] - unpatched[b];
    return base;
}

static double nld_value(double patched_diff, double min_diff, double max_diff) {
    double range = std::abs(max_diff - min_diff);
    if (range == 0.0) range = 1.0;  // prevent divide by zero
    return (patched_diff - min_diff) / range;
}

double normalized_logit_diff(const MetricInput& in) {
    in.check();
    const NldBaseline base = nld_baseline(in.unpatched, in.corrupted, in.answer_tok, in.corrupted_answer_tok);
    return nld_value(in.patched[in.answer_tok] - in.patched[in.corrupted_answer_tok], base.min_diff, base.max_diff);
}

double logit_diff(const MetricInput& in) {
    in.check();
    return in.patched[in.answer_tok] - in.patched[in.corrupted_answer_tok];
}

double accuracy(const MetricInput& in) {
    in.check();
    int64_t best = 0;
    for (int64_t v = 1; v < in.patched.numel(); ++v) {
        if (in.patched[v] > in.patched[best]) best = v;
    }
    return best == in.answer_tok ? 1.0 : 0.0;
}

double kl_divergence(const MetricInput& in) {
    in.check();
    const int64_t v = in.patched.numel();
    auto log_softmax = [&](const Tensor& t) {
        std::vector<double> out(static_cast<size_t>(v));
        double mx = t[0];
        for (int64_t i = 1; i < v; ++i) mx = std::max(mx, t[i]);
        double sum = 0.0;
        for (int64_t i = 0; i < v; ++i) sum += std::exp(t[i] - mx);
        const double lse = mx + std::log(sum);
        for (int64_t i = 0; i < v; ++i) out[static_cast<size_t>(i)] = t[i] - lse;
        return out;
    };
    const auto lp = log_softmax(in.patched);
    const auto lq = log_softmax(in.unpatched);
    double kl = 0.0;
    for (int64_t i = 0; i < v; ++i) {
        kl += std::exp(lp[static_cast<size_t>(i)]) * (lp[static_cast<size_t>(i)] - lq[static_cast<size_t>(i)]);
    }
    return kl;
}

double relative_probability(const MetricInput& in) {
    in.check();
    if (in.candidates.empty()) throw std::invalid_argument("relative_probability: no candidate tokens supplied");
    std::set<int64_t> uniq(in.candidates.begin(), in.candidates.end());
    if (uniq.size() != in.candidates.size()) {
        throw std::invalid_argument("relative_probability: duplicate candidate tokens");
    }
    double mx = in.patched[in.candidates[0]];
    for (int64_t c : in.candidates) mx = std::max(mx, in.patched[c]);
    double denom = 0.0, num = 0.0;
    for (int64_t c : in.candidates) {
        const double e = std::exp(in.patched[c] - mx);
        denom += e;
        if (c == in.answer_tok) num = e;
    }
    return num / denom;
}

std::string metric_name(MetricKind m) {
    switch (m) {
        case MetricKind::nld: return "normalized_logit_diff";
        case MetricKind::logit_diff: return "logit_diff";
        case MetricKind::accuracy: return "accuracy";
        case MetricKind::kl: return "kl_divergence";
        case MetricKind::neg_kl: return "neg_kl";
        case MetricKind::relative_prob: return "relative_probability";
    }
    return "?";
}

MetricKind metric_from_name(const std::string& name) {
    for (MetricKind m : {MetricKind::nld, MetricKind::logit_diff, MetricKind::accuracy, MetricKind::kl,
                         MetricKind::neg_kl, MetricKind::relative_prob}) {
        if (metric_name(m) == name) return m;
    }
    throw std::invalid_argument("unknown metric '" + name + "'");
}

double eval_metric(MetricKind m, const MetricInput& in) {
    switch (m) {
        case MetricKind::nld: return normalized_logit_diff(in);
        case MetricKind::logit_diff: return logit_diff(in);
        case MetricKind::accuracy: return accuracy(in);
        case MetricKind::kl: return kl_divergence(in);
        case MetricKind::neg_kl: return -kl_divergence(in);
        case MetricKind::relative_prob: return relative_probability(in);
    }
    throw std::logic_error("unreachable");
}

double batch_mean(MetricKind m, const std::vector<MetricInput>& ins) {
    if (ins.empty()) throw std::invalid_argument("batch_mean: empty batch");
    double s = 0.0;
    for (const auto& in : ins) s += eval_metric(m, in);
    return s / static_cast<double>(ins.size());
}

Value nld_on_tape(Tape& tape, Value patched_logits_row, int64_t answer_tok, int64_t corrupted_answer_tok,
                  double min_diff, double max_diff) {
    (void)tape;
    const Tensor& row = patched_logits_row.val();
    if (row.rank() != 1) throw ShapeError("nld_on_tape: logits row must be rank-1, got " + shape_str(row.shape()));
    Value a = reshape(slice(patched_logits_row, 0, answer_tok, answer_tok + 1), {});
    Value b = reshape(slice(patched_logits_row, 0, corrupted_answer_tok, corrupted_answer_tok + 1), {});
    double range = std::abs(max_diff - min_diff);
    if (range == 0.0) range = 1.0;
    return mul_scalar(add_scalar(sub(a, b), -min_diff), 1.0 / range);
}

}  // namespace ssmc
