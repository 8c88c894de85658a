#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ssmc/graph.hpp"
#include "ssmc/patching.hpp"

namespace ssmc {

struct EapOptions {
    MetricKind metric = MetricKind::nld;  // must be differentiable: nld or logit_diff
    int iters = 1;                        // 1 = plain EAP; >= 2 integrated gradients
    bool positional = false;
    // Which pass the plain-EAP gradient is taken on. The method description
    // patches every edge before calling backward; the clean-pass gradient is
    // the common alternative, exposed behind this flag.
    enum class GradPass { fully_patched, clean };
    GradPass grad_pass = GradPass::fully_patched;
};

// Attribution scores per edge of a causal graph. Positional tables keep one
// entry per token position for residual edges (intra edges are scored
// non-positionally and carry a single entry).
struct AttributionTable {
    std::vector<double> scores;
    std::vector<std::vector<double>> positional;  // filled when options.positional
    std::string metric;
    int iters = 1;
    int64_t seq_len = 0;

    std::string to_json(const CausalGraph& g) const;
    // Adjacency matrix of scores; rows are input (source) nodes.
    std::string to_csv_adjacency(const CausalGraph& g) const;
};

// One forward + one backward per example (per interpolation step) estimating
// every edge's patch effect as (corrupted - clean source) . grad(dst input).
AttributionTable eap(const Model& m, const CausalGraph& g, const std::vector<PairContext>& ctxs,
                     const EapOptions& opt = {});

AttributionTable eap_integrated_gradients(const Model& m, const CausalGraph& g, const std::vector<PairContext>& ctxs,
                                          int iters, EapOptions opt = {});

AttributionTable positional_eap(const Model& m, const CausalGraph& g, const std::vector<PairContext>& ctxs,
                                EapOptions opt = {});

// Writes scores onto the graph edges (used before sweeps and exports).
void apply_scores(CausalGraph& g, const AttributionTable& table);

struct MinimalEdgeSetResult {
    std::vector<int> kept;  // edge ids kept after the search and path pruning
    int k = 0;              // smallest top-k reaching the target
    double achieved = 0.0;  // metric of the final kept set
    bool used_linear_scan = false;
};

// Sorts patchable edges by |score| (signed scores behind the flag), binary
// searches the smallest top-k whose evaluation reaches the target, then prunes
// kept edges that lie on no embed->output path. Evaluation patches every
// non-kept patchable edge. Binary search assumes approximate monotonicity,
// verified by spot checks; a linear scan takes over if they fail.
MinimalEdgeSetResult minimal_edge_set(const AttributionTable& table, const Model& m, CausalGraph& g,
                                      const std::vector<PairContext>& ctxs, MetricKind metric, double target,
                                      bool signed_ranking = false, uint64_t spot_seed = 17);

}  // namespace ssmc
