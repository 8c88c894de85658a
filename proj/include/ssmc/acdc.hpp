#pragma once

#include "ssmc/eap.hpp"
#include "ssmc/graph.hpp"

namespace ssmc {

struct AcdcOptions {
    MetricKind metric = MetricKind::nld;
    double thresh = 1e-4;
    bool prune_at_end = true;
};

struct AcdcEdgeRecord {
    int edge = -1;
    double baseline = 0.0;    // metric before trying this edge
    double with_edge = 0.0;   // metric with the edge additionally patched
    double drop = 0.0;        // baseline - with_edge
    bool removed = false;
};

struct AcdcResult {
    std::vector<AcdcEdgeRecord> records;
    double final_metric = 0.0;
    double final_accuracy = 0.0;
    int pruned = 0;  // disconnected edges dropped after the sweep
};

// Sink-to-source sweep: each kept edge is additionally patched; when the
// metric drop stays under the threshold the edge remains patched (removed).
// Edges sharing a sink are visited in descending |score|. The graph is
// mutated in place; disconnected edges are pruned at the end.
AcdcResult acdc_sweep(CausalGraph& g, const Model& m, const std::vector<PairContext>& ctxs, const AcdcOptions& opt);

}  // namespace ssmc
