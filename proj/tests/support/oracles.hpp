#pragma once

// Test-side oracles, kept independent of the implementation paths they check.

#include <cmath>
#include <vector>

#include "ssmc/eap.hpp"
#include "ssmc/graph.hpp"
#include "ssmc/patching.hpp"

namespace ssmc::testing {

// True per-edge patch effects: metric with exactly that edge patched, minus
// the unpatched metric. One full evaluation per edge.
inline std::vector<double> exhaustive_edge_deltas(const Model& m, const CausalGraph& g,
                                                  const std::vector<PairContext>& ctxs, MetricKind metric) {
    CausalGraph work = g;
    for (Edge& e : work.edges()) e.patched = false;
    const double base = run_with_plan(m, ctxs, work.plan_for_patched(), metric).mean;
    std::vector<double> deltas(g.edges().size(), 0.0);
    for (int id : work.patchable_edge_ids()) {
        work.edges()[static_cast<size_t>(id)].patched = true;
        deltas[static_cast<size_t>(id)] = run_with_plan(m, ctxs, work.plan_for_patched(), metric).mean - base;
        work.edges()[static_cast<size_t>(id)].patched = false;
    }
    return deltas;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const size_t n = a.size();
    double ma = 0.0, mb = 0.0;
    for (size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (size_t i = 0; i < n; ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

}  // namespace ssmc::testing
