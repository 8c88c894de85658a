#include "ssmc/acdc.hpp"

namespace ssmc {

AcdcResult acdc_sweep(CausalGraph& g, const Model& m, const std::vector<PairContext>& ctxs, const AcdcOptions& opt) {
    if (opt.thresh < 0.0) throw std::invalid_argument("acdc_sweep: thresh must be >= 0");
    AcdcResult res;
    auto eval = [&]() { return run_with_plan(m, ctxs, g.plan_for_patched(), opt.metric).mean; };

    double baseline = eval();
    for (int id : g.sweep_order()) {
        Edge& e = g.edges()[static_cast<size_t>(id)];
        if (e.patched) continue;  // already out (e.g. dropped by the minimal-set search)
        e.patched = true;
        const double with_edge = eval();
        const double drop = baseline - with_edge;
        AcdcEdgeRecord rec{id, baseline, with_edge, drop, drop < opt.thresh};
        if (rec.removed) {
            baseline = with_edge;  // stays patched
        } else {
            e.patched = false;
        }
        res.records.push_back(rec);
    }
    if (opt.prune_at_end) res.pruned = g.prune_disconnected();
    res.final_metric = eval();
    res.final_accuracy = run_with_plan(m, ctxs, g.plan_for_patched(), MetricKind::accuracy).mean;
    return res;
}

}  // namespace ssmc
