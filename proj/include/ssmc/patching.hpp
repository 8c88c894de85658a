#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ssmc/ioi.hpp"
#include "ssmc/metrics.hpp"
#include "ssmc/model.hpp"

namespace ssmc {

// Number of worker threads used for per-example evaluation loops. Results are
// written to preassigned slots, so the value never changes results.
int& global_threads();
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn);

// ---------------------------------------------------------------------------
// intervention primitives
// ---------------------------------------------------------------------------

enum class PatchMode { resample, zero, mean, replace_with, subtract_add };

struct PositionSel {
    bool all = true;
    std::vector<int64_t> indices;
    std::vector<std::string> labels;  // semantic labels, resolved per pair

    static PositionSel everywhere();
    static PositionSel at(std::vector<int64_t> idx);
    static PositionSel at_labels(std::vector<std::string> lbls);
    std::vector<int64_t> resolve(const PromptPair& pair) const;  // validates < L
};

struct Intervention {
    std::string hook;  // canonicalized on plan entry
    PositionSel positions;
    PatchMode mode = PatchMode::resample;
    Tensor value;      // replace_with payload (full activation shape)
    Tensor sub_value;  // subtract_add: subtracted vector, at the selected positions
    Tensor add_value;  // subtract_add: added vector
    double alpha = 1.0;  // partial patch strength: v' = (1-alpha) v + alpha repl
};

// Residual-stream edge patch: dst input adjusted by alpha * (corrupted -
// clean) output of src. src -1 denotes the embedding node; dst -2 the output
// node. live_src subtracts the src value computed during the patched pass
// itself (the patch-evaluation semantics); gradient passes subtract the cached
// clean value instead, a constant shift that leaves gradient flow intact.
struct EdgePatch {
    int src = -1;
    int dst = -2;
    std::optional<int64_t> position;
    double alpha = 1.0;
    bool live_src = true;
};

// Replaces the tap's multiplicand with corrupted values at selected output
// positions; tap is a relative offset in [-(K-1), 0].
struct ConvSlicePatch {
    int layer = 0;
    int tap = 0;
    PositionSel positions;
    double alpha = 1.0;
};

struct PatchPlan {
    std::vector<Intervention> interventions;
    std::vector<EdgePatch> edges;
    std::vector<ConvSlicePatch> conv_slices;

    PatchPlan& add(Intervention iv);
    PatchPlan& add_edge(EdgePatch e);
    PatchPlan& add_conv_slice(ConvSlicePatch c);
};

PatchPlan patch_edge(int src, int dst, std::optional<int64_t> position = std::nullopt);
Intervention patch_hidden_state(int layer, int64_t position);  // resample hook_h.{pos}
Intervention remove_layer(int layer);                          // zero at hook_out_proj
Intervention resample_at(const std::string& hook, PositionSel positions = PositionSel::everywhere());

// ---------------------------------------------------------------------------
// per-pair evaluation context
// ---------------------------------------------------------------------------

// Clean and corrupted baseline passes for one prompt pair, cached once and
// reused across every plan evaluated on that pair.
struct PairContext {
    PromptPair pair;
    ActivationCache clean;
    ActivationCache corrupted;
    Tensor clean_logits_row;      // [V] at the answer position
    Tensor corrupted_logits_row;  // [V]
    std::vector<int64_t> candidates;  // distinct clean+corrupted name tokens

    MetricInput metric_input(Tensor patched_row) const;
};

PairContext make_context(const Model& m, const PromptPair& pair);
std::vector<PairContext> make_contexts(const Model& m, const std::vector<PromptPair>& pairs);

// Per-(hook, position) means over a dataset's clean activations.
struct MeanStore {
    std::map<std::string, Tensor> means;  // hook -> mean activation (batch dim 1)
};
MeanStore build_mean_store(const Model& m, const std::vector<PromptPair>& pairs,
                           const std::vector<std::string>& hook_names);

// Compiles a plan into hook callbacks for one pair. Per (hook, position) at
// most one overwrite applies; additive patches (subtract_add, edges) compose.
HookRegistry compile_plan(const Model& m, const PatchPlan& plan, const PairContext& ctx,
                          const MeanStore* means = nullptr);

struct RunOutput {
    std::vector<double> per_example;
    double mean = 0.0;
};

RunOutput run_with_plan(const Model& m, const std::vector<PairContext>& ctxs, const PatchPlan& plan, MetricKind metric,
                        const MeanStore* means = nullptr);

// Single-pair variant; optionally captures the patched pass activations and
// full final-position logits row.
double run_with_plan_single(const Model& m, const PairContext& ctx, const PatchPlan& plan, MetricKind metric,
                            const MeanStore* means = nullptr, ActivationCache* capture = nullptr,
                            Tensor* logits_row = nullptr);

// ---------------------------------------------------------------------------
// the paper's layer-level experiments
// ---------------------------------------------------------------------------

// (layer, position) resample heatmap at a hook family: "layer_input",
// "out_proj", or "h". Values are metric means per cell.
struct GridResult {
    std::vector<std::vector<double>> values;  // [layer][position]
    std::vector<std::string> position_labels;
};
GridResult ablation_grid(const Model& m, const std::vector<PairContext>& ctxs, const std::string& hook_family,
                         MetricKind metric);

// Zero-ablating each layer's output, one at a time.
std::vector<double> layer_removal_curve(const Model& m, const std::vector<PairContext>& ctxs, MetricKind metric);

struct GreedyStep {
    int layer;
    double metric_after;
};
struct GreedyRemovalResult {
    std::vector<GreedyStep> order;  // removal order with the metric after each removal
};
GreedyRemovalResult greedy_layer_removal(const Model& m, const std::vector<PairContext>& ctxs, MetricKind metric);

struct CrosstalkResult {
    std::vector<int> circuit;        // layers left unpatched, in selection order
    std::vector<GreedyStep> log;     // (layer unpatched, metric after)
    double final_metric = 0.0;
    double target = 0.0;
    bool reached = false;
};
// Starts with every layer's conv inputs resample-ablated at all positions and
// greedily unpatches the layer that helps the metric most until the target is
// reached. Ties go to the lowest layer index.
CrosstalkResult greedy_crosstalk_circuit(const Model& m, const std::vector<PairContext>& ctxs, MetricKind metric,
                                         double target);

// Conv-slice patch grid for one layer: rows = taps -(K-1)..0, cols = positions.
GridResult conv_slice_grid(const Model& m, const std::vector<PairContext>& ctxs, int layer, MetricKind metric);

}  // namespace ssmc
