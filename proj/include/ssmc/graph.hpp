#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ssmc/patching.hpp"

namespace ssmc {

enum class NodeKind { embed, layer_input, skip, conv, ssm, layer_output, output };

struct NodeId {
    NodeKind kind = NodeKind::embed;
    int layer = -1;

    bool operator==(const NodeId&) const = default;
};

std::string node_name(const NodeId& n);

enum class EdgeKind { residual, intra };

struct Edge {
    NodeId src, dst;
    EdgeKind kind = EdgeKind::residual;
    int tap = 0;                      // layer_input -> conv edges carry the filter tap
    std::optional<int64_t> position;  // positional residual edges
    bool always_on = false;           // skip -> layer_output, ssm -> layer_output
    bool patched = false;             // patched == removed from the circuit
    double score = 0.0;               // attribution
};

// Causal graph over hook points. Residual edges run from embed / layer outputs
// to later layer inputs and the output node (the residual stream after the
// final layer). Intra-layer edges mirror the in->skip->out and
// in->conv(tap)->ssm->out flow inside a layer.
class CausalGraph {
public:
    static CausalGraph residual_only(int n_layers);
    static CausalGraph with_intra(int n_layers, int conv_width);
    // Duplicates residual edges per token position; intra edges stay
    // non-positional.
    CausalGraph positional_copy(int64_t seq_len) const;

    int n_layers() const { return n_layers_; }
    bool has_intra() const { return has_intra_; }
    std::vector<Edge>& edges() { return edges_; }
    const std::vector<Edge>& edges() const { return edges_; }
    std::vector<int> patchable_edge_ids() const;  // everything not always-on

    int topo_rank(const NodeId& n) const;
    void check_dag() const;  // every edge must run forward in topo rank

    // Sink-to-source visit order: deeper dst first, then |score| descending,
    // then edge id for determinism.
    std::vector<int> sweep_order() const;

    // Edges lying on some embed -> output path through kept edges. For graphs
    // without intra edges the in_i -> out_i flow inside a layer is implicit.
    std::vector<bool> on_path_mask() const;
    // Marks disconnected patchable edges as patched; returns how many.
    int prune_disconnected();

    // Compiles the patched edges into interventions for one evaluation pass.
    PatchPlan plan_for_patched() const;

    std::string edge_label(int id) const;
    std::string to_dot() const;  // kept edges only; positions as edge labels
    std::string to_json() const;
    static CausalGraph from_json(const std::string& text);

private:
    int n_layers_ = 0;
    int conv_width_ = 0;
    bool has_intra_ = false;
    std::vector<Edge> edges_;
};

}  // namespace ssmc
