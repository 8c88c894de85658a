#include "ssmc/graph.hpp"

#include <algorithm>
#include <json.hpp>
#include <set>
#include <sstream>
#include <stdexcept>

using nlohmann::json;

namespace ssmc {

std::string node_name(const NodeId& n) {
    switch (n.kind) {
        case NodeKind::embed: return "embed";
        case NodeKind::layer_input: return "layer_in." + std::to_string(n.layer);
        case NodeKind::skip: return "skip." + std::to_string(n.layer);
        case NodeKind::conv: return "conv." + std::to_string(n.layer);
        case NodeKind::ssm: return "ssm." + std::to_string(n.layer);
        case NodeKind::layer_output: return "layer_out." + std::to_string(n.layer);
        case NodeKind::output: return "output";
    }
    return "?";
}

static NodeId node_from_name(const std::string& s) {
    if (s == "embed") return {NodeKind::embed, -1};
    if (s == "output") return {NodeKind::output, -1};
    auto dot = s.rfind('.');
    if (dot == std::string::npos) throw std::runtime_error("bad node name '" + s + "'");
    const int layer = std::stoi(s.substr(dot + 1));
    const std::string kind = s.substr(0, dot);
    if (kind == "layer_in") return {NodeKind::layer_input, layer};
    if (kind == "skip") return {NodeKind::skip, layer};
    if (kind == "conv") return {NodeKind::conv, layer};
    if (kind == "ssm") return {NodeKind::ssm, layer};
    if (kind == "layer_out") return {NodeKind::layer_output, layer};
    throw std::runtime_error("bad node name '" + s + "'");
}

CausalGraph CausalGraph::residual_only(int n_layers) {
    if (n_layers < 1) throw std::invalid_argument("CausalGraph: need at least one layer");
    CausalGraph g;
    g.n_layers_ = n_layers;
    for (int j = 0; j < n_layers; ++j) {
        g.edges_.push_back({{NodeKind::embed, -1}, {NodeKind::layer_input, j}, EdgeKind::residual});
    }
    g.edges_.push_back({{NodeKind::embed, -1}, {NodeKind::output, -1}, EdgeKind::residual});
    for (int i = 0; i < n_layers; ++i) {
        for (int j = i + 1; j < n_layers; ++j) {
            g.edges_.push_back({{NodeKind::layer_output, i}, {NodeKind::layer_input, j}, EdgeKind::residual});
        }
        g.edges_.push_back({{NodeKind::layer_output, i}, {NodeKind::output, -1}, EdgeKind::residual});
    }
    g.check_dag();
    return g;
}

CausalGraph CausalGraph::with_intra(int n_layers, int conv_width) {
    CausalGraph g = residual_only(n_layers);
    g.has_intra_ = true;
    g.conv_width_ = conv_width;
    for (int i = 0; i < n_layers; ++i) {
        g.edges_.push_back({{NodeKind::layer_input, i}, {NodeKind::skip, i}, EdgeKind::intra});
        Edge skip_out{{NodeKind::skip, i}, {NodeKind::layer_output, i}, EdgeKind::intra};
        skip_out.always_on = true;
        g.edges_.push_back(skip_out);
        for (int tap = -(conv_width - 1); tap <= 0; ++tap) {
            Edge e{{NodeKind::layer_input, i}, {NodeKind::conv, i}, EdgeKind::intra};
            e.tap = tap;
            g.edges_.push_back(e);
        }
        g.edges_.push_back({{NodeKind::conv, i}, {NodeKind::ssm, i}, EdgeKind::intra});
        Edge ssm_out{{NodeKind::ssm, i}, {NodeKind::layer_output, i}, EdgeKind::intra};
        ssm_out.always_on = true;
        g.edges_.push_back(ssm_out);
    }
    g.check_dag();
    return g;
}

CausalGraph CausalGraph::positional_copy(int64_t seq_len) const {
    CausalGraph g = *this;
    g.edges_.clear();
    for (const Edge& e : edges_) {
        if (e.kind == EdgeKind::residual) {
            for (int64_t p = 0; p < seq_len; ++p) {
                Edge dup = e;
                dup.position = p;
                g.edges_.push_back(dup);
            }
        } else {
            g.edges_.push_back(e);  // intra edges stay non-positional
        }
    }
    return g;
}

std::vector<int> CausalGraph::patchable_edge_ids() const {
    std::vector<int> out;
    for (size_t i = 0; i < edges_.size(); ++i) {
        if (!edges_[i].always_on) out.push_back(static_cast<int>(i));
    }
    return out;
}

int CausalGraph::topo_rank(const NodeId& n) const {
    switch (n.kind) {
        case NodeKind::embed: return 0;
        case NodeKind::layer_input: return 5 * n.layer + 1;
        case NodeKind::skip: return 5 * n.layer + 2;
        case NodeKind::conv: return 5 * n.layer + 2;
        case NodeKind::ssm: return 5 * n.layer + 3;
        case NodeKind::layer_output: return 5 * n.layer + 4;
        case NodeKind::output: return 5 * n_layers_ + 1;
    }
    return -1;
}

void CausalGraph::check_dag() const {
    for (const Edge& e : edges_) {
        if (topo_rank(e.src) >= topo_rank(e.dst)) {
            throw std::logic_error("CausalGraph: edge " + node_name(e.src) + " -> " + node_name(e.dst) +
                                   " runs against the topological order");
        }
    }
}

std::vector<int> CausalGraph::sweep_order() const {
    std::vector<int> ids = patchable_edge_ids();
    std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) {
        const Edge& ea = edges_[static_cast<size_t>(a)];
        const Edge& eb = edges_[static_cast<size_t>(b)];
        const int ra = topo_rank(ea.dst), rb = topo_rank(eb.dst);
        if (ra != rb) return ra > rb;  // sinks first
        const double sa = std::abs(ea.score), sb = std::abs(eb.score);
        if (sa != sb) return sa > sb;
        return a < b;
    });
    return ids;
}

std::vector<bool> CausalGraph::on_path_mask() const {
    // adjacency over kept edges; node keys are topo ranks (collisions between
    // skip and conv are harmless: no edges connect them)
    auto key = [&](const NodeId& n) {
        return topo_rank(n) * 2 + (n.kind == NodeKind::conv ? 1 : 0);
    };
    const int max_key = (5 * n_layers_ + 1) * 2 + 2;
    std::vector<std::vector<int>> fwd(static_cast<size_t>(max_key)), bwd(static_cast<size_t>(max_key));
    std::vector<std::pair<int, int>> endpoints;
    for (const Edge& e : edges_) {
        const int s = key(e.src), d = key(e.dst);
        endpoints.emplace_back(s, d);
        if (e.patched) continue;
        fwd[static_cast<size_t>(s)].push_back(d);
        bwd[static_cast<size_t>(d)].push_back(s);
    }
    if (!has_intra_) {
        // a layer always computes: input flows to output inside the layer
        for (int i = 0; i < n_layers_; ++i) {
            const int s = key({NodeKind::layer_input, i}), d = key({NodeKind::layer_output, i});
            fwd[static_cast<size_t>(s)].push_back(d);
            bwd[static_cast<size_t>(d)].push_back(s);
        }
    }
    auto reach = [&](int start, const std::vector<std::vector<int>>& adj) {
        std::vector<bool> seen(static_cast<size_t>(max_key), false);
        std::vector<int> stack = {start};
        seen[static_cast<size_t>(start)] = true;
        while (!stack.empty()) {
            const int u = stack.back();
            stack.pop_back();
            for (int v : adj[static_cast<size_t>(u)]) {
                if (!seen[static_cast<size_t>(v)]) {
                    seen[static_cast<size_t>(v)] = true;
                    stack.push_back(v);
                }
            }
        }
        return seen;
    };
    const auto from_embed = reach(key({NodeKind::embed, -1}), fwd);
    const auto to_output = reach(key({NodeKind::output, -1}), bwd);
    std::vector<bool> mask(edges_.size(), false);
    for (size_t i = 0; i < edges_.size(); ++i) {
        if (edges_[i].patched) continue;
        mask[i] = from_embed[static_cast<size_t>(endpoints[i].first)] &&
                  to_output[static_cast<size_t>(endpoints[i].second)];
    }
    return mask;
}

int CausalGraph::prune_disconnected() {
    const auto mask = on_path_mask();
    int pruned = 0;
    for (size_t i = 0; i < edges_.size(); ++i) {
        if (!edges_[i].patched && !edges_[i].always_on && !mask[i]) {
            edges_[i].patched = true;
            ++pruned;
        }
    }
    return pruned;
}

PatchPlan CausalGraph::plan_for_patched() const {
    PatchPlan plan;
    std::set<std::pair<int, std::string>> overwrites;  // dedupe intra hooks
    for (const Edge& e : edges_) {
        if (!e.patched) continue;
        if (e.always_on) throw std::logic_error("CausalGraph: always-on edge marked patched");
        if (e.kind == EdgeKind::residual) {
            const int src = e.src.kind == NodeKind::embed ? -1 : e.src.layer;
            const int dst = e.dst.kind == NodeKind::output ? -2 : e.dst.layer;
            plan.add_edge(EdgePatch{src, dst, e.position, 1.0});
            continue;
        }
        const int layer = e.src.layer;
        if (e.dst.kind == NodeKind::skip) {
            if (overwrites.emplace(layer, "skip").second) plan.add(resample_at(hooks::skip(layer)));
        } else if (e.dst.kind == NodeKind::conv) {
            plan.add_conv_slice(ConvSlicePatch{layer, e.tap, PositionSel::everywhere()});
        } else if (e.dst.kind == NodeKind::ssm) {
            if (overwrites.emplace(layer, "ssm").second) plan.add(resample_at(hooks::ssm_input(layer)));
        } else {
            throw std::logic_error("CausalGraph: unexpected intra edge target");
        }
    }
    return plan;
}

std::string CausalGraph::edge_label(int id) const {
    const Edge& e = edges_[static_cast<size_t>(id)];
    std::string s = node_name(e.src) + " -> " + node_name(e.dst);
    if (e.kind == EdgeKind::intra && e.dst.kind == NodeKind::conv) s += " [tap " + std::to_string(e.tap) + "]";
    if (e.position) s += " @" + std::to_string(*e.position);
    return s;
}

std::string CausalGraph::to_dot() const {
    std::ostringstream os;
    os << "digraph circuit {\n  rankdir=TB;\n  node [shape=box, fontname=monospace];\n";
    std::set<std::string> nodes;
    for (const Edge& e : edges_) {
        if (e.patched) continue;
        nodes.insert(node_name(e.src));
        nodes.insert(node_name(e.dst));
    }
    for (const auto& n : nodes) os << "  \"" << n << "\";\n";
    for (const Edge& e : edges_) {
        if (e.patched) continue;
        os << "  \"" << node_name(e.src) << "\" -> \"" << node_name(e.dst) << "\"";
        std::string label;
        if (e.kind == EdgeKind::intra && e.dst.kind == NodeKind::conv) label += "tap " + std::to_string(e.tap);
        if (e.position) {
            if (!label.empty()) label += ", ";
            label += "pos " + std::to_string(*e.position);
        }
        if (e.score != 0.0) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%.3g", e.score);
            if (!label.empty()) label += ", ";
            label += buf;
        }
        if (!label.empty()) os << " [label=\"" << label << "\"]";
        if (e.always_on) os << " [style=dashed]";
        os << ";\n";
    }
    os << "}\n";
    return os.str();
}

std::string CausalGraph::to_json() const {
    json j;
    j["n_layers"] = n_layers_;
    j["conv_width"] = conv_width_;
    j["has_intra"] = has_intra_;
    json edges = json::array();
    for (const Edge& e : edges_) {
        json je;
        je["src"] = node_name(e.src);
        je["dst"] = node_name(e.dst);
        je["kind"] = e.kind == EdgeKind::residual ? "residual" : "intra";
        je["tap"] = e.tap;
        if (e.position) je["position"] = *e.position;
        je["always_on"] = e.always_on;
        je["patched"] = e.patched;
        je["score"] = e.score;
        edges.push_back(je);
    }
    j["edges"] = edges;
    return j.dump(2);
}

CausalGraph CausalGraph::from_json(const std::string& text) {
    json j = json::parse(text);
    CausalGraph g;
    g.n_layers_ = j.at("n_layers").get<int>();
    g.conv_width_ = j.value("conv_width", 0);
    g.has_intra_ = j.value("has_intra", false);
    for (const auto& je : j.at("edges")) {
        Edge e;
        e.src = node_from_name(je.at("src").get<std::string>());
        e.dst = node_from_name(je.at("dst").get<std::string>());
        e.kind = je.at("kind").get<std::string>() == "residual" ? EdgeKind::residual : EdgeKind::intra;
        e.tap = je.value("tap", 0);
        if (je.contains("position")) e.position = je.at("position").get<int64_t>();
        e.always_on = je.value("always_on", false);
        e.patched = je.value("patched", false);
        e.score = je.value("score", 0.0);
        g.edges_.push_back(e);
    }
    g.check_dag();
    return g;
}

}  // namespace ssmc
