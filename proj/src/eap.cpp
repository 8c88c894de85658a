#include "ssmc/eap.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

using nlohmann::json;

namespace ssmc {

namespace {

struct EdgeWiring {
    std::string grad_hook;   // node whose gradient the edge reads
    std::string delta_hook;  // cached activation whose corrupted-clean diff is the factor
    bool per_position;
};

EdgeWiring wiring(const Edge& e, int n_layers) {
    EdgeWiring w;
    if (e.kind == EdgeKind::residual) {
        w.grad_hook = e.dst.kind == NodeKind::output ? hooks::resid_post(n_layers - 1) : hooks::layer_input(e.dst.layer);
        w.delta_hook = e.src.kind == NodeKind::embed ? hooks::embed() : hooks::out_proj(e.src.layer);
        w.per_position = true;
        return w;
    }
    const int layer = e.src.layer;
    if (e.dst.kind == NodeKind::skip) {
        w.grad_hook = w.delta_hook = hooks::skip(layer);
    } else if (e.dst.kind == NodeKind::conv) {
        w.grad_hook = w.delta_hook = hooks::conv_slice(layer, e.tap);
    } else if (e.dst.kind == NodeKind::ssm) {
        w.grad_hook = w.delta_hook = hooks::ssm_input(layer);
    } else {
        throw std::logic_error("eap: always-on edges carry no attribution");
    }
    w.per_position = false;
    return w;
}

// alpha-partial patch of every patchable edge, the gradient-pass forward
PatchPlan alpha_patch_all(const CausalGraph& g, double alpha) {
    PatchPlan plan;
    if (alpha == 0.0) return plan;  // clean pass
    std::set<std::pair<int, std::string>> seen;
    for (int id : g.patchable_edge_ids()) {
        const Edge& e = g.edges()[static_cast<size_t>(id)];
        if (e.kind == EdgeKind::residual) {
            const int src = e.src.kind == NodeKind::embed ? -1 : e.src.layer;
            const int dst = e.dst.kind == NodeKind::output ? -2 : e.dst.layer;
            // cached-clean shifts: a live subtraction would cancel every
            // upstream output's gradient path in the everything-patched pass
            plan.add_edge(EdgePatch{src, dst, e.position, alpha, /*live_src=*/false});
        } else if (e.dst.kind == NodeKind::skip) {
            if (seen.emplace(e.src.layer, "skip").second) {
                Intervention iv = resample_at(hooks::skip(e.src.layer));
                iv.alpha = alpha;
                plan.add(iv);
            }
        } else if (e.dst.kind == NodeKind::conv) {
            plan.add_conv_slice(ConvSlicePatch{e.src.layer, e.tap, PositionSel::everywhere(), alpha});
        } else if (e.dst.kind == NodeKind::ssm) {
            if (seen.emplace(e.src.layer, "ssm").second) {
                Intervention iv = resample_at(hooks::ssm_input(e.src.layer));
                iv.alpha = alpha;
                plan.add(iv);
            }
        }
    }
    return plan;
}

Value metric_on_tape(MetricKind metric, Tape& tape, Value logits, const PairContext& ctx) {
    const int64_t out = ctx.pair.out_pos();
    const int64_t v = logits.val().dim(2);
    Value row = reshape(slice(logits, 1, out, out + 1), {v});
    switch (metric) {
        case MetricKind::nld: {
            const NldBaseline base = nld_baseline(ctx.clean_logits_row, ctx.corrupted_logits_row,
                                                  ctx.pair.answer_tok, ctx.pair.corrupted_answer_tok);
            return nld_on_tape(tape, row, ctx.pair.answer_tok, ctx.pair.corrupted_answer_tok, base.min_diff,
                               base.max_diff);
        }
        case MetricKind::logit_diff: {
            Value a = reshape(slice(row, 0, ctx.pair.answer_tok, ctx.pair.answer_tok + 1), {});
            Value b = reshape(slice(row, 0, ctx.pair.corrupted_answer_tok, ctx.pair.corrupted_answer_tok + 1), {});
            return sub(a, b);
        }
        default:
            throw std::invalid_argument("eap: metric '" + metric_name(metric) + "' is not differentiable here");
    }
}

}  // namespace

AttributionTable eap(const Model& m, const CausalGraph& g, const std::vector<PairContext>& ctxs,
                     const EapOptions& opt) {
    if (ctxs.empty()) throw std::invalid_argument("eap: empty context list");
    if (opt.iters < 1) throw std::invalid_argument("eap: iters must be >= 1");
    const int64_t L = ctxs.front().pair.seq_len();
    for (const auto& ctx : ctxs) {
        if (ctx.pair.seq_len() != L) {
            throw std::invalid_argument("eap: heterogeneous prompt lengths in one batch");
        }
    }
    const auto& edges = g.edges();
    const auto patchable = g.patchable_edge_ids();

    std::vector<double> alphas;
    if (opt.iters == 1) {
        alphas.push_back(opt.grad_pass == EapOptions::GradPass::fully_patched ? 1.0 : 0.0);
    } else {
        for (int k = 0; k < opt.iters; ++k) {
            alphas.push_back(static_cast<double>(k) / static_cast<double>(opt.iters - 1));
        }
    }

    AttributionTable table;
    table.metric = metric_name(opt.metric);
    table.iters = opt.iters;
    table.seq_len = L;
    table.scores.assign(edges.size(), 0.0);
    std::vector<std::vector<double>> pos_accum(edges.size());
    for (size_t i = 0; i < edges.size(); ++i) {
        const bool pp = edges[i].kind == EdgeKind::residual && !edges[i].position;
        pos_accum[i].assign(pp ? static_cast<size_t>(L) : 1, 0.0);
    }

    // per-example accumulators, reduced in index order for determinism
    std::vector<std::vector<std::vector<double>>> per_example(ctxs.size());

    parallel_for(static_cast<int64_t>(ctxs.size()), [&](int64_t ci) {
        const PairContext& ctx = ctxs[static_cast<size_t>(ci)];
        auto& acc = per_example[static_cast<size_t>(ci)];
        acc.resize(edges.size());
        for (size_t i = 0; i < edges.size(); ++i) acc[i].assign(pos_accum[i].size(), 0.0);

        for (double alpha : alphas) {
            PatchPlan plan = alpha_patch_all(g, alpha);
            HookRegistry reg = compile_plan(m, plan, ctx);
            Tape tape(true);
            auto fr = model_forward(tape, m, ctx.pair.clean_tokens, 1, ctx.pair.seq_len(), &reg);
            Value loss = metric_on_tape(opt.metric, tape, fr.logits, ctx);
            tape.backward(loss);

            std::map<std::string, Tensor> grads;
            for (int id : patchable) {
                const EdgeWiring w = wiring(edges[static_cast<size_t>(id)], g.n_layers());
                if (!grads.count(w.grad_hook)) {
                    Tensor gt = tape.grad(tape.named(w.grad_hook).id);
                    if (!gt.all_finite()) {
                        throw NumericError("eap: non-finite gradient at hook '" + w.grad_hook + "'");
                    }
                    grads.emplace(w.grad_hook, std::move(gt));
                }
            }
            for (int id : patchable) {
                const Edge& e = edges[static_cast<size_t>(id)];
                const EdgeWiring w = wiring(e, g.n_layers());
                const Tensor delta = t_sub(ctx.corrupted.at(w.delta_hook), ctx.clean.at(w.delta_hook));
                const Tensor& grad = grads.at(w.grad_hook);
                auto& slot = acc[static_cast<size_t>(id)];
                const double inv_iters = 1.0 / static_cast<double>(alphas.size());
                if (w.per_position) {
                    const int64_t inner = delta.numel() / L;
                    if (e.position) {
                        const int64_t p = *e.position;
                        double s = 0.0;
                        const double* dp = delta.data() + p * inner;
                        const double* gp = grad.data() + p * inner;
                        for (int64_t i = 0; i < inner; ++i) s += dp[i] * gp[i];
                        slot[0] += s * inv_iters;
                    } else {
                        for (int64_t p = 0; p < L; ++p) {
                            double s = 0.0;
                            const double* dp = delta.data() + p * inner;
                            const double* gp = grad.data() + p * inner;
                            for (int64_t i = 0; i < inner; ++i) s += dp[i] * gp[i];
                            slot[static_cast<size_t>(p)] += s * inv_iters;
                        }
                    }
                } else {
                    slot[0] += t_dot(delta, grad) * inv_iters;
                }
            }
        }
    });

    const double inv_n = 1.0 / static_cast<double>(ctxs.size());
    for (size_t ci = 0; ci < ctxs.size(); ++ci) {
        for (size_t i = 0; i < edges.size(); ++i) {
            for (size_t p = 0; p < pos_accum[i].size(); ++p) {
                pos_accum[i][p] += per_example[ci][i][p] * inv_n;
            }
        }
    }
    for (size_t i = 0; i < edges.size(); ++i) {
        double total = 0.0;
        for (double v : pos_accum[i]) total += v;
        table.scores[i] = total;  // positional entries sum to the edge score exactly
    }
    if (opt.positional) table.positional = std::move(pos_accum);
    return table;
}

AttributionTable eap_integrated_gradients(const Model& m, const CausalGraph& g, const std::vector<PairContext>& ctxs,
                                          int iters, EapOptions opt) {
    if (iters < 2) throw std::invalid_argument("eap_integrated_gradients: ITERS must be >= 2");
    opt.iters = iters;
    return eap(m, g, ctxs, opt);
}

AttributionTable positional_eap(const Model& m, const CausalGraph& g, const std::vector<PairContext>& ctxs,
                                EapOptions opt) {
    opt.positional = true;
    return eap(m, g, ctxs, opt);
}

void apply_scores(CausalGraph& g, const AttributionTable& table) {
    if (table.scores.size() != g.edges().size()) {
        throw std::invalid_argument("apply_scores: table does not match graph edge count");
    }
    for (size_t i = 0; i < table.scores.size(); ++i) g.edges()[i].score = table.scores[i];
}

std::string AttributionTable::to_json(const CausalGraph& g) const {
    json j;
    j["metric"] = metric;
    j["iters"] = iters;
    j["seq_len"] = seq_len;
    json edges = json::array();
    for (size_t i = 0; i < scores.size(); ++i) {
        json je;
        je["edge"] = g.edge_label(static_cast<int>(i));
        je["score"] = scores[i];
        if (!positional.empty() && positional[i].size() > 1) je["positions"] = positional[i];
        edges.push_back(je);
    }
    j["edges"] = edges;
    return j.dump(2);
}

std::string AttributionTable::to_csv_adjacency(const CausalGraph& g) const {
    // collect node names in topo order
    std::vector<std::string> names;
    std::map<std::string, size_t> index;
    auto add = [&](const NodeId& n) {
        const std::string name = node_name(n);
        if (!index.count(name)) {
            index[name] = names.size();
            names.push_back(name);
        }
    };
    add({NodeKind::embed, -1});
    for (int i = 0; i < g.n_layers(); ++i) {
        add({NodeKind::layer_input, i});
        if (g.has_intra()) {
            add({NodeKind::skip, i});
            add({NodeKind::conv, i});
            add({NodeKind::ssm, i});
        }
        add({NodeKind::layer_output, i});
    }
    add({NodeKind::output, -1});
    std::vector<std::vector<double>> cells(names.size(), std::vector<double>(names.size(), 0.0));
    for (size_t i = 0; i < scores.size(); ++i) {
        const Edge& e = g.edges()[i];
        cells[index.at(node_name(e.src))][index.at(node_name(e.dst))] += scores[i];
    }
    std::ostringstream os;
    os << "input_node";
    for (const auto& n : names) os << "," << n;
    os << "\n";
    for (size_t r = 0; r < names.size(); ++r) {
        os << names[r];
        for (size_t c = 0; c < names.size(); ++c) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%.10g", cells[r][c]);
            os << "," << buf;
        }
        os << "\n";
    }
    return os.str();
}

MinimalEdgeSetResult minimal_edge_set(const AttributionTable& table, const Model& m, CausalGraph& g,
                                      const std::vector<PairContext>& ctxs, MetricKind metric, double target,
                                      bool signed_ranking, uint64_t spot_seed) {
    if (table.scores.size() != g.edges().size()) {
        throw std::invalid_argument("minimal_edge_set: table does not match graph");
    }
    std::vector<int> order = g.patchable_edge_ids();
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        const double sa = signed_ranking ? table.scores[static_cast<size_t>(a)]
                                         : std::abs(table.scores[static_cast<size_t>(a)]);
        const double sb = signed_ranking ? table.scores[static_cast<size_t>(b)]
                                         : std::abs(table.scores[static_cast<size_t>(b)]);
        if (sa != sb) return sa > sb;
        return a < b;
    });
    const int n = static_cast<int>(order.size());

    auto eval = [&](int k) {
        for (int i = 0; i < n; ++i) {
            g.edges()[static_cast<size_t>(order[static_cast<size_t>(i)])].patched = i >= k;
        }
        return run_with_plan(m, ctxs, g.plan_for_patched(), metric).mean;
    };

    const double full = eval(n);
    if (full < target) {
        throw std::runtime_error("minimal_edge_set: target " + std::to_string(target) +
                                 " unreachable; metric with all edges kept is " + std::to_string(full));
    }

    // binary search assumes eval(k) is approximately nondecreasing in k; spot
    // check at random interior points and fall back to a linear scan otherwise
    MinimalEdgeSetResult res;
    constexpr double kMonotoneSlack = 0.05;
    std::mt19937_64 rng(spot_seed);
    std::vector<int> spots = {0, n};
    for (int i = 0; i < 5 && n > 2; ++i) {
        spots.push_back(static_cast<int>(rng() % static_cast<uint64_t>(n)));
    }
    std::sort(spots.begin(), spots.end());
    bool monotone = true;
    double prev = -1e300;
    for (int k : spots) {
        const double v = eval(k);
        if (v + kMonotoneSlack < prev) monotone = false;
        prev = std::max(prev, v);
    }

    int k = n;
    if (monotone) {
        int lo = 0, hi = n;  // eval(hi) >= target
        if (eval(0) >= target) {
            k = 0;
        } else {
            while (hi - lo > 1) {
                const int mid = (lo + hi) / 2;
                if (eval(mid) >= target) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            k = hi;
        }
    } else {
        res.used_linear_scan = true;
        for (int cand = 0; cand <= n; ++cand) {
            if (eval(cand) >= target) {
                k = cand;
                break;
            }
        }
    }
    res.k = k;

    eval(k);  // leave the graph in the top-k state
    g.prune_disconnected();
    for (int id : g.patchable_edge_ids()) {
        if (!g.edges()[static_cast<size_t>(id)].patched) res.kept.push_back(id);
    }
    res.achieved = run_with_plan(m, ctxs, g.plan_for_patched(), metric).mean;
    return res;
}

}  // namespace ssmc
