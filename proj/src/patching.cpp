#include "ssmc/patching.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>
#include <thread>

namespace ssmc {

int& global_threads() {
    static int threads = 1;
    return threads;
}

void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
    const int threads = std::max(1, global_threads());
    if (threads == 1 || n <= 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    const int use = static_cast<int>(std::min<int64_t>(threads, n));
    std::vector<std::exception_ptr> errs(static_cast<size_t>(use));
    for (int w = 0; w < use; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (int64_t i = w; i < n; i += use) fn(i);
            } catch (...) {
                errs[static_cast<size_t>(w)] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errs) {
        if (e) std::rethrow_exception(e);
    }
}

// ---------------------------------------------------------------------------
// position selectors
// ---------------------------------------------------------------------------

PositionSel PositionSel::everywhere() { return PositionSel{}; }

PositionSel PositionSel::at(std::vector<int64_t> idx) {
    PositionSel s;
    s.all = false;
    s.indices = std::move(idx);
    return s;
}

PositionSel PositionSel::at_labels(std::vector<std::string> lbls) {
    PositionSel s;
    s.all = false;
    s.labels = std::move(lbls);
    return s;
}

std::vector<int64_t> PositionSel::resolve(const PromptPair& pair) const {
    std::vector<int64_t> out;
    if (all) {
        for (int64_t p = 0; p < pair.seq_len(); ++p) out.push_back(p);
        return out;
    }
    out = indices;
    for (const auto& lbl : labels) out.push_back(pair.pos(lbl));
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    for (int64_t p : out) {
        if (p < 0 || p >= pair.seq_len()) {
            throw std::invalid_argument("PositionSel: position " + std::to_string(p) + " out of range for length " +
                                        std::to_string(pair.seq_len()));
        }
    }
    return out;
}

PatchPlan& PatchPlan::add(Intervention iv) {
    iv.hook = hooks::canonical(iv.hook);
    interventions.push_back(std::move(iv));
    return *this;
}

PatchPlan& PatchPlan::add_edge(EdgePatch e) {
    edges.push_back(e);
    return *this;
}

PatchPlan& PatchPlan::add_conv_slice(ConvSlicePatch c) {
    conv_slices.push_back(c);
    return *this;
}

PatchPlan patch_edge(int src, int dst, std::optional<int64_t> position) {
    PatchPlan plan;
    plan.add_edge(EdgePatch{src, dst, position, 1.0});
    return plan;
}

Intervention patch_hidden_state(int layer, int64_t position) {
    Intervention iv;
    iv.hook = hooks::h(layer, position);
    iv.mode = PatchMode::resample;
    iv.positions = PositionSel::everywhere();
    return iv;
}

Intervention remove_layer(int layer) {
    Intervention iv;
    iv.hook = hooks::out_proj(layer);
    iv.mode = PatchMode::zero;
    iv.positions = PositionSel::everywhere();
    return iv;
}

Intervention resample_at(const std::string& hook, PositionSel positions) {
    Intervention iv;
    iv.hook = hook;
    iv.mode = PatchMode::resample;
    iv.positions = std::move(positions);
    return iv;
}

// ---------------------------------------------------------------------------
// pair contexts
// ---------------------------------------------------------------------------

MetricInput PairContext::metric_input(Tensor patched_row) const {
    MetricInput in;
    in.unpatched = clean_logits_row;
    in.corrupted = corrupted_logits_row;
    in.patched = std::move(patched_row);
    in.answer_tok = pair.answer_tok;
    in.corrupted_answer_tok = pair.corrupted_answer_tok;
    in.candidates = candidates;
    return in;
}

static Tensor logits_row_at(const Tensor& logits, int64_t pos) {
    const int64_t v = logits.dim(2);
    Tensor row({v});
    for (int64_t i = 0; i < v; ++i) row[i] = logits.at({0, pos, i});
    return row;
}

PairContext make_context(const Model& m, const PromptPair& pair) {
    PairContext ctx;
    ctx.pair = pair;
    {
        Tape tape(false);
        ctx.clean.provenance = "clean";
        auto r = model_forward(tape, m, pair.clean_tokens, 1, pair.seq_len(), nullptr, &ctx.clean);
        ctx.clean_logits_row = logits_row_at(r.logits.val(), pair.out_pos());
    }
    {
        Tape tape(false);
        ctx.corrupted.provenance = "corrupted";
        auto r = model_forward(tape, m, pair.corrupted_tokens, 1, pair.seq_len(), nullptr, &ctx.corrupted);
        ctx.corrupted_logits_row = logits_row_at(r.logits.val(), pair.out_pos());
    }
    std::set<int64_t> cand(pair.clean_name_toks.begin(), pair.clean_name_toks.end());
    cand.insert(pair.corr_name_toks.begin(), pair.corr_name_toks.end());
    ctx.candidates.assign(cand.begin(), cand.end());
    return ctx;
}

std::vector<PairContext> make_contexts(const Model& m, const std::vector<PromptPair>& pairs) {
    std::vector<PairContext> out(pairs.size());
    parallel_for(static_cast<int64_t>(pairs.size()),
                 [&](int64_t i) { out[static_cast<size_t>(i)] = make_context(m, pairs[static_cast<size_t>(i)]); });
    return out;
}

MeanStore build_mean_store(const Model& m, const std::vector<PromptPair>& pairs,
                           const std::vector<std::string>& hook_names) {
    if (pairs.empty()) throw std::invalid_argument("build_mean_store: empty dataset");
    MeanStore store;
    for (size_t i = 0; i < pairs.size(); ++i) {
        ActivationCache cache = run_and_cache(m, pairs[i].clean_tokens, "clean");
        for (const auto& name : hook_names) {
            const Tensor& act = cache.at(name);
            auto it = store.means.find(hooks::canonical(name));
            if (it == store.means.end()) {
                store.means.emplace(hooks::canonical(name), act);
            } else {
                t_add_inplace(it->second, act);
            }
        }
    }
    for (auto& [k, v] : store.means) v = t_scale(v, 1.0 / static_cast<double>(pairs.size()));
    return store;
}

// ---------------------------------------------------------------------------
// plan compilation
// ---------------------------------------------------------------------------

namespace {

// Everything a hook callback needs, precomputed against one pair.
struct HookEdits {
    bool has_overwrite = false;
    bool overwrite_everywhere = false;
    Tensor overwrite_full;             // full replacement when everywhere
    Tensor inv_mask, masked_repl;      // masked overwrite otherwise
    std::vector<Tensor> adds;          // additive constants (subtract_add)
    std::vector<EdgePatch> edges;      // residual edge adjustments
    std::vector<int64_t> claimed;      // positions claimed by overwrites
};

Tensor position_mask(const Shape& act_shape, const std::vector<int64_t>& positions, bool invert) {
    Tensor mask = Tensor::full(act_shape, invert ? 1.0 : 0.0);
    const int64_t L = act_shape.at(1);
    int64_t inner = 1;
    for (size_t i = 2; i < act_shape.size(); ++i) inner *= act_shape[i];
    const int64_t outer = act_shape.at(0);
    for (int64_t b = 0; b < outer; ++b) {
        for (int64_t p : positions) {
            double* row = mask.data() + (b * L + p) * inner;
            for (int64_t i = 0; i < inner; ++i) row[i] = invert ? 0.0 : 1.0;
        }
    }
    return mask;
}

void claim_positions(HookEdits& e, const std::string& hook, const std::vector<int64_t>& positions) {
    for (int64_t p : positions) {
        if (std::find(e.claimed.begin(), e.claimed.end(), p) != e.claimed.end()) {
            throw std::invalid_argument("PatchPlan: conflicting interventions at hook '" + hook + "' position " +
                                        std::to_string(p));
        }
        e.claimed.push_back(p);
    }
}

// shift x ([B,L,E]) right by |tap| with zero fill, matching the conv taps
Tensor shifted_input(const Tensor& x, int tap) {
    const int64_t B = x.dim(0), L = x.dim(1), E = x.dim(2);
    Tensor out({B, L, E});
    const int64_t s = -tap;
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t t = s; t < L; ++t) {
            for (int64_t e = 0; e < E; ++e) out.at({b, t, e}) = x.at({b, t - s, e});
        }
    }
    return out;
}

}  // namespace

HookRegistry compile_plan(const Model& m, const PatchPlan& plan, const PairContext& ctx, const MeanStore* means) {
    const ModelConfig& cfg = m.cfg;
    const int64_t L = ctx.pair.seq_len();
    std::set<std::string> known;
    for (const auto& n : hooks::canonical_names(cfg, L)) known.insert(n);
    for (int l = 0; l < cfg.n_layers; ++l) {
        for (int tap = -static_cast<int>(cfg.conv_width - 1); tap <= 0; ++tap) known.insert(hooks::conv_slice(l, tap));
    }

    std::map<std::string, HookEdits> edits;

    for (const Intervention& iv : plan.interventions) {
        const std::string hook = hooks::canonical(iv.hook);
        if (!known.count(hook)) throw std::invalid_argument("PatchPlan: unknown hook '" + iv.hook + "'");
        const Tensor& ref = ctx.clean.at(hook);
        HookEdits& e = edits[hook];
        const bool is_h_hook = hook.find("hook_h.") != std::string::npos;
        std::vector<int64_t> positions;
        if (is_h_hook) {
            if (!iv.positions.all) {
                throw std::invalid_argument("PatchPlan: hook_h interventions select the position via the hook name");
            }
            positions = {0};  // whole tensor; the hook already names one position
        } else {
            positions = iv.positions.resolve(ctx.pair);
        }

        if (iv.mode == PatchMode::subtract_add) {
            // delta vector applied at every selected position; composes additively
            Shape trailing(ref.shape().begin() + 2, ref.shape().end());
            if (iv.sub_value.shape() != trailing || iv.add_value.shape() != trailing) {
                throw std::invalid_argument("PatchPlan: subtract_add payload shape mismatch at hook '" + hook + "'");
            }
            Tensor delta = Tensor::zeros(ref.shape());
            int64_t inner = iv.sub_value.numel();
            for (int64_t b = 0; b < ref.dim(0); ++b) {
                for (int64_t p : positions) {
                    double* row = delta.data() + (b * L + p) * inner;
                    for (int64_t i = 0; i < inner; ++i) row[i] += iv.add_value[i] - iv.sub_value[i];
                }
            }
            e.adds.push_back(std::move(delta));
            continue;
        }

        claim_positions(e, hook, positions);
        if (e.has_overwrite) {
            throw std::invalid_argument("PatchPlan: multiple overwrite interventions at hook '" + hook + "'");
        }
        Tensor repl;
        switch (iv.mode) {
            case PatchMode::resample: repl = ctx.corrupted.at(hook); break;
            case PatchMode::zero: repl = Tensor::zeros(ref.shape()); break;
            case PatchMode::mean:
                if (!means) throw std::invalid_argument("PatchPlan: mean ablation requires a MeanStore");
                repl = means->means.at(hook);
                break;
            case PatchMode::replace_with: repl = iv.value; break;
            default: throw std::logic_error("unreachable");
        }
        if (repl.shape() != ref.shape()) {
            throw ShapeError("PatchPlan: replacement for hook '" + hook + "' has shape " + shape_str(repl.shape()) +
                             ", live activation is " + shape_str(ref.shape()));
        }
        e.has_overwrite = true;
        if ((is_h_hook || iv.positions.all) && iv.alpha == 1.0) {
            e.overwrite_everywhere = true;
            e.overwrite_full = std::move(repl);
        } else {
            Tensor mask = (is_h_hook || iv.positions.all) ? Tensor::full(ref.shape(), 1.0)
                                                          : position_mask(ref.shape(), positions, /*invert=*/false);
            // partial strength: v' = v .* (1 - alpha*mask) + alpha * repl .* mask
            Tensor inv = Tensor::full(ref.shape(), 1.0);
            t_axpy_inplace(inv, -iv.alpha, mask);
            e.inv_mask = std::move(inv);
            e.masked_repl = t_scale(t_mul(repl, mask), iv.alpha);
        }
    }

    for (const ConvSlicePatch& cp : plan.conv_slices) {
        if (cp.layer < 0 || cp.layer >= cfg.n_layers) {
            throw std::invalid_argument("PatchPlan: conv slice layer out of range");
        }
        if (cp.tap > 0 || cp.tap <= -static_cast<int>(cfg.conv_width)) {
            throw std::invalid_argument("PatchPlan: conv slice tap " + std::to_string(cp.tap) +
                                        " outside [-(K-1),0] for K=" + std::to_string(cfg.conv_width));
        }
        const std::string hook = hooks::conv_slice(cp.layer, cp.tap);
        const auto positions = cp.positions.resolve(ctx.pair);
        HookEdits& e = edits[hook];
        claim_positions(e, hook, positions);
        if (e.has_overwrite) {
            throw std::invalid_argument("PatchPlan: multiple conv slice patches at hook '" + hook + "'");
        }
        Tensor repl = shifted_input(ctx.corrupted.at(hooks::in_proj(cp.layer)), cp.tap);
        e.has_overwrite = true;
        if (cp.positions.all && cp.alpha == 1.0) {
            e.overwrite_everywhere = true;
            e.overwrite_full = std::move(repl);
        } else {
            const Shape& shape = repl.shape();
            Tensor mask = cp.positions.all ? Tensor::full(shape, 1.0) : position_mask(shape, positions, false);
            Tensor inv = Tensor::full(shape, 1.0);
            t_axpy_inplace(inv, -cp.alpha, mask);
            e.inv_mask = std::move(inv);
            e.masked_repl = t_scale(t_mul(repl, mask), cp.alpha);
        }
    }

    for (const EdgePatch& ep : plan.edges) {
        const int last = cfg.n_layers - 1;
        if (ep.src < -1 || ep.src > last) throw std::invalid_argument("PatchPlan: edge src out of range");
        const bool to_output = ep.dst == -2;
        if (!to_output && (ep.dst < 0 || ep.dst > last)) {
            throw std::invalid_argument("PatchPlan: edge dst out of range");
        }
        if (!to_output && ep.src >= ep.dst) {
            throw std::invalid_argument("PatchPlan: edge must run from an earlier node, got src " +
                                        std::to_string(ep.src) + " >= dst " + std::to_string(ep.dst));
        }
        if (ep.position && (*ep.position < 0 || *ep.position >= L)) {
            throw std::invalid_argument("PatchPlan: edge position out of range");
        }
        const std::string dst_hook = to_output ? hooks::resid_post(last) : hooks::layer_input(ep.dst);
        HookEdits& e = edits[dst_hook];
        if (e.has_overwrite) {
            throw std::invalid_argument("PatchPlan: edge patches cannot combine with an overwrite at hook '" +
                                        dst_hook + "'");
        }
        e.edges.push_back(ep);
    }

    HookRegistry reg;
    for (auto& [hook, e] : edits) {
        HookEdits edit = std::move(e);
        const PairContext* ctxp = &ctx;
        reg.set(hook, [edit, ctxp](ForwardPassState& ps, const std::string&, Value cur) {
            Value v = cur;
            if (edit.has_overwrite) {
                if (edit.overwrite_everywhere) {
                    v = ps.tape.constant(edit.overwrite_full);
                } else {
                    v = add(mul(v, ps.tape.constant(edit.inv_mask)), ps.tape.constant(edit.masked_repl));
                }
            }
            for (const Tensor& t : edit.adds) v = add(v, ps.tape.constant(t));
            for (const EdgePatch& ep : edit.edges) {
                const std::string src_hook = ep.src == -1 ? hooks::embed() : hooks::out_proj(ep.src);
                Value diff;
                if (ep.live_src) {
                    diff = sub(ps.tape.constant(ctxp->corrupted.at(src_hook)), ps.live_at(src_hook));
                } else {
                    diff = ps.tape.constant(
                        t_sub(ctxp->corrupted.at(src_hook), ctxp->clean.at(src_hook)));
                }
                if (ep.position) {
                    diff = mul(diff, ps.tape.constant(position_mask(diff.val().shape(), {*ep.position}, false)));
                }
                if (ep.alpha != 1.0) diff = mul_scalar(diff, ep.alpha);
                v = add(v, diff);
            }
            return v;
        });
    }
    return reg;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

double run_with_plan_single(const Model& m, const PairContext& ctx, const PatchPlan& plan, MetricKind metric,
                            const MeanStore* means, ActivationCache* capture, Tensor* logits_row) {
    HookRegistry reg = compile_plan(m, plan, ctx, means);
    Tape tape(false);
    auto r = model_forward(tape, m, ctx.pair.clean_tokens, 1, ctx.pair.seq_len(), &reg, capture);
    Tensor row = logits_row_at(r.logits.val(), ctx.pair.out_pos());
    if (logits_row) *logits_row = row;
    return eval_metric(metric, ctx.metric_input(std::move(row)));
}

RunOutput run_with_plan(const Model& m, const std::vector<PairContext>& ctxs, const PatchPlan& plan, MetricKind metric,
                        const MeanStore* means) {
    if (ctxs.empty()) throw std::invalid_argument("run_with_plan: empty context list");
    RunOutput out;
    out.per_example.resize(ctxs.size());
    parallel_for(static_cast<int64_t>(ctxs.size()), [&](int64_t i) {
        out.per_example[static_cast<size_t>(i)] =
            run_with_plan_single(m, ctxs[static_cast<size_t>(i)], plan, metric, means);
    });
    double s = 0.0;
    for (double v : out.per_example) s += v;
    out.mean = s / static_cast<double>(out.per_example.size());
    return out;
}

// ---------------------------------------------------------------------------
// layer-level experiments
// ---------------------------------------------------------------------------

namespace {

// Shared-position datasets only: (layer, position) grids need every prompt to
// put its labels at the same token indices.
void require_shared_positions(const std::vector<PairContext>& ctxs) {
    for (const auto& ctx : ctxs) {
        if (ctx.pair.positions != ctxs.front().pair.positions) {
            throw std::invalid_argument("grid experiments need prompts with identical token positions; restrict to "
                                        "the shared-position templates");
        }
    }
}

std::vector<std::string> position_labels_of(const PromptPair& pair) {
    std::vector<std::string> labels(static_cast<size_t>(pair.seq_len()));
    for (const auto& [lbl, p] : pair.positions) labels[static_cast<size_t>(p)] = lbl;
    return labels;
}

}  // namespace

GridResult ablation_grid(const Model& m, const std::vector<PairContext>& ctxs, const std::string& hook_family,
                         MetricKind metric) {
    require_shared_positions(ctxs);
    const int64_t L = ctxs.front().pair.seq_len();
    GridResult grid;
    grid.position_labels = position_labels_of(ctxs.front().pair);
    for (int layer = 0; layer < m.cfg.n_layers; ++layer) {
        std::vector<double> row(static_cast<size_t>(L));
        for (int64_t p = 0; p < L; ++p) {
            PatchPlan plan;
            if (hook_family == "layer_input") {
                plan.add(resample_at(hooks::layer_input(layer), PositionSel::at({p})));
            } else if (hook_family == "out_proj") {
                plan.add(resample_at(hooks::out_proj(layer), PositionSel::at({p})));
            } else if (hook_family == "h") {
                plan.add(patch_hidden_state(layer, p));
            } else {
                throw std::invalid_argument("ablation_grid: unknown hook family '" + hook_family + "'");
            }
            row[static_cast<size_t>(p)] = run_with_plan(m, ctxs, plan, metric).mean;
        }
        grid.values.push_back(std::move(row));
    }
    return grid;
}

std::vector<double> layer_removal_curve(const Model& m, const std::vector<PairContext>& ctxs, MetricKind metric) {
    std::vector<double> out(static_cast<size_t>(m.cfg.n_layers));
    for (int layer = 0; layer < m.cfg.n_layers; ++layer) {
        PatchPlan plan;
        plan.add(remove_layer(layer));
        out[static_cast<size_t>(layer)] = run_with_plan(m, ctxs, plan, metric).mean;
    }
    return out;
}

GreedyRemovalResult greedy_layer_removal(const Model& m, const std::vector<PairContext>& ctxs, MetricKind metric) {
    GreedyRemovalResult res;
    std::set<int> removed;
    while (static_cast<int>(removed.size()) < m.cfg.n_layers) {
        int best_layer = -1;
        double best_metric = 0.0;
        for (int cand = 0; cand < m.cfg.n_layers; ++cand) {
            if (removed.count(cand)) continue;
            PatchPlan plan;
            for (int l : removed) plan.add(remove_layer(l));
            plan.add(remove_layer(cand));
            const double v = run_with_plan(m, ctxs, plan, metric).mean;
            if (best_layer == -1 || v > best_metric) {  // ties: lowest index wins
                best_layer = cand;
                best_metric = v;
            }
        }
        removed.insert(best_layer);
        res.order.push_back({best_layer, best_metric});
    }
    return res;
}

CrosstalkResult greedy_crosstalk_circuit(const Model& m, const std::vector<PairContext>& ctxs, MetricKind metric,
                                         double target) {
    CrosstalkResult res;
    res.target = target;
    std::set<int> patched;
    for (int l = 0; l < m.cfg.n_layers; ++l) patched.insert(l);
    auto eval = [&]() {
        PatchPlan plan;
        for (int l : patched) plan.add(resample_at(hooks::in_proj(l)));
        if (plan.interventions.empty()) {
            return run_with_plan(m, ctxs, PatchPlan{}, metric).mean;
        }
        return run_with_plan(m, ctxs, plan, metric).mean;
    };
    res.final_metric = eval();
    while (res.final_metric < target && !patched.empty()) {
        int best_layer = -1;
        double best_metric = 0.0;
        for (int cand : patched) {
            std::set<int> trial = patched;
            trial.erase(cand);
            PatchPlan plan;
            for (int l : trial) plan.add(resample_at(hooks::in_proj(l)));
            const double v = plan.interventions.empty() ? run_with_plan(m, ctxs, PatchPlan{}, metric).mean
                                                        : run_with_plan(m, ctxs, plan, metric).mean;
            if (best_layer == -1 || v > best_metric) {
                best_layer = cand;
                best_metric = v;
            }
        }
        patched.erase(best_layer);
        res.circuit.push_back(best_layer);
        res.log.push_back({best_layer, best_metric});
        res.final_metric = best_metric;
    }
    res.reached = res.final_metric >= target;
    return res;
}

GridResult conv_slice_grid(const Model& m, const std::vector<PairContext>& ctxs, int layer, MetricKind metric) {
    require_shared_positions(ctxs);
    const int64_t L = ctxs.front().pair.seq_len();
    GridResult grid;
    grid.position_labels = position_labels_of(ctxs.front().pair);
    for (int tap = -static_cast<int>(m.cfg.conv_width - 1); tap <= 0; ++tap) {
        std::vector<double> row(static_cast<size_t>(L));
        for (int64_t p = 0; p < L; ++p) {
            PatchPlan plan;
            plan.add_conv_slice(ConvSlicePatch{layer, tap, PositionSel::at({p})});
            row[static_cast<size_t>(p)] = run_with_plan(m, ctxs, plan, metric).mean;
        }
        grid.values.push_back(std::move(row));
    }
    return grid;
}

}  // namespace ssmc
