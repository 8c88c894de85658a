#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "ssmc/patching.hpp"

using namespace ssmc;

namespace {

struct Fixture {
    ModelConfig cfg;
    Model model;
    Tokenizer tok;
    Lexicon lex;
    std::vector<PromptPair> pairs;
    std::vector<PairContext> ctxs;

    explicit Fixture(int n_layers = 3, int count = 6, uint64_t seed = 40)
        : cfg(), model(Model::random(make_cfg(n_layers), seed)), tok(default_tokenizer(Lexicon::defaults())),
          lex(Lexicon::defaults()) {
        cfg = model.cfg;
        GenOptions opt;
        opt.templates = shared_position_templates();
        opt.count = count;
        opt.seed = seed + 1;
        pairs = generate_batch(tok, lex, opt);
        ctxs = make_contexts(model, pairs);
    }

    static ModelConfig make_cfg(int n_layers) {
        ModelConfig cfg;
        cfg.n_layers = n_layers;
        cfg.d_model = 8;
        cfg.d_inner = 12;
        cfg.state_size = 2;
        cfg.conv_width = 4;
        cfg.vocab_size = 64;
        return cfg;
    }
};

Tensor patched_logits(const Fixture& f, const PairContext& ctx, const PatchPlan& plan) {
    HookRegistry reg = compile_plan(f.model, plan, ctx);
    Tape tape(false);
    return model_forward(tape, f.model, ctx.pair.clean_tokens, 1, ctx.pair.seq_len(), &reg).logits.val();
}

Tensor clean_logits(const Fixture& f, const PairContext& ctx) { return patched_logits(f, ctx, PatchPlan{}); }

}  // namespace

TEST_CASE("empty plan reproduces the unpatched metric exactly") {
    Fixture f;
    RunOutput out = run_with_plan(f.model, f.ctxs, PatchPlan{}, MetricKind::nld);
    for (size_t i = 0; i < out.per_example.size(); ++i) {
        // the abs in the denominator flips the unpatched endpoint to -1 on
        // examples where the model is already wrong (max_diff < min_diff)
        const auto& ctx = f.ctxs[i];
        const NldBaseline base = nld_baseline(ctx.clean_logits_row, ctx.corrupted_logits_row, ctx.pair.answer_tok,
                                              ctx.pair.corrupted_answer_tok);
        const double want = base.max_diff >= base.min_diff ? 1.0 : -1.0;
        CHECK(out.per_example[i] == want);
    }
    RunOutput ld = run_with_plan(f.model, f.ctxs, PatchPlan{}, MetricKind::logit_diff);
    for (size_t i = 0; i < ld.per_example.size(); ++i) {
        const auto& ctx = f.ctxs[i];
        CHECK(ld.per_example[i] ==
              ctx.clean_logits_row[ctx.pair.answer_tok] - ctx.clean_logits_row[ctx.pair.corrupted_answer_tok]);
    }
}

TEST_CASE("resampling every canonical hook reproduces the corrupted logits") {
    Fixture f(2, 3);
    for (const auto& ctx : f.ctxs) {
        PatchPlan plan;
        for (const auto& name : hooks::canonical_names(f.cfg, ctx.pair.seq_len())) {
            plan.add(resample_at(name));
        }
        Tensor row;
        run_with_plan_single(f.model, ctx, plan, MetricKind::nld, nullptr, nullptr, &row);
        CHECK(t_max_abs_diff(row, ctx.corrupted_logits_row) < 1e-12);
    }
}

TEST_CASE("per-edge deltas into a node sum to the wholesale resample delta") {
    Fixture f(3, 2);
    for (const auto& ctx : f.ctxs) {
        const int j = 2;
        Tensor sum = t_sub(ctx.corrupted.at(hooks::embed()), ctx.clean.at(hooks::embed()));
        for (int i = 0; i < j; ++i) {
            t_add_inplace(sum, t_sub(ctx.corrupted.at(hooks::out_proj(i)), ctx.clean.at(hooks::out_proj(i))));
        }
        Tensor wholesale = t_sub(ctx.corrupted.at(hooks::layer_input(j)), ctx.clean.at(hooks::layer_input(j)));
        CHECK(t_max_abs_diff(sum, wholesale) < 1e-10);
    }
}

TEST_CASE("patching all edges into j equals resampling j's entire input") {
    Fixture f(3, 3);
    const int j = 2;
    for (const auto& ctx : f.ctxs) {
        PatchPlan all_edges;
        all_edges.add_edge(EdgePatch{-1, j, std::nullopt, 1.0});
        for (int i = 0; i < j; ++i) all_edges.add_edge(EdgePatch{i, j, std::nullopt, 1.0});
        PatchPlan wholesale;
        wholesale.add(resample_at(hooks::layer_input(j)));
        Tensor a = patched_logits(f, ctx, all_edges);
        Tensor b = patched_logits(f, ctx, wholesale);
        CHECK(t_max_abs_diff(a, b) < 1e-10);
    }
}

TEST_CASE("clean-sourced patches are numeric no-ops") {
    Fixture f(2, 2);
    for (const auto& ctx : f.ctxs) {
        Tensor base = clean_logits(f, ctx);
        // replace-with the clean value
        PatchPlan plan;
        Intervention iv;
        iv.hook = hooks::ssm_input(1);
        iv.mode = PatchMode::replace_with;
        iv.value = ctx.clean.at(hooks::ssm_input(1));
        plan.add(iv);
        CHECK(t_max_abs_diff(patched_logits(f, ctx, plan), base) == 0.0);
        // edge patch whose corrupted cache equals the clean cache
        PairContext same = ctx;
        same.corrupted = ctx.clean;
        PatchPlan edge = patch_edge(0, 1);
        HookRegistry reg = compile_plan(f.model, edge, same);
        Tape tape(false);
        Tensor out = model_forward(tape, f.model, ctx.pair.clean_tokens, 1, ctx.pair.seq_len(), &reg).logits.val();
        CHECK(t_max_abs_diff(out, base) < 1e-14);
    }
}

TEST_CASE("edge to the output node shifts resid_post by exactly the corrupted-clean difference") {
    Fixture f(2, 2);
    for (const auto& ctx : f.ctxs) {
        PatchPlan plan = patch_edge(0, -2);
        HookRegistry reg = compile_plan(f.model, plan, ctx);
        Tape tape(false);
        ActivationCache cache;
        model_forward(tape, f.model, ctx.pair.clean_tokens, 1, ctx.pair.seq_len(), &reg, &cache);
        Tensor want = t_add(ctx.clean.at(hooks::resid_post(1)),
                            t_sub(ctx.corrupted.at(hooks::out_proj(0)), ctx.clean.at(hooks::out_proj(0))));
        CHECK(t_max_abs_diff(cache.at(hooks::resid_post(1)), want) < 1e-12);
    }
}

TEST_CASE("edge with src >= dst is rejected") {
    Fixture f(2, 1);
    CHECK_THROWS_AS(compile_plan(f.model, patch_edge(1, 1), f.ctxs[0]), std::invalid_argument);
    CHECK_THROWS_AS(compile_plan(f.model, patch_edge(1, 0), f.ctxs[0]), std::invalid_argument);
}

TEST_CASE("patching all conv slices at all positions equals resampling hook_in_proj") {
    Fixture f(2, 3);
    const int layer = 1;
    for (const auto& ctx : f.ctxs) {
        PatchPlan slices;
        for (int tap = -static_cast<int>(f.cfg.conv_width - 1); tap <= 0; ++tap) {
            slices.add_conv_slice(ConvSlicePatch{layer, tap, PositionSel::everywhere()});
        }
        PatchPlan wholesale;
        wholesale.add(resample_at(hooks::in_proj(layer)));
        CHECK(t_max_abs_diff(patched_logits(f, ctx, slices), patched_logits(f, ctx, wholesale)) < 1e-10);
    }
}

TEST_CASE("conv slice tap bounds are enforced") {
    Fixture f(1, 1);
    PatchPlan plan;
    plan.add_conv_slice(ConvSlicePatch{0, -4, PositionSel::everywhere()});  // K=4 -> taps -3..0
    CHECK_THROWS_AS(compile_plan(f.model, plan, f.ctxs[0]), std::invalid_argument);
    PatchPlan plan2;
    plan2.add_conv_slice(ConvSlicePatch{0, 1, PositionSel::everywhere()});
    CHECK_THROWS_AS(compile_plan(f.model, plan2, f.ctxs[0]), std::invalid_argument);
}

TEST_CASE("position locality: interventions at positions >= p leave earlier logits bit-identical") {
    Fixture f(2, 2);
    for (const auto& ctx : f.ctxs) {
        Tensor base = clean_logits(f, ctx);
        const int64_t p = 10;
        PatchPlan plan;
        std::vector<int64_t> late;
        for (int64_t q = p; q < ctx.pair.seq_len(); ++q) late.push_back(q);
        plan.add(resample_at(hooks::layer_input(0), PositionSel::at(late)));
        plan.add(resample_at(hooks::in_proj(1), PositionSel::at(late)));
        Tensor out = patched_logits(f, ctx, plan);
        for (int64_t q = 0; q < p; ++q) {
            for (int64_t v = 0; v < f.cfg.vocab_size; ++v) {
                CHECK(out.at({0, q, v}) == base.at({0, q, v}));
            }
        }
    }
}

TEST_CASE("hidden state patch at position p changes logits only from p onward") {
    Fixture f(2, 2);
    for (const auto& ctx : f.ctxs) {
        Tensor base = clean_logits(f, ctx);
        const int64_t last = ctx.pair.seq_len() - 1;
        PatchPlan plan;
        plan.add(patch_hidden_state(0, last));
        Tensor out = patched_logits(f, ctx, plan);
        for (int64_t q = 0; q < last; ++q) {
            for (int64_t v = 0; v < f.cfg.vocab_size; ++v) {
                CHECK(out.at({0, q, v}) == base.at({0, q, v}));
            }
        }
        double last_diff = 0.0;
        for (int64_t v = 0; v < f.cfg.vocab_size; ++v) {
            last_diff = std::max(last_diff, std::abs(out.at({0, last, v}) - base.at({0, last, v})));
        }
        CHECK(last_diff > 0.0);
        // clean-valued h patch is a no-op
        PatchPlan noop;
        Intervention iv;
        iv.hook = hooks::h(0, 3);
        iv.mode = PatchMode::replace_with;
        iv.value = ctx.clean.at(hooks::h(0, 3));
        noop.add(iv);
        CHECK(t_max_abs_diff(patched_logits(f, ctx, noop), base) == 0.0);
    }
}

TEST_CASE("hidden state patch position out of range is rejected") {
    Fixture f(1, 1);
    PatchPlan plan;
    plan.add(patch_hidden_state(0, 99));
    CHECK_THROWS_AS(compile_plan(f.model, plan, f.ctxs[0]), std::invalid_argument);
}

TEST_CASE("removing a layer whose W_out is zero leaves the metric unchanged") {
    Fixture f(2, 3);
    Model m = f.model;
    m.layers[1].w_out = Tensor::zeros({f.cfg.d_model, f.cfg.d_inner});
    auto ctxs = make_contexts(m, f.pairs);
    PatchPlan plan;
    plan.add(remove_layer(1));
    RunOutput base = run_with_plan(m, ctxs, PatchPlan{}, MetricKind::logit_diff);
    RunOutput removed = run_with_plan(m, ctxs, plan, MetricKind::logit_diff);
    for (size_t i = 0; i < base.per_example.size(); ++i) {
        CHECK(removed.per_example[i] == doctest::Approx(base.per_example[i]).epsilon(1e-14));
    }
}

TEST_CASE("zeroing hook_out_proj reproduces deleting the layer from the stack") {
    Fixture f(3, 2);
    Model shorter = f.model;
    shorter.layers.erase(shorter.layers.begin() + 1);
    shorter.cfg.n_layers = 2;
    for (const auto& ctx : f.ctxs) {
        PatchPlan plan;
        plan.add(remove_layer(1));
        Tensor a = patched_logits(f, ctx, plan);
        Tape tape(false);
        Tensor b = model_forward(tape, shorter, ctx.pair.clean_tokens, 1, ctx.pair.seq_len()).logits.val();
        CHECK(t_max_abs_diff(a, b) == 0.0);
    }
}

TEST_CASE("removing every layer leaves embedding plus final norm alone") {
    Fixture f(3, 2);
    for (const auto& ctx : f.ctxs) {
        PatchPlan plan;
        for (int l = 0; l < f.cfg.n_layers; ++l) plan.add(remove_layer(l));
        Tensor a = patched_logits(f, ctx, plan);
        Model bare = f.model;
        for (auto& lp : bare.layers) lp.w_out = Tensor::zeros({f.cfg.d_model, f.cfg.d_inner});
        Tape tape(false);
        Tensor b = model_forward(tape, bare, ctx.pair.clean_tokens, 1, ctx.pair.seq_len()).logits.val();
        CHECK(t_max_abs_diff(a, b) == 0.0);
    }
}

TEST_CASE("conflicting interventions at one (hook, position) are rejected") {
    Fixture f(1, 1);
    PatchPlan plan;
    plan.add(resample_at(hooks::in_proj(0), PositionSel::at({3})));
    plan.add(resample_at(hooks::in_proj(0), PositionSel::at({3, 4})));
    CHECK_THROWS_AS(compile_plan(f.model, plan, f.ctxs[0]), std::invalid_argument);
    // duplicate of the exact same intervention counts as a conflict too
    PatchPlan dup;
    dup.add(remove_layer(0));
    dup.add(remove_layer(0));
    CHECK_THROWS_AS(compile_plan(f.model, dup, f.ctxs[0]), std::invalid_argument);
}

TEST_CASE("unknown hook names are rejected") {
    Fixture f(1, 1);
    PatchPlan plan;
    plan.add(resample_at("blocks.9.hook_in_proj"));
    CHECK_THROWS_AS(compile_plan(f.model, plan, f.ctxs[0]), std::invalid_argument);
}

TEST_CASE("hook aliases are accepted in plans") {
    Fixture f(2, 1);
    PatchPlan plan;
    plan.add(resample_at("blocks.1.hook_proj_out"));
    Tensor a = patched_logits(f, f.ctxs[0], plan);
    PatchPlan canonical;
    canonical.add(resample_at(hooks::out_proj(1)));
    CHECK(t_max_abs_diff(a, patched_logits(f, f.ctxs[0], canonical)) == 0.0);
}

TEST_CASE("mean ablation over a single-pair dataset equals replaying the clean value") {
    Fixture f(2, 1);
    MeanStore store = build_mean_store(f.model, {f.pairs[0]}, {hooks::ssm_input(0)});
    PatchPlan plan;
    Intervention iv;
    iv.hook = hooks::ssm_input(0);
    iv.mode = PatchMode::mean;
    plan.add(iv);
    HookRegistry reg = compile_plan(f.model, plan, f.ctxs[0], &store);
    Tape tape(false);
    Tensor a = model_forward(tape, f.model, f.ctxs[0].pair.clean_tokens, 1, f.ctxs[0].pair.seq_len(), &reg).logits.val();
    CHECK(t_max_abs_diff(a, clean_logits(f, f.ctxs[0])) < 1e-12);  // mean of one example == its clean value
}

TEST_CASE("greedy layer removal trace is deterministic and covers every layer") {
    Fixture f(3, 3);
    GreedyRemovalResult a = greedy_layer_removal(f.model, f.ctxs, MetricKind::relative_prob);
    GreedyRemovalResult b = greedy_layer_removal(f.model, f.ctxs, MetricKind::relative_prob);
    REQUIRE(a.order.size() == 3);
    for (size_t i = 0; i < a.order.size(); ++i) {
        CHECK(a.order[i].layer == b.order[i].layer);
        CHECK(a.order[i].metric_after == b.order[i].metric_after);
    }
}

TEST_CASE("crosstalk: target 0 needs no unpatching; a single-layer model selects that layer") {
    Fixture f(2, 2);
    CrosstalkResult r0 = greedy_crosstalk_circuit(f.model, f.ctxs, MetricKind::nld, -1.0);
    CHECK(r0.circuit.empty());
    CHECK(r0.reached);

    Fixture g(1, 2, 77);
    CrosstalkResult r1 = greedy_crosstalk_circuit(g.model, g.ctxs, MetricKind::nld, 0.999);
    if (!r1.reached) {
        CHECK(r1.circuit.size() == 1);  // full set returned with the flag down
    } else {
        REQUIRE(r1.circuit.size() <= 1);
    }
}

TEST_CASE("ablation grids have one row per layer and shared position labels") {
    Fixture f(2, 3);
    GridResult grid = ablation_grid(f.model, f.ctxs, "layer_input", MetricKind::nld);
    CHECK(grid.values.size() == 2);
    CHECK(grid.values[0].size() == static_cast<size_t>(f.ctxs[0].pair.seq_len()));
    CHECK(grid.position_labels[0] == "pos0");
    CHECK(grid.position_labels.back() == "out");
    GridResult hgrid = ablation_grid(f.model, f.ctxs, "h", MetricKind::nld);
    CHECK(hgrid.values.size() == 2);
    GridResult cgrid = conv_slice_grid(f.model, f.ctxs, 0, MetricKind::nld);
    CHECK(cgrid.values.size() == static_cast<size_t>(f.cfg.conv_width));
}

TEST_CASE("mixed-template contexts are rejected by grid experiments") {
    Fixture f(1, 1);
    GenOptions opt;
    opt.templates = {TemplateId::then, TemplateId::friends};
    opt.count = 6;
    opt.seed = 3;
    auto pairs = generate_batch(f.tok, f.lex, opt);
    auto ctxs = make_contexts(f.model, pairs);
    bool mixed = false;
    for (const auto& c : ctxs) mixed |= (c.pair.template_id != ctxs[0].pair.template_id);
    if (mixed) {
        CHECK_THROWS_AS(ablation_grid(f.model, ctxs, "layer_input", MetricKind::nld), std::invalid_argument);
    }
}
