#include <doctest.h>

#include <cmath>
#include <set>
#include <stdexcept>

#include "ssmc/acdc.hpp"
#include "ssmc/analysis.hpp"
#include "ssmc/eap.hpp"
#include "ssmc/testbench.hpp"

using namespace ssmc;

TEST_CASE("plant_shift_layer rewires the conv and verifies itself") {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 8;
    cfg.d_inner = 10;
    cfg.state_size = 2;
    cfg.conv_width = 4;
    cfg.vocab_size = 32;
    PlantedModel planted = plant_shift_layer(Model::random(cfg, 7), 1);
    const Tensor& w = planted.model.layers[1].conv_w;
    for (int64_t e = 0; e < cfg.d_inner; ++e) {
        for (int64_t k = 0; k < cfg.conv_width; ++k) {
            CHECK(w.at({e, k}) == (k == cfg.conv_width - 2 ? 1.0 : 0.0));
        }
    }
}

TEST_CASE("conv width 1 cannot host a shift") {
    ModelConfig cfg;
    cfg.n_layers = 1;
    cfg.d_model = 4;
    cfg.d_inner = 4;
    cfg.state_size = 2;
    cfg.conv_width = 1;
    cfg.vocab_size = 8;
    CHECK_THROWS_AS(plant_shift_layer(Model::random(cfg, 8), 0), std::invalid_argument);
}

TEST_CASE("planting on a layer with zero output changes nothing behaviorally") {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 8;
    cfg.d_inner = 10;
    cfg.state_size = 2;
    cfg.conv_width = 4;
    cfg.vocab_size = 32;
    Model m = Model::random(cfg, 9);
    m.layers[1].w_out = Tensor::zeros({cfg.d_model, cfg.d_inner});
    std::vector<int64_t> tokens = {3, 1, 4, 1, 5, 9};
    Tensor before = final_logits(m, tokens);
    PlantedModel planted = plant_shift_layer(std::move(m), 1);
    Tensor after = final_logits(planted.model, tokens);
    CHECK(t_max_abs_diff(before, after) == 0.0);
}

TEST_CASE("planted path model: conv-slice patching shows the tap -1 signature") {
    Lexicon lex = Lexicon::defaults();
    Tokenizer tok = default_tokenizer(lex);
    PlantedModel planted = make_planted_path_model(tok, lex);
    GenOptions opt;
    opt.templates = shared_position_templates();
    opt.count = 8;
    opt.seed = 21;
    opt.corruption_classes = {3};  // the n3 name is replaced by a fresh one
    auto ctxs = make_contexts(planted.model, generate_batch(tok, lex, opt));
    GridResult grid = conv_slice_grid(planted.model, ctxs, planted.shift_layer, MetricKind::nld);

    const int64_t n3 = ctxs[0].pair.pos("n3");
    const int tap_rows = static_cast<int>(planted.model.cfg.conv_width);
    // strongest effect (lowest nld) at (tap -1, n3+1)
    double best = 1e300;
    int best_tap = 0;
    int64_t best_pos = -1;
    for (int r = 0; r < tap_rows; ++r) {
        for (int64_t p = 0; p < ctxs[0].pair.seq_len(); ++p) {
            const double v = grid.values[static_cast<size_t>(r)][static_cast<size_t>(p)];
            if (v < best) {
                best = v;
                best_tap = r - (tap_rows - 1);
                best_pos = p;
            }
        }
    }
    CHECK(best_tap == -1);
    CHECK(best_pos == n3 + 1);
    // every other tap has exactly zero filter weight, so patching it is a no-op
    const double unpatched = run_with_plan(planted.model, ctxs, PatchPlan{}, MetricKind::nld).mean;
    for (int r = 0; r < tap_rows; ++r) {
        if (r == tap_rows - 2) continue;
        for (int64_t p = 0; p < ctxs[0].pair.seq_len(); ++p) {
            CHECK(grid.values[static_cast<size_t>(r)][static_cast<size_t>(p)] ==
                  doctest::Approx(unpatched).epsilon(1e-12));
        }
    }
}

TEST_CASE("planted path model: cosine lens shows the one-after-name lines") {
    Lexicon lex = Lexicon::defaults();
    Tokenizer tok = default_tokenizer(lex);
    PlantedModel planted = make_planted_path_model(tok, lex);
    GenOptions opt;
    opt.templates = {TemplateId::friends};
    opt.count = 1;
    opt.seed = 22;
    auto pairs = generate_batch(tok, lex, opt);
    CosineLensMatrix lens = cosine_lens(planted.model, pairs[0].clean_tokens, planted.shift_layer);

    std::set<int64_t> after_name;
    for (int slot = 1; slot <= 5; ++slot) after_name.insert(pairs[0].pos("n" + std::to_string(slot)) + 1);
    double name_rows = 0.0, other_rows = 0.0;
    int nn = 0, no = 0;
    for (int64_t i = 1; i < pairs[0].seq_len(); ++i) {  // skip BOS
        double mean = 0.0;
        int cnt = 0;
        for (int64_t j = i; j < pairs[0].seq_len(); ++j) {
            mean += std::abs(lens.values[static_cast<size_t>(i)][static_cast<size_t>(j)]);
            ++cnt;
        }
        mean /= cnt;
        if (after_name.count(i)) {
            name_rows += mean;
            ++nn;
        } else {
            other_rows += mean;
            ++no;
        }
    }
    name_rows /= nn;
    other_rows /= no;
    CHECK(name_rows > 2.0 * other_rows);
}

TEST_CASE("EAP ranks the planted residual edges at the top") {
    Lexicon lex = Lexicon::defaults();
    Tokenizer tok = default_tokenizer(lex);
    PlantedModel planted = make_planted_path_model(tok, lex);
    GenOptions opt;
    opt.templates = shared_position_templates();
    opt.count = 8;
    opt.seed = 23;
    auto ctxs = make_contexts(planted.model, generate_batch(tok, lex, opt));
    CausalGraph g = CausalGraph::residual_only(planted.model.cfg.n_layers);
    EapOptions eopt;
    eopt.grad_pass = EapOptions::GradPass::clean;
    AttributionTable t = eap(planted.model, g, ctxs, eopt);
    std::vector<int> ids = g.patchable_edge_ids();
    std::sort(ids.begin(), ids.end(),
              [&](int a, int b) { return std::abs(t.scores[static_cast<size_t>(a)]) > std::abs(t.scores[static_cast<size_t>(b)]); });
    std::set<std::string> top = {g.edge_label(ids[0]), g.edge_label(ids[1])};
    CHECK(top.count("embed -> layer_in.1") == 1);
    CHECK(top.count("layer_out.1 -> output") == 1);
}

TEST_CASE("acdc recovers exactly the planted path") {
    Lexicon lex = Lexicon::defaults();
    Tokenizer tok = default_tokenizer(lex);
    PlantedModel planted = make_planted_path_model(tok, lex);
    GenOptions opt;
    opt.templates = shared_position_templates();
    opt.count = 6;
    opt.seed = 24;
    auto ctxs = make_contexts(planted.model, generate_batch(tok, lex, opt));
    CausalGraph g = CausalGraph::with_intra(planted.model.cfg.n_layers, static_cast<int>(planted.model.cfg.conv_width));
    AcdcOptions aopt;
    aopt.thresh = 1e-4;
    aopt.metric = MetricKind::neg_kl;  // orientation-free: 0 iff the patch is a no-op
    acdc_sweep(g, planted.model, ctxs, aopt);
    const auto mask = g.on_path_mask();
    std::set<std::string> kept;
    for (size_t i = 0; i < g.edges().size(); ++i) {
        if (!g.edges()[i].patched && mask[i]) kept.insert(g.edge_label(static_cast<int>(i)));
    }
    std::set<std::string> want;
    for (const auto& l : planted_path_edge_labels(planted.shift_layer)) want.insert(l);
    CHECK(kept == want);
}

TEST_CASE("training is deterministic under a fixed seed") {
    ToyTaskSpec spec;
    spec.model_cfg.n_layers = 1;
    spec.model_cfg.d_model = 8;
    spec.model_cfg.d_inner = 12;
    spec.model_cfg.state_size = 2;
    spec.batch_size = 4;
    spec.max_steps = 3;
    spec.eval_every = 3;
    spec.target_accuracy = -1.0;  // accept anything; this is a determinism probe
    spec.seed = 5;
    TrainResult a = train_toy(spec);
    TrainResult b = train_toy(spec);
    REQUIRE(a.log.size() == b.log.size());
    for (size_t i = 0; i < a.log.size(); ++i) {
        CHECK(a.log[i].loss == b.log[i].loss);  // bit-identical
        CHECK(a.log[i].eval_accuracy == b.log[i].eval_accuracy);
    }
}

TEST_CASE("divergent training reports the step index") {
    ToyTaskSpec spec;
    spec.model_cfg.n_layers = 1;
    spec.model_cfg.d_model = 8;
    spec.model_cfg.d_inner = 12;
    spec.model_cfg.state_size = 2;
    spec.batch_size = 4;
    spec.max_steps = 200;
    spec.lr = 1e9;
    spec.seed = 6;
    try {
        train_toy(spec);
        FAIL("expected divergence");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("step") != std::string::npos);
    }
}

TEST_CASE("a zero-layer model solves the one-token copy task to 100%") {
    ModelConfig cfg;
    cfg.n_layers = 0;
    cfg.d_model = 8;
    cfg.d_inner = 1;
    cfg.state_size = 1;
    cfg.conv_width = 1;
    cfg.vocab_size = 8;
    Model m = Model::random(cfg, 11);
    AdamOptimizer adam(0.1);
    for (int step = 0; step < 60; ++step) {
        Tape tape(true);
        std::vector<int64_t> tokens;
        for (int64_t v = 0; v < 8; ++v) tokens.push_back(v);
        auto fr = model_forward(tape, m, tokens, 8, 1);
        Value ls = log_softmax_lastdim(fr.logits);
        Value acc;
        for (int64_t b = 0; b < 8; ++b) {
            Value lp = reshape(slice(slice(slice(ls, 0, b, b + 1), 1, 0, 1), 2, b, b + 1), {});
            acc = b == 0 ? lp : add(acc, lp);
        }
        Value loss = mul_scalar(acc, -1.0 / 8.0);
        tape.backward(loss);
        std::map<std::string, Tensor> grads;
        for (const auto& [name, t] : m.named_params()) {
            grads.emplace(name, tape.grad(tape.named("param." + name).id));
        }
        adam.step(m, grads);
    }
    int correct = 0;
    for (int64_t v = 0; v < 8; ++v) {
        Tensor row = final_logits(m, {v});
        int64_t best = 0;
        for (int64_t u = 1; u < 8; ++u) {
            if (row[u] > row[best]) best = u;
        }
        if (best == v) ++correct;
    }
    CHECK(correct == 8);
}

TEST_CASE("short toy training drives the loss down") {
    ToyTaskSpec spec;
    spec.max_steps = 250;
    spec.eval_every = 250;
    spec.target_accuracy = -1.0;
    spec.seed = 1;
    TrainResult res = train_toy(spec);
    auto mean_loss = [&](size_t from, size_t to) {
        double s = 0.0;
        for (size_t i = from; i < to; ++i) s += res.log[i].loss;
        return s / static_cast<double>(to - from);
    };
    CHECK(mean_loss(res.log.size() - 10, res.log.size()) < 0.75 * mean_loss(0, 10));
}
