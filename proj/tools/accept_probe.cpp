// scratch probe for the trained-model acceptance gates
#include <chrono>
#include <cstdio>
#include "ssmc/acdc.hpp"
#include "ssmc/analysis.hpp"
#include "ssmc/checkpoint.hpp"
#include "ssmc/eap.hpp"
#include "ssmc/testbench.hpp"
#include "../tests/support/oracles.hpp"
using namespace ssmc;

int main(int argc, char** argv) {
    ToyTaskSpec spec;
    spec.seed = argc > 1 ? std::strtoull(argv[1], nullptr, 10) : 1;
    spec.weight_decay = argc > 2 ? std::atof(argv[2]) : 1e-4;
    spec.min_steps = argc > 3 ? std::atoi(argv[3]) : 0;
    spec.model_cfg.n_layers = argc > 4 ? std::atoi(argv[4]) : 4;
    auto t0 = std::chrono::steady_clock::now();
    TrainResult tr = train_toy(spec);
    std::printf("trained: steps=%d acc=%.4f (%.0fs)\n", tr.steps, tr.final_accuracy,
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    save_model(tr.model, "/tmp/toy_model.safetensors");

    Lexicon lex = Lexicon::defaults();
    Tokenizer tok = default_tokenizer(lex);
    GenOptions g;
    g.templates = shared_position_templates();
    g.count = 32;
    g.seed = 4242;
    auto pairs = generate_batch(tok, lex, g);
    auto ctxs = make_contexts(tr.model, pairs);

    // EAP vs exhaustive oracle
    CausalGraph graph = CausalGraph::residual_only(spec.model_cfg.n_layers);
    auto truth = testing::exhaustive_edge_deltas(tr.model, graph, ctxs, MetricKind::nld);
    AttributionTable best;
    for (int variant = 0; variant < 3; ++variant) {
        EapOptions opt;
        const char* name = "?";
        if (variant == 0) { opt.grad_pass = EapOptions::GradPass::fully_patched; name = "patched"; }
        if (variant == 1) { opt.grad_pass = EapOptions::GradPass::clean; name = "clean"; }
        if (variant == 2) { opt.iters = 8; name = "ig8"; }
        AttributionTable t = eap(tr.model, graph, ctxs, opt);
        std::printf("pearson (%s) = %.4f\n", name, testing::pearson(t.scores, truth));
        std::vector<int> ids = graph.patchable_edge_ids();
        std::sort(ids.begin(), ids.end(), [&](int a, int b) { return std::abs(t.scores[a]) > std::abs(t.scores[b]); });
        int agree = 0;
        for (int i = 0; i < 10 && i < (int)ids.size(); ++i) {
            if ((t.scores[ids[i]] > 0) == (truth[ids[i]] > 0)) ++agree;
        }
        std::printf("  top-10 sign agreement: %d/10\n", agree);
        if (variant == 2) best = t;
    }
    {
        apply_scores(graph, best);
        CausalGraph g2 = graph;
        try {
            auto res = minimal_edge_set(best, tr.model, g2, ctxs, MetricKind::nld, 0.85);
            std::printf("  minimal set (ig8 scores): k=%d kept=%zu of %zu achieved=%.4f linear=%d\n", res.k,
                        res.kept.size(), graph.patchable_edge_ids().size(), res.achieved, res.used_linear_scan);
            for (int id : res.kept) std::printf("    %s (%.4f)\n", g2.edge_label(id).c_str(), best.scores[id]);
        } catch (const std::exception& e) {
            std::printf("  minimal set FAILED: %s\n", e.what());
        }
    }

    // steering
    GenOptions sg;
    sg.templates = shared_position_templates();
    sg.count = 300;
    sg.seed = 777;
    auto store_pairs = generate_batch(tok, lex, sg);
    auto eval_ctxs = std::vector<PairContext>(ctxs.begin(), ctxs.begin() + 24);
    for (int layer = 0; layer < spec.model_cfg.n_layers; ++layer) {
        NameAverageStore store = build_name_averages(tr.model, store_pairs, layer, 3);
        std::printf("layer %d:", layer);
        for (auto method : {SteerMethod::replace, SteerMethod::subtract_add}) {
            SubstitutionGrid grid = substitution_grid(tr.model, eval_ctxs, store, method, lex, tok, 5);
            double mean13 = 0; int cells = 0;
            for (int s = 0; s < 3; ++s) {
                for (int dd = 0; dd < 3; ++dd) {
                    if (grid.attempts[s][dd] > 0) { mean13 += grid.rate[s][dd]; cells++; }
                }
            }
            std::printf("  %s n1-n3=%.3f", method == SteerMethod::replace ? "repl" : "subadd",
                        cells ? mean13 / cells : -1.0);
        }
        std::printf("\n");
    }
    return 0;
}
