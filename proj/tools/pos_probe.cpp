// probe: positional minimal edge set + steering gap on the 4-layer toy
#include <chrono>
#include <cstdio>
#include "ssmc/analysis.hpp"
#include "ssmc/eap.hpp"
#include "ssmc/testbench.hpp"
#include "../tests/support/oracles.hpp"
using namespace ssmc;

int main(int argc, char** argv) {
    ToyTaskSpec spec;
    spec.seed = argc > 1 ? std::strtoull(argv[1], nullptr, 10) : 1;
    spec.min_steps = 1000;
    spec.weight_decay = 3e-3;
    TrainResult tr = train_toy(spec);
    std::printf("trained: steps=%d acc=%.4f\n", tr.steps, tr.final_accuracy);

    Lexicon lex = Lexicon::defaults();
    Tokenizer tok = default_tokenizer(lex);
    GenOptions g;
    g.templates = shared_position_templates();
    g.count = 32;
    g.seed = 4242;
    auto ctxs = make_contexts(tr.model, generate_batch(tok, lex, g));

    // positional graph + IG scores
    const int64_t L = ctxs[0].pair.seq_len();
    CausalGraph pos_graph = CausalGraph::residual_only(spec.model_cfg.n_layers).positional_copy(L);
    EapOptions opt;
    opt.iters = 8;
    AttributionTable t = eap(tr.model, pos_graph, ctxs, opt);
    apply_scores(pos_graph, t);
    auto t0 = std::chrono::steady_clock::now();
    try {
        auto res = minimal_edge_set(t, tr.model, pos_graph, ctxs, MetricKind::nld, 0.85);
        std::printf("positional minimal set: k=%d kept=%zu of %zu (%.1f%%) achieved=%.4f linear=%d (%.0fs)\n", res.k,
                    res.kept.size(), pos_graph.patchable_edge_ids().size(),
                    100.0 * res.kept.size() / pos_graph.patchable_edge_ids().size(), res.achieved,
                    res.used_linear_scan,
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    } catch (const std::exception& e) {
        std::printf("positional minimal set FAILED: %s\n", e.what());
    }

    // steering: pick layer by scanning, report gaps with more data
    GenOptions sg;
    sg.templates = shared_position_templates();
    sg.count = 400;
    sg.seed = 777;
    auto store_pairs = generate_batch(tok, lex, sg);
    GenOptions eg;
    eg.templates = shared_position_templates();
    eg.count = 48;
    eg.seed = 888;
    auto eval_ctxs = make_contexts(tr.model, generate_batch(tok, lex, eg));
    for (int layer = 0; layer < spec.model_cfg.n_layers; ++layer) {
        NameAverageStore store = build_name_averages(tr.model, store_pairs, layer, 3);
        double r13 = 0, s13 = 0;
        int rc = 0, sc = 0;
        SubstitutionGrid rg = substitution_grid(tr.model, eval_ctxs, store, SteerMethod::replace, lex, tok, 5);
        SubstitutionGrid sgr = substitution_grid(tr.model, eval_ctxs, store, SteerMethod::subtract_add, lex, tok, 5);
        int att = 0;
        for (int s = 0; s < 3; ++s) {
            for (int dd = 0; dd < 3; ++dd) {
                if (rg.attempts[s][dd] > 0) { r13 += rg.rate[s][dd]; rc++; att += rg.attempts[s][dd]; }
                if (sgr.attempts[s][dd] > 0) { s13 += sgr.rate[s][dd]; sc++; }
            }
        }
        std::printf("layer %d: repl n1-n3=%.3f subadd n1-n3=%.3f (attempts %d)\n", layer, rc ? r13 / rc : -1,
                    sc ? s13 / sc : -1, att);
    }
    return 0;
}
