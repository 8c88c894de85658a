#include <cstdio>
#include <set>
#include "ssmc/acdc.hpp"
#include "ssmc/testbench.hpp"
using namespace ssmc;
int main() {
    Lexicon lex = Lexicon::defaults();
    Tokenizer tok = default_tokenizer(lex);
    PlantedModel planted = make_planted_path_model(tok, lex);
    GenOptions opt;
    opt.templates = shared_position_templates();
    opt.count = 6;
    opt.seed = 24;
    auto ctxs = make_contexts(planted.model, generate_batch(tok, lex, opt));
    {
        const auto& ctx = ctxs[0];
        Tensor clean = final_logits(planted.model, ctx.pair.clean_tokens);
        Tensor corr = final_logits(planted.model, ctx.pair.corrupted_tokens);
        std::printf("logit diff clean vs corrupted: %.6f\n", t_max_abs_diff(clean, corr));
        PatchPlan p1 = patch_edge(1, -2);
        std::printf("patch out1->output neg_kl: %.8f\n",
                    run_with_plan_single(planted.model, ctx, p1, MetricKind::neg_kl));
        PatchPlan p2 = patch_edge(-1, 1);
        std::printf("patch embed->in1 neg_kl: %.8f\n",
                    run_with_plan_single(planted.model, ctx, p2, MetricKind::neg_kl));
        std::printf("logit scale: clean[0..4] = %.4f %.4f %.4f %.4f\n", clean[0], clean[1], clean[2], clean[3]);
    }
    CausalGraph g = CausalGraph::with_intra(3, 4);
    AcdcOptions aopt;
    aopt.thresh = 1e-4;
    aopt.metric = MetricKind::neg_kl;
    AcdcResult res = acdc_sweep(g, planted.model, ctxs, aopt);
    auto mask = g.on_path_mask();
    std::printf("final metric %.4f acc %.4f pruned %d\n", res.final_metric, res.final_accuracy, res.pruned);
    for (size_t i = 0; i < g.edges().size(); ++i) {
        if (!g.edges()[i].patched) {
            std::printf("kept%s: %s\n", mask[i] ? " (on path)" : " (dangling)", g.edge_label((int)i).c_str());
        }
    }
    for (const auto& r : res.records) {
        if (std::abs(r.drop) > 1e-6) {
            std::printf("record %-40s drop=%.5f removed=%d\n", g.edge_label(r.edge).c_str(), r.drop, r.removed);
        }
    }
    return 0;
}
