#pragma once

#include <map>
#include <string>
#include <vector>

#include "ssmc/ioi.hpp"
#include "ssmc/model.hpp"

namespace ssmc {

// Synthetic IOI recall task at desk scale: names introduced, two repeated, the
// answer is the one left out. Solvable by construction; the training gate
// verifies it.
struct ToyTaskSpec {
    ModelConfig model_cfg;  // 4 layers, D=16, E=32, N=4, vocab 64 by default
    std::vector<TemplateId> templates = {TemplateId::then, TemplateId::afterwards, TemplateId::when,
                                         TemplateId::friends};
    int batch_size = 32;
    int max_steps = 20000;
    double lr = 2e-3;
    double weight_decay = 1e-4;
    uint64_t seed = 1;
    int eval_every = 250;
    int eval_count = 256;
    double target_accuracy = 0.95;
    // Start the conv filters near the shift-by-one primitive (delta at tap -1
    // plus noise). The trained models then carry name information one after
    // the name, the same mechanism the steering experiments target.
    bool shift_init = true;
    int min_steps = 0;  // keep training past the target (circuit consolidation)

    ToyTaskSpec() {
        model_cfg.n_layers = 4;
        model_cfg.d_model = 16;
        model_cfg.d_inner = 32;
        model_cfg.state_size = 4;
        model_cfg.conv_width = 4;
        model_cfg.vocab_size = 64;
    }
};

class AdamOptimizer {
public:
    explicit AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
                           double weight_decay = 0.0)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

    void step(Model& m, const std::map<std::string, Tensor>& grads);
    int steps_taken() const { return t_; }

private:
    double lr_, beta1_, beta2_, eps_, weight_decay_;
    int t_ = 0;
    std::map<std::string, Tensor> m_state_, v_state_;
};

struct TrainLogEntry {
    int step = 0;
    double loss = 0.0;
    double eval_accuracy = -1.0;  // -1 when this step ran no eval
};

struct TrainResult {
    Model model;
    std::vector<TrainLogEntry> log;
    double final_accuracy = 0.0;
    int steps = 0;
};

// Trains on freshly generated IOI batches (cross-entropy on the answer token
// at the final position) until the held-out accuracy target is reached.
// Throws on divergence (with the step index) and when the step budget runs out
// below target.
TrainResult train_toy(const ToyTaskSpec& spec);

std::string train_log_jsonl(const std::vector<TrainLogEntry>& log);

// Held-out accuracy of a model over IOI pairs (argmax at the final position).
double ioi_accuracy(const Model& m, const std::vector<PromptPair>& pairs);

// ---------------------------------------------------------------------------
// planted constructions
// ---------------------------------------------------------------------------

struct PlantedModel {
    Model model;
    int shift_layer = 1;
};

// Overwrites a layer's conv filters with the delta at tap -1, so the layer
// reads the previous position only. Verified by a forward probe before return.
PlantedModel plant_shift_layer(Model model, int layer);

// Three layers with only the middle one wired up (the others have zero output
// projections): names flow embed -> layer 1 input -> conv tap -1 -> SSM ->
// output. Ground truth for the discovery algorithms.
PlantedModel make_planted_path_model(const Tokenizer& tok, const Lexicon& lex, uint64_t seed = 5);

// The edge labels ACDC should keep on the planted-path model.
std::vector<std::string> planted_path_edge_labels(int shift_layer);

}  // namespace ssmc
