#include "ssmc/testbench.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <sstream>

#include "ssmc/patching.hpp"

using nlohmann::json;

namespace ssmc {

void AdamOptimizer::step(Model& m, const std::map<std::string, Tensor>& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (auto& [name, param] : m.named_params()) {
        auto git = grads.find(name);
        if (git == grads.end()) continue;
        const Tensor& g = git->second;
        check_same_shape("AdamOptimizer::step", *param, g);
        auto& mt = m_state_[name];
        auto& vt = v_state_[name];
        if (!mt.defined()) {
            mt = Tensor::zeros(param->shape());
            vt = Tensor::zeros(param->shape());
        }
        for (int64_t i = 0; i < param->numel(); ++i) {
            mt[i] = beta1_ * mt[i] + (1.0 - beta1_) * g[i];
            vt[i] = beta2_ * vt[i] + (1.0 - beta2_) * g[i] * g[i];
            const double mhat = mt[i] / bc1;
            const double vhat = vt[i] / bc2;
            (*param)[i] -= lr_ * weight_decay_ * (*param)[i];
            (*param)[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

namespace {

// cross-entropy at the final position, batched over same-length prompts
Value batch_loss(Tape& tape, const Model& m, const std::vector<PromptPair>& batch) {
    const int64_t B = static_cast<int64_t>(batch.size());
    const int64_t L = batch.front().seq_len();
    std::vector<int64_t> flat;
    flat.reserve(static_cast<size_t>(B * L));
    for (const auto& p : batch) flat.insert(flat.end(), p.clean_tokens.begin(), p.clean_tokens.end());
    auto fr = model_forward(tape, m, flat, B, L);
    Value ls = log_softmax_lastdim(fr.logits);  // [B,L,V]
    Value acc;
    for (int64_t b = 0; b < B; ++b) {
        const int64_t out = batch[static_cast<size_t>(b)].out_pos();
        const int64_t ans = batch[static_cast<size_t>(b)].answer_tok;
        Value row = slice(slice(ls, 0, b, b + 1), 1, out, out + 1);  // [1,1,V]
        Value lp = reshape(slice(row, 2, ans, ans + 1), {});
        acc = b == 0 ? lp : add(acc, lp);
    }
    return mul_scalar(acc, -1.0 / static_cast<double>(B));
}

std::map<std::string, Tensor> collect_param_grads(Tape& tape, const Model& m) {
    std::map<std::string, Tensor> grads;
    for (const auto& [name, t] : m.named_params()) {
        grads.emplace(name, tape.grad(tape.named("param." + name).id));
    }
    return grads;
}

}  // namespace

double ioi_accuracy(const Model& m, const std::vector<PromptPair>& pairs) {
    if (pairs.empty()) throw std::invalid_argument("ioi_accuracy: no pairs");
    // group by length so each group batches into one forward pass
    std::map<int64_t, std::vector<const PromptPair*>> groups;
    for (const auto& p : pairs) groups[p.seq_len()].push_back(&p);
    int correct = 0;
    for (const auto& [L, group] : groups) {
        const int64_t B = static_cast<int64_t>(group.size());
        std::vector<int64_t> flat;
        flat.reserve(static_cast<size_t>(B * L));
        for (const auto* p : group) flat.insert(flat.end(), p->clean_tokens.begin(), p->clean_tokens.end());
        Tape tape(false);
        const Tensor logits = model_forward(tape, m, flat, B, L).logits.val();
        for (int64_t b = 0; b < B; ++b) {
            const int64_t out = group[static_cast<size_t>(b)]->out_pos();
            int64_t best = 0;
            for (int64_t v = 1; v < m.cfg.vocab_size; ++v) {
                if (logits.at({b, out, v}) > logits.at({b, out, best})) best = v;
            }
            if (best == group[static_cast<size_t>(b)]->answer_tok) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(pairs.size());
}

TrainResult train_toy(const ToyTaskSpec& spec) {
    spec.model_cfg.validate();
    Lexicon lex = Lexicon::defaults();
    Tokenizer tok = default_tokenizer(lex);
    if (tok.size() > spec.model_cfg.vocab_size) {
        throw std::invalid_argument("train_toy: vocab_size " + std::to_string(spec.model_cfg.vocab_size) +
                                    " smaller than the tokenizer's " + std::to_string(tok.size()));
    }
    if (spec.templates.empty()) throw std::invalid_argument("train_toy: no templates");

    TrainResult res;
    res.model = Model::random(spec.model_cfg, spec.seed);
    if (spec.shift_init) {
        std::mt19937_64 conv_rng(spec.seed ^ 0x5151);
        for (auto& lp : res.model.layers) {
            lp.conv_w = Tensor::randn({spec.model_cfg.d_inner, spec.model_cfg.conv_width}, conv_rng, 0.2);
            if (spec.model_cfg.conv_width >= 2) {
                for (int64_t e = 0; e < spec.model_cfg.d_inner; ++e) {
                    lp.conv_w.at({e, spec.model_cfg.conv_width - 2}) += 1.0;  // tap -1
                }
            }
        }
    }
    AdamOptimizer adam(spec.lr, 0.9, 0.999, 1e-8, spec.weight_decay);

    GenOptions held;
    held.templates = spec.templates;
    held.count = spec.eval_count;
    held.seed = spec.seed ^ 0x9e3779b97f4a7c15ull;
    const auto held_out = generate_batch(tok, lex, held);

    for (int step = 0; step < spec.max_steps; ++step) {
        GenOptions g;
        g.templates = {spec.templates[static_cast<size_t>(step) % spec.templates.size()]};
        g.count = spec.batch_size;
        g.seed = spec.seed + 0x51ed2701ull * static_cast<uint64_t>(step + 1);
        const auto batch = generate_batch(tok, lex, g);

        Tape tape(true);
        double loss_v = 0.0;
        try {
            Value loss = batch_loss(tape, res.model, batch);
            loss_v = loss.val().item();
            if (!std::isfinite(loss_v)) throw NumericError("non-finite loss");
            tape.backward(loss);
            adam.step(res.model, collect_param_grads(tape, res.model));
        } catch (const NumericError& e) {
            throw NumericError("train_toy: training diverged at step " + std::to_string(step) + ": " + e.what());
        }

        TrainLogEntry entry;
        entry.step = step;
        entry.loss = loss_v;
        const bool eval_now = (step + 1) % spec.eval_every == 0 || step + 1 == spec.max_steps;
        if (eval_now) {
            entry.eval_accuracy = ioi_accuracy(res.model, held_out);
        }
        res.log.push_back(entry);
        res.steps = step + 1;
        if (eval_now && entry.eval_accuracy >= spec.target_accuracy && step + 1 >= spec.min_steps) {
            res.final_accuracy = entry.eval_accuracy;
            return res;
        }
    }
    res.final_accuracy = ioi_accuracy(res.model, held_out);
    if (res.final_accuracy < spec.target_accuracy) {
        std::ostringstream os;
        os << "train_toy: held-out accuracy " << res.final_accuracy << " below target " << spec.target_accuracy
           << " after " << res.steps << " steps (final loss " << res.log.back().loss << ")";
        throw std::runtime_error(os.str());
    }
    return res;
}

std::string train_log_jsonl(const std::vector<TrainLogEntry>& log) {
    std::string out;
    for (const auto& e : log) {
        json j;
        j["step"] = e.step;
        j["loss"] = e.loss;
        if (e.eval_accuracy >= 0.0) j["eval_accuracy"] = e.eval_accuracy;
        out += j.dump();
        out += '\n';
    }
    return out;
}

// ---------------------------------------------------------------------------
// planted constructions
// ---------------------------------------------------------------------------

namespace {

// The conv output must read exactly the previous position after planting.
void assert_shift_behavior(const Model& m, int layer) {
    const int64_t L = 6;
    std::vector<int64_t> tokens(static_cast<size_t>(L), 0);
    std::mt19937_64 rng(123);
    const Tensor probe_a = Tensor::randn({1, L, m.cfg.d_inner}, rng);
    Tensor probe_b = probe_a;
    const int64_t t_mod = 2;
    for (int64_t e = 0; e < m.cfg.d_inner; ++e) probe_b.at({0, t_mod, e}) += 1.0;

    auto conv_of = [&](const Tensor& probe) {
        HookRegistry reg;
        reg.set(hooks::in_proj(layer), [&probe](ForwardPassState& ps, const std::string&, Value) {
            return ps.tape.constant(probe);
        });
        ActivationCache cache;
        Tape tape(false);
        model_forward(tape, m, tokens, 1, L, &reg, &cache);
        return cache.at(hooks::conv(layer));
    };
    const Tensor ca = conv_of(probe_a);
    const Tensor cb = conv_of(probe_b);
    for (int64_t t = 0; t < L; ++t) {
        for (int64_t e = 0; e < m.cfg.d_inner; ++e) {
            if (t == t_mod + 1) {
                if (ca.at({0, t, e}) == cb.at({0, t, e})) {
                    throw std::logic_error("plant_shift_layer: conv output ignores the previous position");
                }
                if (cb.at({0, t, e}) != probe_b.at({0, t - 1, e})) {
                    throw std::logic_error("plant_shift_layer: conv output is not the shifted input");
                }
            } else if (ca.at({0, t, e}) != cb.at({0, t, e})) {
                throw std::logic_error("plant_shift_layer: conv output leaks positions other than t-1");
            }
        }
    }
}

}  // namespace

PlantedModel plant_shift_layer(Model model, int layer) {
    const ModelConfig& cfg = model.cfg;
    if (cfg.conv_width < 2) throw std::invalid_argument("plant_shift_layer: conv width must be >= 2");
    if (layer < 0 || layer >= cfg.n_layers) throw std::invalid_argument("plant_shift_layer: layer out of range");
    LayerParams& lp = model.layers[static_cast<size_t>(layer)];
    lp.conv_w = Tensor::zeros({cfg.d_inner, cfg.conv_width});
    for (int64_t e = 0; e < cfg.d_inner; ++e) lp.conv_w.at({e, cfg.conv_width - 2}) = 1.0;  // tap -1
    lp.conv_b = Tensor::zeros({cfg.d_inner});
    assert_shift_behavior(model, layer);
    return PlantedModel{std::move(model), layer};
}

PlantedModel make_planted_path_model(const Tokenizer& tok, const Lexicon& lex, uint64_t seed) {
    ModelConfig cfg;
    cfg.n_layers = 3;
    cfg.d_model = 12;
    cfg.d_inner = 16;
    cfg.state_size = 4;
    cfg.conv_width = 4;
    cfg.vocab_size = tok.size();
    cfg.layer_norms = false;
    cfg.final_norm = false;
    Model m = Model::random(cfg, seed);

    std::mt19937_64 rng(seed ^ 0xabcdef);
    // names get large embeddings, everything else is faint, so the planted
    // SSM path is dominated by name content
    m.embedding = Tensor::randn({cfg.vocab_size, cfg.d_model}, rng, 0.12);
    for (const auto& name : lex.names) {
        if (!tok.has(name)) continue;
        const int64_t id = tok.id(name);
        for (int64_t d = 0; d < cfg.d_model; ++d) {
            m.embedding.at({id, d}) = Tensor::randn({1}, rng, 1.0)[0];
        }
    }
    for (int l : {0, 2}) {
        m.layers[static_cast<size_t>(l)].w_out = Tensor::zeros({cfg.d_model, cfg.d_inner});
    }
    LayerParams& lp = m.layers[1];
    lp.w_in = Tensor::randn({cfg.d_inner, cfg.d_model}, rng, 1.0 / std::sqrt(static_cast<double>(cfg.d_model)));
    lp.w_skip = Tensor::randn({cfg.d_inner, cfg.d_model}, rng, 1.0);
    lp.w_dt = Tensor::zeros({cfg.d_inner, cfg.d_inner});
    lp.b_dt = Tensor::full({cfg.d_inner}, std::log(std::expm1(1.0)));  // dt = 1 everywhere
    lp.a_log = Tensor::full({cfg.d_inner, cfg.state_size}, std::log(0.05));  // A_bar ~ 0.95
    lp.d_skip = Tensor::zeros({cfg.d_inner});  // readout through the recurrence only
    lp.w_b = Tensor::randn({cfg.state_size, cfg.d_inner}, rng, 1.0 / std::sqrt(static_cast<double>(cfg.d_inner)));
    // the C projection reads the (shifted) small non-name token at the answer
    // position; scale it so the recurrence readout carries through
    lp.w_c = Tensor::randn({cfg.state_size, cfg.d_inner}, rng, 4.0 / std::sqrt(static_cast<double>(cfg.d_inner)));
    lp.w_out = Tensor::randn({cfg.d_model, cfg.d_inner}, rng, 4.0 / std::sqrt(static_cast<double>(cfg.d_inner)));

    PlantedModel planted = plant_shift_layer(std::move(m), 1);

    // behavior probe: corruption must move the final logits through the path
    GenOptions g;
    g.templates = shared_position_templates();
    g.count = 4;
    g.seed = seed + 9;
    for (const auto& pair : generate_batch(tok, lex, g)) {
        const Tensor clean = final_logits(planted.model, pair.clean_tokens);
        const Tensor corr = final_logits(planted.model, pair.corrupted_tokens);
        if (t_max_abs_diff(clean, corr) < 0.05) {
            throw std::logic_error("make_planted_path_model: corruption barely reaches the logits");
        }
    }
    return planted;
}

std::vector<std::string> planted_path_edge_labels(int shift_layer) {
    const std::string l = std::to_string(shift_layer);
    return {
        "embed -> layer_in." + l,
        "layer_in." + l + " -> conv." + l + " [tap -1]",
        "conv." + l + " -> ssm." + l,
        "ssm." + l + " -> layer_out." + l,
        "layer_out." + l + " -> output",
    };
}

}  // namespace ssmc
