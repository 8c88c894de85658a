#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ssmc/tape.hpp"
#include "ssmc/tensor.hpp"

namespace ssmc {

// ---------------------------------------------------------------------------
// configuration and parameters
// ---------------------------------------------------------------------------

enum class DtParam { full, low_rank };

struct ModelConfig {
    int n_layers = 4;
    int64_t d_model = 16;     // D: residual width
    int64_t d_inner = 32;     // E: channel count inside a layer
    int64_t state_size = 4;   // N: SSM state per channel
    int64_t conv_width = 4;   // K
    int64_t vocab_size = 64;  // V
    DtParam dt_parameterization = DtParam::full;
    int64_t dt_rank = 0;  // only read when dt_parameterization == low_rank
    // Released Mamba checkpoints carry RMS norms even though the layer diagrams
    // omit them; toy constructions can switch them off for exactly linear paths.
    bool layer_norms = true;
    bool final_norm = true;
    double norm_eps = 1e-5;

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

struct LayerParams {
    Tensor w_in;    // [E,D]
    Tensor w_skip;  // [E,D]
    Tensor conv_w;  // [E,K]
    Tensor conv_b;  // [E]
    Tensor w_b;     // [N,E]
    Tensor w_c;     // [N,E]
    Tensor a_log;   // [E,N]; discretized A_bar = exp(-dt * exp(a_log)) stays in (0,1)
    Tensor d_skip;  // [E]
    Tensor w_dt;    // [E,E] when full
    Tensor w_dt_down;  // [R,E] when low_rank
    Tensor w_dt_up;    // [E,R] when low_rank
    Tensor b_dt;    // [E]
    Tensor w_out;   // [D,E]
    Tensor norm_w;  // [D]
};

struct Model {
    ModelConfig cfg;
    Tensor embedding;  // [V,D]; the unembedding is tied to its transpose
    Tensor norm_f;     // [D]
    std::vector<LayerParams> layers;

    static Model random(const ModelConfig& cfg, uint64_t seed);

    std::vector<std::pair<std::string, Tensor*>> named_params();
    std::vector<std::pair<std::string, const Tensor*>> named_params() const;
};

// ---------------------------------------------------------------------------
// hook points
// ---------------------------------------------------------------------------

namespace hooks {
std::string embed();
std::string layer_input(int layer);
std::string in_proj(int layer);
std::string skip(int layer);
std::string conv(int layer);
std::string conv_slice(int layer, int tap);  // tap in [-(K-1), 0]
std::string ssm_input(int layer);
std::string b_bar(int layer);
std::string h(int layer, int64_t pos);
std::string out_proj(int layer);
std::string resid_post(int layer);

// Folds the hook_proj_out / hook_layer_output spellings into hook_out_proj.
std::string canonical(const std::string& name);

// Every hook that fires exactly once per forward pass on this config
// (hook_h fires once per position). Excludes the per-tap conv slice names.
std::vector<std::string> canonical_names(const ModelConfig& cfg, int64_t seq_len);
}  // namespace hooks

// Captured activations from one forward pass, keyed by canonical hook name.
// Shapes: embed/layer_input/out_proj/resid_post [B,L,D]; in_proj/skip/conv/
// ssm_input and conv_slice [B,L,E]; b_bar [B,L,E,N]; h.{pos} [B,E,N].
struct ActivationCache {
    std::map<std::string, Tensor> acts;
    std::string provenance;  // "clean" or "corrupted"

    bool has(const std::string& name) const;
    const Tensor& at(const std::string& name) const;
    void put(const std::string& name, Tensor t) { acts[hooks::canonical(name)] = std::move(t); }
};

struct ForwardPassState;

// An intervention callback sees the live value at the hook site and returns
// what flows onward. Return values built with tape ops keep their gradient
// connections; constants detach, which is exactly resample semantics.
using HookFn = std::function<Value(ForwardPassState&, const std::string& name, Value current)>;

class HookRegistry {
public:
    // At most one callback per hook point; conflicting registrations throw.
    void set(const std::string& name, HookFn fn);
    const HookFn* find(const std::string& name) const;
    bool empty() const { return fns_.empty(); }
    std::vector<std::string> names() const;

private:
    std::map<std::string, HookFn> fns_;
};

struct ForwardPassState {
    Tape& tape;
    const Model& model;
    int64_t batch = 0;
    int64_t seq_len = 0;
    HookRegistry* hooks = nullptr;
    ActivationCache* capture = nullptr;
    std::map<std::string, Value> live;  // post-intervention values, this pass

    Value live_at(const std::string& name) const;
};

// ---------------------------------------------------------------------------
// forward pass
// ---------------------------------------------------------------------------

// Parameter leaves for one pass, named "param.<name>" on the tape.
struct ParamLeaves {
    Value embedding;
    Value norm_f;
    struct Layer {
        Value w_in, w_skip, conv_w, conv_b, w_b, w_c, a_log, d_skip, w_dt, w_dt_down, w_dt_up, b_dt, w_out, norm_w;
    };
    std::vector<Layer> layers;
};

ParamLeaves make_param_leaves(Tape& tape, const Model& m);

Value ssm_scan(ForwardPassState& ps, int layer, const ParamLeaves::Layer& lp, Value xs);
Value layer_forward(ForwardPassState& ps, int layer, const ParamLeaves::Layer& lp, Value resid);

struct ForwardResult {
    Value logits;      // [B,L,V]
    Value resid_post;  // [B,L,D]
};

// Runs the model on a [batch, len] grid of token ids, firing every hook.
ForwardResult model_forward(Tape& tape, const Model& m, const std::vector<int64_t>& tokens, int64_t batch, int64_t len,
                            HookRegistry* hooks = nullptr, ActivationCache* capture = nullptr);

// Convenience: single prompt, no gradients, capture everything.
ActivationCache run_and_cache(const Model& m, const std::vector<int64_t>& tokens, std::string provenance,
                              HookRegistry* hooks = nullptr);

// Logits at the final position of a single prompt (no gradients).
Tensor final_logits(const Model& m, const std::vector<int64_t>& tokens, HookRegistry* hooks = nullptr);

Value rms_norm(Value x, Value weight, double eps);

}  // namespace ssmc
