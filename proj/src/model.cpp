#include "ssmc/model.hpp"

#include <cmath>
#include <stdexcept>

namespace ssmc {

// ---------------------------------------------------------------------------
// config / params
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
    auto need = [](bool ok, const char* what) {
        if (!ok) throw std::invalid_argument(std::string("ModelConfig: ") + what);
    };
    need(n_layers >= 0, "n_layers must be >= 0");
    need(d_model >= 1 && d_inner >= 1 && state_size >= 1 && vocab_size >= 1, "all extents must be >= 1");
    need(conv_width >= 1, "conv_width must be >= 1");
    if (dt_parameterization == DtParam::low_rank) need(dt_rank >= 1, "dt_rank must be >= 1 for low-rank dt");
}

static double softplus_inv(double y) { return std::log(std::expm1(y)); }

Model Model::random(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    const int64_t D = cfg.d_model, E = cfg.d_inner, N = cfg.state_size, K = cfg.conv_width, V = cfg.vocab_size;

    Model m;
    m.cfg = cfg;
    m.embedding = Tensor::randn({V, D}, rng, 0.1);
    m.norm_f = Tensor::full({D}, 1.0);
    std::uniform_real_distribution<double> log_dt(std::log(1e-3), std::log(1e-1));
    for (int i = 0; i < cfg.n_layers; ++i) {
        LayerParams lp;
        lp.w_in = Tensor::randn({E, D}, rng, 1.0 / std::sqrt(static_cast<double>(D)));
        lp.w_skip = Tensor::randn({E, D}, rng, 1.0 / std::sqrt(static_cast<double>(D)));
        lp.conv_w = Tensor::randn({E, K}, rng, 1.0 / std::sqrt(static_cast<double>(K)));
        lp.conv_b = Tensor::zeros({E});
        lp.w_b = Tensor::randn({N, E}, rng, 1.0 / std::sqrt(static_cast<double>(E)));
        lp.w_c = Tensor::randn({N, E}, rng, 1.0 / std::sqrt(static_cast<double>(E)));
        lp.a_log = Tensor({E, N});
        for (int64_t e = 0; e < E; ++e) {
            for (int64_t n = 0; n < N; ++n) lp.a_log.at({e, n}) = std::log(static_cast<double>(n + 1));
        }
        lp.d_skip = Tensor::full({E}, 1.0);
        if (cfg.dt_parameterization == DtParam::full) {
            lp.w_dt = Tensor::randn({E, E}, rng, 0.05 / std::sqrt(static_cast<double>(E)));
        } else {
            lp.w_dt_down = Tensor::randn({cfg.dt_rank, E}, rng, 1.0 / std::sqrt(static_cast<double>(E)));
            lp.w_dt_up = Tensor::randn({E, cfg.dt_rank}, rng, 0.05 / std::sqrt(static_cast<double>(cfg.dt_rank)));
        }
        lp.b_dt = Tensor({E});
        for (int64_t e = 0; e < E; ++e) lp.b_dt[e] = softplus_inv(std::exp(log_dt(rng)));
        lp.w_out = Tensor::randn({D, E}, rng, 1.0 / std::sqrt(static_cast<double>(E * 2 * cfg.n_layers)));
        lp.norm_w = Tensor::full({D}, 1.0);
        m.layers.push_back(std::move(lp));
    }
    return m;
}

template <typename M, typename T>
static std::vector<std::pair<std::string, T*>> collect_params(M& m) {
    std::vector<std::pair<std::string, T*>> out;
    out.emplace_back("embedding", &m.embedding);
    out.emplace_back("norm_f", &m.norm_f);
    for (size_t i = 0; i < m.layers.size(); ++i) {
        auto& lp = m.layers[i];
        const std::string p = "layers." + std::to_string(i) + ".";
        out.emplace_back(p + "w_in", &lp.w_in);
        out.emplace_back(p + "w_skip", &lp.w_skip);
        out.emplace_back(p + "conv_w", &lp.conv_w);
        out.emplace_back(p + "conv_b", &lp.conv_b);
        out.emplace_back(p + "w_b", &lp.w_b);
        out.emplace_back(p + "w_c", &lp.w_c);
        out.emplace_back(p + "a_log", &lp.a_log);
        out.emplace_back(p + "d_skip", &lp.d_skip);
        if (m.cfg.dt_parameterization == DtParam::full) {
            out.emplace_back(p + "w_dt", &lp.w_dt);
        } else {
            out.emplace_back(p + "w_dt_down", &lp.w_dt_down);
            out.emplace_back(p + "w_dt_up", &lp.w_dt_up);
        }
        out.emplace_back(p + "b_dt", &lp.b_dt);
        out.emplace_back(p + "w_out", &lp.w_out);
        out.emplace_back(p + "norm_w", &lp.norm_w);
    }
    return out;
}

std::vector<std::pair<std::string, Tensor*>> Model::named_params() { return collect_params<Model, Tensor>(*this); }
std::vector<std::pair<std::string, const Tensor*>> Model::named_params() const {
    return collect_params<const Model, const Tensor>(*this);
}

// ---------------------------------------------------------------------------
// hook names
// ---------------------------------------------------------------------------

namespace hooks {

static std::string blk(int layer, const char* suffix) { return "blocks." + std::to_string(layer) + "." + suffix; }

std::string embed() { return "hook_embed"; }
std::string layer_input(int layer) { return blk(layer, "hook_layer_input"); }
std::string in_proj(int layer) { return blk(layer, "hook_in_proj"); }
std::string skip(int layer) { return blk(layer, "hook_skip"); }
std::string conv(int layer) { return blk(layer, "hook_conv"); }
std::string conv_slice(int layer, int tap) { return blk(layer, "hook_conv_slice.") + std::to_string(tap); }
std::string ssm_input(int layer) { return blk(layer, "hook_ssm_input"); }
std::string b_bar(int layer) { return blk(layer, "hook_B_bar"); }
std::string h(int layer, int64_t pos) { return blk(layer, "hook_h.") + std::to_string(pos); }
std::string out_proj(int layer) { return blk(layer, "hook_out_proj"); }
std::string resid_post(int layer) { return blk(layer, "hook_resid_post"); }

std::string canonical(const std::string& name) {
    auto rewrite = [&](const std::string& from, const std::string& to) -> std::optional<std::string> {
        auto pos = name.find(from);
        if (pos == std::string::npos) return std::nullopt;
        std::string out = name;
        out.replace(pos, from.size(), to);
        return out;
    };
    if (auto r = rewrite("hook_proj_out", "hook_out_proj")) return *r;
    if (auto r = rewrite("hook_layer_output", "hook_out_proj")) return *r;
    return name;
}

std::vector<std::string> canonical_names(const ModelConfig& cfg, int64_t seq_len) {
    std::vector<std::string> out;
    out.push_back(embed());
    for (int i = 0; i < cfg.n_layers; ++i) {
        out.push_back(layer_input(i));
        out.push_back(in_proj(i));
        out.push_back(skip(i));
        out.push_back(conv(i));
        out.push_back(ssm_input(i));
        out.push_back(b_bar(i));
        for (int64_t t = 0; t < seq_len; ++t) out.push_back(h(i, t));
        out.push_back(out_proj(i));
    }
    if (cfg.n_layers > 0) out.push_back(resid_post(cfg.n_layers - 1));
    return out;
}

}  // namespace hooks

// ---------------------------------------------------------------------------
// cache / registry
// ---------------------------------------------------------------------------

bool ActivationCache::has(const std::string& name) const { return acts.count(hooks::canonical(name)) > 0; }

const Tensor& ActivationCache::at(const std::string& name) const {
    auto it = acts.find(hooks::canonical(name));
    if (it == acts.end()) {
        throw std::invalid_argument("ActivationCache(" + provenance + "): no activation for hook '" + name + "'");
    }
    return it->second;
}

void HookRegistry::set(const std::string& name, HookFn fn) {
    auto [it, inserted] = fns_.emplace(hooks::canonical(name), std::move(fn));
    if (!inserted) {
        throw std::invalid_argument("HookRegistry: conflicting intervention for hook '" + name + "'");
    }
}

const HookFn* HookRegistry::find(const std::string& name) const {
    auto it = fns_.find(name);
    return it == fns_.end() ? nullptr : &it->second;
}

std::vector<std::string> HookRegistry::names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : fns_) out.push_back(k);
    return out;
}

Value ForwardPassState::live_at(const std::string& name) const {
    auto it = live.find(hooks::canonical(name));
    if (it == live.end()) throw std::invalid_argument("forward pass: no live value for hook '" + name + "'");
    return it->second;
}

// Fires a hook site: applies the registered intervention (if any), names the
// resulting node for backward hooks, and records it in the live map / cache.
static Value fire(ForwardPassState& ps, const std::string& name, Value v) {
    if (ps.hooks) {
        if (const HookFn* fn = ps.hooks->find(name)) v = (*fn)(ps, name, v);
    }
    ps.tape.name_node(v, name);
    ps.live.emplace(name, v);
    if (ps.capture) ps.capture->acts[name] = v.val();
    return v;
}

// ---------------------------------------------------------------------------
// forward building blocks
// ---------------------------------------------------------------------------

ParamLeaves make_param_leaves(Tape& tape, const Model& m) {
    ParamLeaves pl;
    pl.embedding = tape.leaf(m.embedding, "param.embedding");
    pl.norm_f = tape.leaf(m.norm_f, "param.norm_f");
    for (size_t i = 0; i < m.layers.size(); ++i) {
        const LayerParams& lp = m.layers[i];
        const std::string p = "param.layers." + std::to_string(i) + ".";
        ParamLeaves::Layer L;
        L.w_in = tape.leaf(lp.w_in, p + "w_in");
        L.w_skip = tape.leaf(lp.w_skip, p + "w_skip");
        L.conv_w = tape.leaf(lp.conv_w, p + "conv_w");
        L.conv_b = tape.leaf(lp.conv_b, p + "conv_b");
        L.w_b = tape.leaf(lp.w_b, p + "w_b");
        L.w_c = tape.leaf(lp.w_c, p + "w_c");
        L.a_log = tape.leaf(lp.a_log, p + "a_log");
        L.d_skip = tape.leaf(lp.d_skip, p + "d_skip");
        if (m.cfg.dt_parameterization == DtParam::full) {
            L.w_dt = tape.leaf(lp.w_dt, p + "w_dt");
        } else {
            L.w_dt_down = tape.leaf(lp.w_dt_down, p + "w_dt_down");
            L.w_dt_up = tape.leaf(lp.w_dt_up, p + "w_dt_up");
        }
        L.b_dt = tape.leaf(lp.b_dt, p + "b_dt");
        L.w_out = tape.leaf(lp.w_out, p + "w_out");
        L.norm_w = tape.leaf(lp.norm_w, p + "norm_w");
        pl.layers.push_back(L);
    }
    return pl;
}

Value rms_norm(Value x, Value weight, double eps) {
    const int64_t B = x.val().dim(0), L = x.val().dim(1), D = x.val().dim(2);
    Value ms = mean_axis(mul(x, x), 2, /*keepdim=*/true);
    Value r = expand(sqrt(add_scalar(ms, eps)), 2, D);
    Value w3 = expand(expand(reshape(weight, {1, 1, D}), 0, B), 1, L);
    return mul(div(x, r), w3);
}

// x: [B,L,A] times W^T for W: [O,A], giving [B,L,O]
static Value project(Value x, Value w) {
    const int64_t B = x.val().dim(0), L = x.val().dim(1), A = x.val().dim(2);
    const int64_t O = w.val().dim(0);
    Value flat = reshape(x, {B * L, A});
    return reshape(matmul(flat, transpose2d(w)), {B, L, O});
}

// Broadcast a [E] vector over [B,L,E].
static Value row_expand(Value vec, int64_t B, int64_t L) {
    const int64_t E = vec.val().dim(0);
    return expand(expand(reshape(vec, {1, 1, E}), 0, B), 1, L);
}

// Depthwise causal conv expressed as one term per filter tap. The tap at
// relative offset r multiplies the input representation from position t+r,
// exposed as hook_conv_slice.{r} so slice patches can substitute it.
static Value conv_taps(ForwardPassState& ps, int layer, const ParamLeaves::Layer& lp, Value x) {
    const int64_t B = ps.batch, L = ps.seq_len;
    const int64_t E = ps.model.cfg.d_inner, K = ps.model.cfg.conv_width;
    Value acc = row_expand(lp.conv_b, B, L);
    for (int tap = -static_cast<int>(K - 1); tap <= 0; ++tap) {
        const int64_t s = -tap;
        Value shifted;
        if (s == 0) {
            shifted = clone(x);
        } else if (s >= L) {
            shifted = ps.tape.constant(Tensor::zeros({B, L, E}));
        } else {
            Value pad = ps.tape.constant(Tensor::zeros({B, s, E}));
            shifted = concat({pad, slice(x, 1, 0, L - s)}, 1);
        }
        shifted = fire(ps, hooks::conv_slice(layer, tap), shifted);
        Value wcol = reshape(slice(lp.conv_w, 1, K - 1 + tap, K + tap), {1, 1, E});
        acc = add(acc, mul(shifted, expand(expand(wcol, 0, B), 1, L)));
    }
    return acc;
}

Value ssm_scan(ForwardPassState& ps, int layer, const ParamLeaves::Layer& lp, Value xs) {
    const ModelConfig& cfg = ps.model.cfg;
    const int64_t B = ps.batch, L = ps.seq_len, E = cfg.d_inner, N = cfg.state_size;
    Tape& tape = ps.tape;

    Value flat = reshape(xs, {B * L, E});
    Value dt_pre;
    if (cfg.dt_parameterization == DtParam::full) {
        dt_pre = matmul(flat, transpose2d(lp.w_dt));
    } else {
        dt_pre = matmul(matmul(flat, transpose2d(lp.w_dt_down)), transpose2d(lp.w_dt_up));
    }
    Value delta = softplus(add(dt_pre, expand(reshape(lp.b_dt, {1, E}), 0, B * L)));
    if (!delta.val().all_finite()) {
        throw NumericError("ssm_scan: non-finite dt at layer " + std::to_string(layer));
    }
    Value delta3 = reshape(delta, {B, L, E});

    Value bt = reshape(matmul(flat, transpose2d(lp.w_b)), {B, L, N});
    Value ct = reshape(matmul(flat, transpose2d(lp.w_c)), {B, L, N});

    Value d4 = expand(reshape(delta3, {B, L, E, 1}), 3, N);
    Value a4 = expand(expand(reshape(exp(lp.a_log), {1, 1, E, N}), 0, B), 1, L);
    Value a_bar = exp(neg(mul(d4, a4)));  // in (0,1) whenever dt > 0

    Value b4 = expand(reshape(bt, {B, L, 1, N}), 2, E);
    Value b_bar = fire(ps, hooks::b_bar(layer), mul(d4, b4));

    Value h = tape.constant(Tensor::zeros({B, E, N}));
    Value dexp = expand(reshape(lp.d_skip, {1, E}), 0, B);
    std::vector<Value> ys;
    ys.reserve(static_cast<size_t>(L));
    for (int64_t t = 0; t < L; ++t) {
        Value abar_t = reshape(slice(a_bar, 1, t, t + 1), {B, E, N});
        Value bbar_t = reshape(slice(b_bar, 1, t, t + 1), {B, E, N});
        Value x_t = reshape(slice(xs, 1, t, t + 1), {B, E});
        Value x4 = expand(reshape(x_t, {B, E, 1}), 2, N);
        h = add(mul(abar_t, h), mul(bbar_t, x4));
        h = fire(ps, hooks::h(layer, t), h);
        if (!h.val().all_finite()) {
            throw NumericError("ssm_scan: non-finite hidden state at layer " + std::to_string(layer) + " position " +
                               std::to_string(t));
        }
        Value c_t = expand(reshape(slice(ct, 1, t, t + 1), {B, 1, N}), 1, E);
        Value y_t = sum_axis(mul(c_t, h), 2);
        y_t = add(y_t, mul(dexp, x_t));
        ys.push_back(reshape(y_t, {B, 1, E}));
    }
    return concat(ys, 1);
}

Value layer_forward(ForwardPassState& ps, int layer, const ParamLeaves::Layer& lp, Value resid) {
    const ModelConfig& cfg = ps.model.cfg;
    // The hook exposes the pre-normalization residual; patches act on a clone
    // so downstream layers still see the unmodified stream.
    Value layer_in = fire(ps, hooks::layer_input(layer), clone(resid));
    Value xn = cfg.layer_norms ? rms_norm(layer_in, lp.norm_w, cfg.norm_eps) : layer_in;
    Value x = fire(ps, hooks::in_proj(layer), project(xn, lp.w_in));
    Value sk = fire(ps, hooks::skip(layer), project(xn, lp.w_skip));
    Value cv = fire(ps, hooks::conv(layer), conv_taps(ps, layer, lp, x));
    Value xs = fire(ps, hooks::ssm_input(layer), silu(cv));
    Value y = ssm_scan(ps, layer, lp, xs);
    Value gated = mul(y, silu(sk));
    Value out = fire(ps, hooks::out_proj(layer), project(gated, lp.w_out));
    return add(resid, out);
}

ForwardResult model_forward(Tape& tape, const Model& m, const std::vector<int64_t>& tokens, int64_t batch, int64_t len,
                            HookRegistry* hooks_in, ActivationCache* capture) {
    m.cfg.validate();
    if (static_cast<int64_t>(tokens.size()) != batch * len) {
        throw std::invalid_argument("model_forward: token count " + std::to_string(tokens.size()) +
                                    " does not match batch " + std::to_string(batch) + " x len " + std::to_string(len));
    }
    ParamLeaves pl = make_param_leaves(tape, m);
    ForwardPassState ps{tape, m, batch, len, hooks_in, capture, {}};
    Value emb = fire(ps, hooks::embed(), gather_rows(pl.embedding, tokens, batch, len));
    Value resid = emb;
    for (int i = 0; i < m.cfg.n_layers; ++i) {
        resid = layer_forward(ps, i, pl.layers[i], resid);
    }
    if (m.cfg.n_layers > 0) resid = fire(ps, hooks::resid_post(m.cfg.n_layers - 1), resid);
    Value xf = m.cfg.final_norm ? rms_norm(resid, pl.norm_f, m.cfg.norm_eps) : resid;
    Value logits = project(xf, pl.embedding);
    return ForwardResult{logits, resid};
}

ActivationCache run_and_cache(const Model& m, const std::vector<int64_t>& tokens, std::string provenance,
                              HookRegistry* hooks_in) {
    Tape tape(false);
    ActivationCache cache;
    cache.provenance = std::move(provenance);
    model_forward(tape, m, tokens, 1, static_cast<int64_t>(tokens.size()), hooks_in, &cache);
    return cache;
}

Tensor final_logits(const Model& m, const std::vector<int64_t>& tokens, HookRegistry* hooks_in) {
    Tape tape(false);
    const int64_t len = static_cast<int64_t>(tokens.size());
    ForwardResult r = model_forward(tape, m, tokens, 1, len, hooks_in, nullptr);
    const Tensor& lg = r.logits.val();
    Tensor out({m.cfg.vocab_size});
    for (int64_t v = 0; v < m.cfg.vocab_size; ++v) out[v] = lg.at({0, len - 1, v});
    return out;
}

}  // namespace ssmc
