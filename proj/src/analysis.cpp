#include "ssmc/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <random>
#include <set>

#include "ssmc/checkpoint.hpp"
#include "ssmc/io_util.hpp"

using nlohmann::json;

namespace ssmc {

CosineLensMatrix cosine_lens(const Model& m, const std::vector<int64_t>& tokens, int layer,
                             std::optional<int64_t> channel) {
    if (layer < 0 || layer >= m.cfg.n_layers) throw std::invalid_argument("cosine_lens: layer out of range");
    if (channel && (*channel < 0 || *channel >= m.cfg.d_inner)) {
        throw std::invalid_argument("cosine_lens: channel out of range");
    }
    ActivationCache cache = run_and_cache(m, tokens, "clean");
    const Tensor& b_bar = cache.at(hooks::b_bar(layer));     // [1,L,E,N]
    const Tensor& xs = cache.at(hooks::ssm_input(layer));    // [1,L,E]
    const int64_t L = xs.dim(1), E = xs.dim(2), N = m.cfg.state_size;

    auto flat = [&](const std::function<double(int64_t, int64_t)>& get) {
        std::vector<double> v;
        if (channel) {
            v.resize(static_cast<size_t>(N));
            for (int64_t n = 0; n < N; ++n) v[static_cast<size_t>(n)] = get(*channel, n);
        } else {
            v.resize(static_cast<size_t>(E * N));
            for (int64_t e = 0; e < E; ++e) {
                for (int64_t n = 0; n < N; ++n) v[static_cast<size_t>(e * N + n)] = get(e, n);
            }
        }
        return v;
    };

    CosineLensMatrix out;
    out.seq_len = L;
    std::vector<std::vector<double>> contribs, states;
    for (int64_t i = 0; i < L; ++i) {
        contribs.push_back(flat([&](int64_t e, int64_t n) { return b_bar.at({0, i, e, n}) * xs.at({0, i, e}); }));
        const Tensor& h = cache.at(hooks::h(layer, i));  // [1,E,N]
        states.push_back(flat([&](int64_t e, int64_t n) { return h.at({0, e, n}); }));
    }
    auto norm = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x * x;
        return std::sqrt(s);
    };
    for (int64_t i = 0; i < L; ++i) {
        std::vector<double> row(static_cast<size_t>(L));
        const double ni = norm(contribs[static_cast<size_t>(i)]);
        for (int64_t j = 0; j < L; ++j) {
            const double nj = norm(states[static_cast<size_t>(j)]);
            if (ni == 0.0 || nj == 0.0) {
                row[static_cast<size_t>(j)] = 0.0;
                ++out.flagged_zero_norm;
                continue;
            }
            double dot = 0.0;
            const auto& a = contribs[static_cast<size_t>(i)];
            const auto& b = states[static_cast<size_t>(j)];
            for (size_t k = 0; k < a.size(); ++k) dot += a[k] * b[k];
            row[static_cast<size_t>(j)] = dot / (ni * nj);
        }
        out.values.push_back(std::move(row));
    }
    return out;
}

// ---------------------------------------------------------------------------
// name averages
// ---------------------------------------------------------------------------

bool NameAverageStore::has(int64_t name_tok, int slot) const { return means.count({name_tok, slot}) > 0; }

const Tensor& NameAverageStore::mean(int64_t name_tok, int slot) const {
    auto it = means.find({name_tok, slot});
    if (it == means.end()) {
        throw std::invalid_argument("NameAverageStore: no entry for token " + std::to_string(name_tok) + " at slot n" +
                                    std::to_string(slot + 1));
    }
    return it->second;
}

NameAverageStore build_name_averages(const Model& m, const std::vector<PromptPair>& dataset, int layer,
                                     int min_samples) {
    if (layer < 0 || layer >= m.cfg.n_layers) throw std::invalid_argument("build_name_averages: layer out of range");
    NameAverageStore store;
    store.layer = layer;
    store.min_samples = min_samples;
    std::map<std::pair<int64_t, int>, Tensor> sums;
    std::map<std::pair<int64_t, int>, int> counts;
    for (const auto& pair : dataset) {
        ActivationCache cache = run_and_cache(m, pair.clean_tokens, "clean");
        const Tensor& xs = cache.at(hooks::ssm_input(layer));  // [1,L,E]
        const int64_t E = xs.dim(2);
        for (int slot = 0; slot < 5; ++slot) {
            const int64_t p = pair.pos("n" + std::to_string(slot + 1)) + 1;  // one after the name
            Tensor vec({E});
            for (int64_t e = 0; e < E; ++e) vec[e] = xs.at({0, p, e});
            const std::pair<int64_t, int> key{pair.clean_name_toks[static_cast<size_t>(slot)], slot};
            auto it = sums.find(key);
            if (it == sums.end()) {
                sums.emplace(key, std::move(vec));
            } else {
                t_add_inplace(it->second, vec);
            }
            counts[key] += 1;
        }
    }
    for (auto& [key, sum] : sums) {
        const int n = counts.at(key);
        if (n < min_samples) {
            store.excluded.push_back(key);
            continue;
        }
        store.means.emplace(key, t_scale(sum, 1.0 / static_cast<double>(n)));
        store.counts[key] = n;
    }
    return store;
}

void NameAverageStore::save(const std::string& path) const {
    TensorArchive ar;
    json index;
    index["layer"] = layer;
    index["min_samples"] = min_samples;
    json entries = json::array();
    for (const auto& [key, mean] : means) {
        const std::string name = "mean." + std::to_string(key.first) + "." + std::to_string(key.second);
        ar.tensors.emplace(name, mean);
        entries.push_back({{"token", key.first}, {"slot", key.second}, {"count", counts.at(key)}});
    }
    index["entries"] = entries;
    ar.metadata["index"] = index.dump();
    ar.metadata["format"] = "ssmc-name-averages-v1";
    ar.save(path);
}

NameAverageStore NameAverageStore::load(const std::string& path) {
    TensorArchive ar = TensorArchive::load(path);
    auto it = ar.metadata.find("index");
    if (it == ar.metadata.end()) throw std::runtime_error("name average store lacks its index: " + path);
    json index = json::parse(it->second);
    NameAverageStore store;
    store.layer = index.at("layer").get<int>();
    store.min_samples = index.at("min_samples").get<int>();
    for (const auto& e : index.at("entries")) {
        const int64_t tok = e.at("token").get<int64_t>();
        const int slot = e.at("slot").get<int>();
        const std::string name = "mean." + std::to_string(tok) + "." + std::to_string(slot);
        store.means.emplace(std::make_pair(tok, slot), ar.at(name));
        store.counts[{tok, slot}] = e.at("count").get<int>();
    }
    return store;
}

// ---------------------------------------------------------------------------
// steering
// ---------------------------------------------------------------------------

SteerResult steer(const Model& m, const PairContext& ctx, int dest_slot, int source_slot, int64_t target_name_tok,
                  SteerMethod method, const NameAverageStore& store) {
    if (dest_slot < 0 || dest_slot > 4 || source_slot < 0 || source_slot > 4) {
        throw std::invalid_argument("steer: slots must be 0..4");
    }
    const PromptPair& pair = ctx.pair;
    const int64_t cur_tok = pair.clean_name_toks[static_cast<size_t>(dest_slot)];

    SteerResult res;
    if (dest_slot < 3) {
        // overwrite the indirect object: the pair's answer must live here
        if (cur_tok != pair.answer_tok) {
            throw std::invalid_argument("steer: destination slot n" + std::to_string(dest_slot + 1) +
                                        " does not hold the answer name for this pair");
        }
        res.expected_tok = target_name_tok;
        res.original_tok = pair.answer_tok;
    } else {
        // writing the answer name into a second-sentence slot makes the
        // displaced name the expected output
        if (target_name_tok != pair.answer_tok) {
            throw std::invalid_argument("steer: fourth/fifth position substitutions write the correct answer");
        }
        res.expected_tok = cur_tok;
        res.original_tok = pair.answer_tok;
    }

    const Tensor& mu_target = store.mean(target_name_tok, source_slot);
    const int64_t p = pair.pos("n" + std::to_string(dest_slot + 1)) + 1;
    const std::string hook = hooks::ssm_input(store.layer);

    PatchPlan plan;
    Intervention iv;
    iv.hook = hook;
    iv.positions = PositionSel::at({p});
    if (method == SteerMethod::replace) {
        iv.mode = PatchMode::replace_with;
        Tensor full = ctx.clean.at(hook);
        const int64_t E = full.dim(2);
        for (int64_t e = 0; e < E; ++e) full.at({0, p, e}) = mu_target[e];
        iv.value = std::move(full);
    } else {
        iv.mode = PatchMode::subtract_add;
        iv.sub_value = store.mean(cur_tok, source_slot);
        iv.add_value = mu_target;
    }
    plan.add(iv);

    Tensor row;
    run_with_plan_single(m, ctx, plan, MetricKind::logit_diff, nullptr, nullptr, &row);
    res.success = row[res.expected_tok] > row[res.original_tok];
    res.logits_row = std::move(row);
    return res;
}

SubstitutionGrid substitution_grid(const Model& m, const std::vector<PairContext>& ctxs, const NameAverageStore& store,
                                   SteerMethod method, const Lexicon& lex, const Tokenizer& tok, uint64_t seed) {
    SubstitutionGrid grid;
    grid.rate.assign(5, std::vector<double>(5, 0.0));
    grid.attempts.assign(5, std::vector<int>(5, 0));
    std::vector<std::vector<int>> hits(5, std::vector<int>(5, 0));
    std::mt19937_64 rng(seed);

    for (const auto& ctx : ctxs) {
        const PromptPair& pair = ctx.pair;
        std::set<int64_t> prompt_names(pair.clean_name_toks.begin(), pair.clean_name_toks.end());
        for (int dest = 0; dest < 5; ++dest) {
            int64_t target;
            if (dest < 3) {
                if (pair.clean_name_toks[static_cast<size_t>(dest)] != pair.answer_tok) continue;
                // a fresh name, never the current one (that row is a 0-change control)
                std::vector<int64_t> options;
                for (const auto& n : lex.names) {
                    const int64_t t = tok.id(n);
                    if (!prompt_names.count(t)) options.push_back(t);
                }
                if (options.empty()) continue;
                target = options[rng() % options.size()];
            } else {
                target = pair.answer_tok;
            }
            for (int src = 0; src < 5; ++src) {
                const int64_t cur = pair.clean_name_toks[static_cast<size_t>(dest)];
                if (!store.has(target, src)) continue;
                if (method == SteerMethod::subtract_add && !store.has(cur, src)) continue;
                SteerResult r = steer(m, ctx, dest, src, target, method, store);
                grid.attempts[static_cast<size_t>(src)][static_cast<size_t>(dest)] += 1;
                if (r.success) hits[static_cast<size_t>(src)][static_cast<size_t>(dest)] += 1;
            }
        }
    }
    for (int s = 0; s < 5; ++s) {
        for (int d = 0; d < 5; ++d) {
            const int a = grid.attempts[static_cast<size_t>(s)][static_cast<size_t>(d)];
            grid.rate[static_cast<size_t>(s)][static_cast<size_t>(d)] =
                a > 0 ? static_cast<double>(hits[static_cast<size_t>(s)][static_cast<size_t>(d)]) / a : 0.0;
        }
    }
    return grid;
}

}  // namespace ssmc
