#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ssmc/patching.hpp"

namespace ssmc {

// Cosine similarity between each token's contribution to the hidden state
// (B_bar_i * x_i, flattened over [E,N]) and the hidden state h_j. Saliency
// only: this lens is not causal and all outputs label it as such.
struct CosineLensMatrix {
    std::vector<std::vector<double>> values;  // [i: contribution][j: hidden state]
    int flagged_zero_norm = 0;                // entries forced to 0 by a zero norm
    int64_t seq_len = 0;
};

// channel: restrict the cosine to one channel's [N] block instead of the
// flattened [E*N] vector.
CosineLensMatrix cosine_lens(const Model& m, const std::vector<int64_t>& tokens, int layer,
                             std::optional<int64_t> channel = std::nullopt);

// ---------------------------------------------------------------------------
// name averages and steering
// ---------------------------------------------------------------------------

// Mean hook_ssm_input vectors at token position name_pos+1 (the shifting
// behavior puts the name representation one after the name), keyed by
// (name token, slot n1..n5).
struct NameAverageStore {
    int layer = 0;
    int min_samples = 1;
    std::map<std::pair<int64_t, int>, Tensor> means;  // [E]
    std::map<std::pair<int64_t, int>, int> counts;
    std::vector<std::pair<int64_t, int>> excluded;  // undersampled entries

    bool has(int64_t name_tok, int slot) const;
    const Tensor& mean(int64_t name_tok, int slot) const;  // error on missing entry

    void save(const std::string& path) const;  // tensor archive + JSON index metadata
    static NameAverageStore load(const std::string& path);
};

NameAverageStore build_name_averages(const Model& m, const std::vector<PromptPair>& dataset, int layer,
                                     int min_samples = 1);

enum class SteerMethod { replace, subtract_add };

struct SteerResult {
    Tensor logits_row;       // [V] at the answer position
    bool success = false;    // logit(expected answer after steering) > logit(original)
    int64_t expected_tok = -1;
    int64_t original_tok = -1;
};

// Writes the average of `target_name_tok` taken at source slot `source_slot`
// into the representation at destination slot `dest_slot` (token position
// name_pos+1). For dest slots n1..n3 the pair's answer must sit at that slot
// and the expected output becomes the target name; for n4/n5 the answer's own
// average is written and the displaced name becomes the expected output.
SteerResult steer(const Model& m, const PairContext& ctx, int dest_slot, int source_slot, int64_t target_name_tok,
                  SteerMethod method, const NameAverageStore& store);

// Success proportions per (source slot, destination slot).
struct SubstitutionGrid {
    std::vector<std::vector<double>> rate;  // [source][dest]
    std::vector<std::vector<int>> attempts;
};

SubstitutionGrid substitution_grid(const Model& m, const std::vector<PairContext>& ctxs, const NameAverageStore& store,
                                   SteerMethod method, const Lexicon& lex, const Tokenizer& tok, uint64_t seed = 0);

}  // namespace ssmc
