#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace ssmc {

// ---------------------------------------------------------------------------
// word-level tokenizer
// ---------------------------------------------------------------------------

class Tokenizer {
public:
    static Tokenizer from_words(std::vector<std::string> words);
    static Tokenizer load(const std::string& path);  // newline-delimited UTF-8
    void save(const std::string& path) const;

    int64_t size() const { return static_cast<int64_t>(vocab_.size()); }
    int64_t id(const std::string& word) const;
    bool has(const std::string& word) const { return ids_.count(word) > 0; }
    const std::string& word(int64_t id) const;
    std::vector<int64_t> encode(const std::vector<std::string>& words) const;
    std::string detokenize(const std::vector<int64_t>& ids) const;  // space-joined

private:
    std::vector<std::string> vocab_;
    std::map<std::string, int64_t> ids_;
};

struct Lexicon {
    std::vector<std::string> names;
    std::vector<std::string> places;
    std::vector<std::string> objects;

    static Lexicon defaults();  // 20 names, 8 places, 8 objects
    std::vector<std::string> all_words() const;
};

// Template words plus the BOS marker that occupies pos0.
Tokenizer default_tokenizer(const Lexicon& lex);

// ---------------------------------------------------------------------------
// templates
// ---------------------------------------------------------------------------

enum class TemplateId { then, afterwards, when, friends };

std::string template_name(TemplateId id);
std::optional<TemplateId> template_from_name(const std::string& name);

struct PromptTemplate {
    TemplateId id;
    // literal tokens with slot markers [N1]..[N5], [PLACE], [OBJECT]
    std::vector<std::string> pattern;

    std::array<int64_t, 5> name_positions() const;
    static const std::vector<PromptTemplate>& all();
    static const PromptTemplate& get(TemplateId id);
};

// The templates whose rendered name token indices coincide (afterwards, when,
// friends); "then" carries an extra comma that shifts everything by one.
std::vector<TemplateId> shared_position_templates();

// ---------------------------------------------------------------------------
// corruptions
// ---------------------------------------------------------------------------

// A corruption replaces the name in exactly one slot and changes the answer.
// Classes by replaced slot: 1..3 replace the answer name at n1/n2/n3 with a
// fresh name; 4 overwrites n5 with the answer name; 5 overwrites n4 with it.
struct CorruptionSpec {
    int cls = 0;                      // 1..5
    int answer_pos = 0;               // 0..2: which first-sentence slot holds the clean answer
    std::array<int, 5> clean_slots;   // name indices 0..3 per slot n1..n5
    std::array<int, 5> corr_slots;
    int clean_ans = 0, corr_ans = 0;  // name indices

    int replaced_slot() const;        // 0..4
    void check() const;               // validates the class invariants
    std::string pattern_string() const;  // "ABC AB C -> ABD AB D" style, letters by name index
};

// Classes 1-3 pin answer_pos to cls-1; classes 4-5 accept any answer_pos.
CorruptionSpec make_corruption(int cls, int answer_pos);
bool corruption_compatible(int cls, int answer_pos);

// ---------------------------------------------------------------------------
// prompt pairs
// ---------------------------------------------------------------------------

struct PromptPair {
    std::vector<int64_t> clean_tokens;
    std::vector<int64_t> corrupted_tokens;
    int64_t answer_tok = -1;
    int64_t corrupted_answer_tok = -1;
    std::map<std::string, int64_t> positions;  // n1..n5, out, pos{k} -> token index
    TemplateId template_id = TemplateId::then;
    int corruption_id = 0;
    std::array<int64_t, 5> clean_name_toks{};   // name token at each slot
    std::array<int64_t, 5> corr_name_toks{};

    int64_t pos(const std::string& label) const;
    int64_t out_pos() const { return pos("out"); }
    int64_t seq_len() const { return static_cast<int64_t>(clean_tokens.size()); }
    void check() const;  // invariants: equal length, same name positions, answer change
};

struct GenOptions {
    std::vector<TemplateId> templates = {TemplateId::then, TemplateId::afterwards, TemplateId::when,
                                         TemplateId::friends};
    std::vector<int> corruption_classes = {1, 2, 3, 4, 5};
    int count = 80;
    uint64_t seed = 0;
};

std::vector<PromptPair> generate_batch(const Tokenizer& tok, const Lexicon& lex, const GenOptions& opt);

// Renders one concrete pair; `names` supplies the four distinct name strings
// (indices 0..3 in the CorruptionSpec).
PromptPair render_pair(const Tokenizer& tok, const PromptTemplate& tpl, const CorruptionSpec& spec,
                       const std::array<std::string, 4>& names, const std::string& place, const std::string& object);

// Label -> token index for a rendered template: n1..n5 for names, out for the
// final token, pos{k} for everything else.
std::map<std::string, int64_t> semantic_positions(const PromptTemplate& tpl);

// JSONL round-trip for batches.
std::string pairs_to_jsonl(const std::vector<PromptPair>& pairs);
std::vector<PromptPair> pairs_from_jsonl(const std::string& text);

}  // namespace ssmc
