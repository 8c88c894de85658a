#include "ssmc/ioi.hpp"

#include <algorithm>
#include <json.hpp>
#include <set>
#include <sstream>
#include <stdexcept>

#include "ssmc/io_util.hpp"

using nlohmann::json;

namespace ssmc {

// ---------------------------------------------------------------------------
// tokenizer
// ---------------------------------------------------------------------------

Tokenizer Tokenizer::from_words(std::vector<std::string> words) {
    Tokenizer t;
    t.vocab_ = std::move(words);
    for (size_t i = 0; i < t.vocab_.size(); ++i) {
        auto [it, inserted] = t.ids_.emplace(t.vocab_[i], static_cast<int64_t>(i));
        if (!inserted) throw std::invalid_argument("Tokenizer: duplicate word '" + t.vocab_[i] + "'");
    }
    return t;
}

Tokenizer Tokenizer::load(const std::string& path) {
    std::istringstream in(read_file(path));
    std::vector<std::string> words;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) words.push_back(line);
    }
    return from_words(std::move(words));
}

void Tokenizer::save(const std::string& path) const {
    std::string out;
    for (const auto& w : vocab_) {
        out += w;
        out += '\n';
    }
    atomic_write_file(path, out);
}

int64_t Tokenizer::id(const std::string& word) const {
    auto it = ids_.find(word);
    if (it == ids_.end()) throw std::invalid_argument("Tokenizer: unknown word '" + word + "'");
    return it->second;
}

const std::string& Tokenizer::word(int64_t id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("Tokenizer: id " + std::to_string(id) + " out of range");
    return vocab_[static_cast<size_t>(id)];
}

std::vector<int64_t> Tokenizer::encode(const std::vector<std::string>& words) const {
    std::vector<int64_t> out;
    out.reserve(words.size());
    for (const auto& w : words) out.push_back(id(w));
    return out;
}

std::string Tokenizer::detokenize(const std::vector<int64_t>& ids) const {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += word(ids[i]);
    }
    return out;
}

Lexicon Lexicon::defaults() {
    Lexicon lex;
    lex.names = {"Alice", "Bob",  "Carol", "David", "Emma", "Frank", "Grace", "Henry", "Iris", "Jack",
                 "Kate",  "Liam", "Mary",  "Noah",  "Olivia", "Peter", "Quinn", "Rose", "Sam",  "Tina"};
    lex.places = {"park", "store", "office", "school", "beach", "library", "garden", "market"};
    lex.objects = {"ring", "book", "drink", "ball", "necklace", "letter", "flower", "basket"};
    return lex;
}

std::vector<std::string> Lexicon::all_words() const {
    std::vector<std::string> out = names;
    out.insert(out.end(), places.begin(), places.end());
    out.insert(out.end(), objects.begin(), objects.end());
    return out;
}

Tokenizer default_tokenizer(const Lexicon& lex) {
    std::vector<std::string> words = {"<bos>", "Then", "Afterwards", "When", "Friends", ",",  "and", "went",
                                      "to",    "the",  "arrived",    "at",   ".",       "gave", "a"};
    for (const auto& w : lex.all_words()) words.push_back(w);
    return Tokenizer::from_words(std::move(words));
}

// ---------------------------------------------------------------------------
// templates
// ---------------------------------------------------------------------------

std::string template_name(TemplateId id) {
    switch (id) {
        case TemplateId::then: return "then";
        case TemplateId::afterwards: return "afterwards";
        case TemplateId::when: return "when";
        case TemplateId::friends: return "friends";
    }
    return "?";
}

std::optional<TemplateId> template_from_name(const std::string& name) {
    for (TemplateId id : {TemplateId::then, TemplateId::afterwards, TemplateId::when, TemplateId::friends}) {
        if (template_name(id) == name) return id;
    }
    return std::nullopt;
}

const std::vector<PromptTemplate>& PromptTemplate::all() {
    static const std::vector<PromptTemplate> tpls = {
        {TemplateId::then,
         {"<bos>", "Then", ",", "[N1]", ",", "[N2]", "and", "[N3]", "went", "to", "the", "[PLACE]", ".", "[N4]", "and",
          "[N5]", "gave", "a", "[OBJECT]", "to"}},
        {TemplateId::afterwards,
         {"<bos>", "Afterwards", "[N1]", ",", "[N2]", "and", "[N3]", "went", "to", "the", "[PLACE]", ".", "[N4]",
          "and", "[N5]", "gave", "a", "[OBJECT]", "to"}},
        {TemplateId::when,
         {"<bos>", "When", "[N1]", ",", "[N2]", "and", "[N3]", "arrived", "at", "the", "[PLACE]", ",", "[N4]", "and",
          "[N5]", "gave", "a", "[OBJECT]", "to"}},
        {TemplateId::friends,
         {"<bos>", "Friends", "[N1]", ",", "[N2]", "and", "[N3]", "went", "to", "the", "[PLACE]", ".", "[N4]", "and",
          "[N5]", "gave", "a", "[OBJECT]", "to"}},
    };
    return tpls;
}

const PromptTemplate& PromptTemplate::get(TemplateId id) {
    for (const auto& t : all()) {
        if (t.id == id) return t;
    }
    throw std::logic_error("unknown template");
}

std::array<int64_t, 5> PromptTemplate::name_positions() const {
    std::array<int64_t, 5> out{};
    int found = 0;
    for (size_t i = 0; i < pattern.size(); ++i) {
        if (pattern[i].size() == 4 && pattern[i][0] == '[' && pattern[i][1] == 'N') {
            out[static_cast<size_t>(pattern[i][2] - '1')] = static_cast<int64_t>(i);
            ++found;
        }
    }
    if (found != 5) throw std::logic_error("template must have exactly five name slots");
    return out;
}

std::vector<TemplateId> shared_position_templates() {
    return {TemplateId::afterwards, TemplateId::when, TemplateId::friends};
}

// ---------------------------------------------------------------------------
// corruptions
// ---------------------------------------------------------------------------

bool corruption_compatible(int cls, int answer_pos) {
    if (cls >= 1 && cls <= 3) return answer_pos == cls - 1;
    return cls == 4 || cls == 5;
}

CorruptionSpec make_corruption(int cls, int answer_pos) {
    if (cls < 1 || cls > 5) throw std::invalid_argument("corruption class must be 1..5");
    if (answer_pos < 0 || answer_pos > 2) throw std::invalid_argument("answer_pos must be 0..2");
    if (!corruption_compatible(cls, answer_pos)) {
        throw std::invalid_argument("corruption class " + std::to_string(cls) + " requires the answer at n" +
                                    std::to_string(cls));
    }
    CorruptionSpec s;
    s.cls = cls;
    s.answer_pos = answer_pos;
    // first sentence introduces names 0,1,2; the two non-answer names repeat in
    // first-appearance order as n4,n5
    std::array<int, 2> repeated{};
    int r = 0;
    for (int i = 0; i < 3; ++i) {
        s.clean_slots[static_cast<size_t>(i)] = i;
        if (i != answer_pos) repeated[static_cast<size_t>(r++)] = i;
    }
    s.clean_slots[3] = repeated[0];
    s.clean_slots[4] = repeated[1];
    s.clean_ans = answer_pos;
    s.corr_slots = s.clean_slots;
    if (cls <= 3) {
        s.corr_slots[static_cast<size_t>(answer_pos)] = 3;  // fresh name
        s.corr_ans = 3;
    } else if (cls == 4) {
        s.corr_slots[4] = s.clean_ans;      // answer name displaces n5
        s.corr_ans = s.clean_slots[4];      // displaced name becomes the answer
    } else {
        s.corr_slots[3] = s.clean_ans;      // answer name displaces n4
        s.corr_ans = s.clean_slots[3];
    }
    s.check();
    return s;
}

int CorruptionSpec::replaced_slot() const {
    for (int i = 0; i < 5; ++i) {
        if (clean_slots[static_cast<size_t>(i)] != corr_slots[static_cast<size_t>(i)]) return i;
    }
    throw std::logic_error("corruption replaces no slot");
}

void CorruptionSpec::check() const {
    int changed = 0;
    for (int i = 0; i < 5; ++i) {
        if (clean_slots[static_cast<size_t>(i)] != corr_slots[static_cast<size_t>(i)]) ++changed;
    }
    if (changed != 1) throw std::logic_error("corruption must replace exactly one name slot");
    if (clean_ans == corr_ans) throw std::logic_error("corruption must change the answer");
    // both sides must be well-formed IOI patterns
    auto well_formed = [](const std::array<int, 5>& slots, int ans) {
        std::set<int> first(slots.begin(), slots.begin() + 3);
        if (first.size() != 3) return false;
        if (slots[3] == slots[4]) return false;
        if (!first.count(slots[3]) || !first.count(slots[4])) return false;
        for (int i = 0; i < 3; ++i) {
            if (slots[static_cast<size_t>(i)] != slots[3] && slots[static_cast<size_t>(i)] != slots[4]) {
                return slots[static_cast<size_t>(i)] == ans;
            }
        }
        return false;
    };
    if (!well_formed(clean_slots, clean_ans)) throw std::logic_error("clean pattern is not a valid IOI prompt");
    if (!well_formed(corr_slots, corr_ans)) throw std::logic_error("corrupted pattern is not a valid IOI prompt");
}

std::string CorruptionSpec::pattern_string() const {
    auto letters = [](const std::array<int, 5>& slots, int ans) {
        std::string s;
        for (int i = 0; i < 3; ++i) s += static_cast<char>('A' + slots[static_cast<size_t>(i)]);
        s += ' ';
        s += static_cast<char>('A' + slots[3]);
        s += static_cast<char>('A' + slots[4]);
        s += ' ';
        s += static_cast<char>('A' + ans);
        return s;
    };
    return letters(clean_slots, clean_ans) + " -> " + letters(corr_slots, corr_ans);
}

// ---------------------------------------------------------------------------
// rendering and generation
// ---------------------------------------------------------------------------

std::map<std::string, int64_t> semantic_positions(const PromptTemplate& tpl) {
    std::map<std::string, int64_t> out;
    auto npos = tpl.name_positions();
    for (int i = 0; i < 5; ++i) out["n" + std::to_string(i + 1)] = npos[static_cast<size_t>(i)];
    const int64_t last = static_cast<int64_t>(tpl.pattern.size()) - 1;
    out["out"] = last;
    for (int64_t p = 0; p < last; ++p) {
        bool is_name = false;
        for (int i = 0; i < 5; ++i) is_name |= (npos[static_cast<size_t>(i)] == p);
        if (!is_name) out["pos" + std::to_string(p)] = p;
    }
    return out;
}

PromptPair render_pair(const Tokenizer& tok, const PromptTemplate& tpl, const CorruptionSpec& spec,
                       const std::array<std::string, 4>& names, const std::string& place, const std::string& object) {
    for (const auto& n : names) {
        if (n.find(' ') != std::string::npos || !tok.has(n)) {
            throw std::invalid_argument("name '" + n + "' is not a single token under the active tokenizer");
        }
    }
    for (int i = 0; i < 4; ++i) {
        for (int j = i + 1; j < 4; ++j) {
            if (names[static_cast<size_t>(i)] == names[static_cast<size_t>(j)]) {
                throw std::invalid_argument("names within one prompt must be distinct");
            }
        }
    }
    auto render = [&](const std::array<int, 5>& slots) {
        std::vector<std::string> words;
        int slot = 0;
        for (const auto& w : tpl.pattern) {
            if (w.size() == 4 && w[0] == '[' && w[1] == 'N') {
                words.push_back(names[static_cast<size_t>(slots[static_cast<size_t>(slot++)])]);
            } else if (w == "[PLACE]") {
                words.push_back(place);
            } else if (w == "[OBJECT]") {
                words.push_back(object);
            } else {
                words.push_back(w);
            }
        }
        return tok.encode(words);
    };

    PromptPair pair;
    pair.template_id = tpl.id;
    pair.corruption_id = spec.cls;
    pair.clean_tokens = render(spec.clean_slots);
    pair.corrupted_tokens = render(spec.corr_slots);
    pair.answer_tok = tok.id(names[static_cast<size_t>(spec.clean_ans)]);
    pair.corrupted_answer_tok = tok.id(names[static_cast<size_t>(spec.corr_ans)]);
    pair.positions = semantic_positions(tpl);
    for (int i = 0; i < 5; ++i) {
        pair.clean_name_toks[static_cast<size_t>(i)] = tok.id(names[static_cast<size_t>(spec.clean_slots[static_cast<size_t>(i)])]);
        pair.corr_name_toks[static_cast<size_t>(i)] = tok.id(names[static_cast<size_t>(spec.corr_slots[static_cast<size_t>(i)])]);
    }
    pair.check();
    return pair;
}

int64_t PromptPair::pos(const std::string& label) const {
    auto it = positions.find(label);
    if (it == positions.end()) throw std::invalid_argument("PromptPair: no position label '" + label + "'");
    return it->second;
}

void PromptPair::check() const {
    if (clean_tokens.size() != corrupted_tokens.size()) {
        throw std::logic_error("PromptPair: clean and corrupted prompts differ in length");
    }
    if (answer_tok == corrupted_answer_tok) throw std::logic_error("PromptPair: corruption must change the answer");
    for (int i = 0; i < 5; ++i) {
        const int64_t p = pos("n" + std::to_string(i + 1));
        if (clean_name_toks[static_cast<size_t>(i)] != clean_tokens[static_cast<size_t>(p)]) {
            throw std::logic_error("PromptPair: clean name slot mismatch");
        }
        if (corr_name_toks[static_cast<size_t>(i)] != corrupted_tokens[static_cast<size_t>(p)]) {
            throw std::logic_error("PromptPair: corrupted name slot mismatch");
        }
    }
}

std::vector<PromptPair> generate_batch(const Tokenizer& tok, const Lexicon& lex, const GenOptions& opt) {
    if (opt.templates.empty() || opt.corruption_classes.empty()) {
        throw std::invalid_argument("generate_batch: empty template or corruption filter");
    }
    if (lex.names.size() < 4) throw std::invalid_argument("generate_batch: need at least 4 names");
    std::mt19937_64 rng(opt.seed);
    std::vector<PromptPair> out;
    out.reserve(static_cast<size_t>(opt.count));
    std::uniform_int_distribution<size_t> tpl_dist(0, opt.templates.size() - 1);
    std::uniform_int_distribution<size_t> cls_dist(0, opt.corruption_classes.size() - 1);
    std::uniform_int_distribution<int> pos_dist(0, 2);
    std::uniform_int_distribution<size_t> place_dist(0, lex.places.size() - 1);
    std::uniform_int_distribution<size_t> obj_dist(0, lex.objects.size() - 1);
    for (int i = 0; i < opt.count; ++i) {
        const TemplateId tid = opt.templates[tpl_dist(rng)];
        const int cls = opt.corruption_classes[cls_dist(rng)];
        const int answer_pos = (cls <= 3) ? cls - 1 : pos_dist(rng);
        // four distinct names, drawn without replacement
        std::array<std::string, 4> names;
        std::vector<size_t> pool(lex.names.size());
        for (size_t k = 0; k < pool.size(); ++k) pool[k] = k;
        for (int k = 0; k < 4; ++k) {
            std::uniform_int_distribution<size_t> pick(0, pool.size() - 1);
            const size_t j = pick(rng);
            names[static_cast<size_t>(k)] = lex.names[pool[j]];
            pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(j));
        }
        out.push_back(render_pair(tok, PromptTemplate::get(tid), make_corruption(cls, answer_pos), names,
                                  lex.places[place_dist(rng)], lex.objects[obj_dist(rng)]));
    }
    return out;
}

// ---------------------------------------------------------------------------
// JSONL
// ---------------------------------------------------------------------------

std::string pairs_to_jsonl(const std::vector<PromptPair>& pairs) {
    std::string out;
    for (const auto& p : pairs) {
        json j;
        j["clean_tokens"] = p.clean_tokens;
        j["corrupted_tokens"] = p.corrupted_tokens;
        j["answer_tok"] = p.answer_tok;
        j["corrupted_answer_tok"] = p.corrupted_answer_tok;
        j["positions"] = p.positions;
        j["template"] = template_name(p.template_id);
        j["corruption"] = p.corruption_id;
        j["clean_name_toks"] = p.clean_name_toks;
        j["corr_name_toks"] = p.corr_name_toks;
        out += j.dump();
        out += '\n';
    }
    return out;
}

std::vector<PromptPair> pairs_from_jsonl(const std::string& text) {
    std::vector<PromptPair> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        PromptPair p;
        p.clean_tokens = j.at("clean_tokens").get<std::vector<int64_t>>();
        p.corrupted_tokens = j.at("corrupted_tokens").get<std::vector<int64_t>>();
        p.answer_tok = j.at("answer_tok").get<int64_t>();
        p.corrupted_answer_tok = j.at("corrupted_answer_tok").get<int64_t>();
        p.positions = j.at("positions").get<std::map<std::string, int64_t>>();
        auto tid = template_from_name(j.at("template").get<std::string>());
        if (!tid) throw std::runtime_error("pairs_from_jsonl: bad template name");
        p.template_id = *tid;
        p.corruption_id = j.at("corruption").get<int>();
        auto cn = j.at("clean_name_toks").get<std::vector<int64_t>>();
        auto xn = j.at("corr_name_toks").get<std::vector<int64_t>>();
        std::copy(cn.begin(), cn.end(), p.clean_name_toks.begin());
        std::copy(xn.begin(), xn.end(), p.corr_name_toks.begin());
        p.check();
        out.push_back(std::move(p));
    }
    return out;
}

}  // namespace ssmc
