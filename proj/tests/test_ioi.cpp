#include <doctest.h>

#include <array>
#include <cmath>
#include <set>
#include <stdexcept>

#include "ssmc/ioi.hpp"

using namespace ssmc;

namespace {

// Test-side enumeration oracle over letter patterns. A pattern assigns a name
// index (0..3; 3 is the fresh name) to each of the five slots.
struct LetterPattern {
    std::array<int, 5> slots;
    int ans;
    bool operator<(const LetterPattern& o) const {
        if (slots != o.slots) return slots < o.slots;
        return ans < o.ans;
    }
    bool operator==(const LetterPattern& o) const { return slots == o.slots && ans == o.ans; }
};

int answer_of(const std::array<int, 5>& slots) {
    // -1 when the pattern is not a well-formed IOI prompt
    std::set<int> first(slots.begin(), slots.begin() + 3);
    if (first.size() != 3) return -1;
    if (slots[3] == slots[4]) return -1;
    if (!first.count(slots[3]) || !first.count(slots[4])) return -1;
    for (int i = 0; i < 3; ++i) {
        if (slots[static_cast<size_t>(i)] != slots[3] && slots[static_cast<size_t>(i)] != slots[4]) {
            return slots[static_cast<size_t>(i)];
        }
    }
    return -1;
}

LetterPattern canonical_clean(int answer_pos) {
    LetterPattern p{};
    int r = 0;
    std::array<int, 2> repeated{};
    for (int i = 0; i < 3; ++i) {
        p.slots[static_cast<size_t>(i)] = i;
        if (i != answer_pos) repeated[static_cast<size_t>(r++)] = i;
    }
    p.slots[3] = repeated[0];
    p.slots[4] = repeated[1];
    p.ans = answer_pos;
    return p;
}

// every (slot, replacement) substitution that keeps the prompt well-formed and
// changes the answer
std::set<std::pair<LetterPattern, LetterPattern>> enumerate_corruptions(const LetterPattern& clean) {
    std::set<std::pair<LetterPattern, LetterPattern>> out;
    for (int p = 0; p < 5; ++p) {
        for (int r = 0; r < 4; ++r) {
            if (r == clean.slots[static_cast<size_t>(p)]) continue;
            LetterPattern corr = clean;
            corr.slots[static_cast<size_t>(p)] = r;
            corr.ans = answer_of(corr.slots);
            if (corr.ans < 0 || corr.ans == clean.ans) continue;
            out.insert({clean, corr});
        }
    }
    return out;
}

}  // namespace

TEST_CASE("clean pattern ABC AB: the answer is the name not repeated, the third") {
    CorruptionSpec s = make_corruption(3, 2);
    CHECK(s.clean_slots == std::array<int, 5>{0, 1, 2, 0, 1});
    CHECK(s.clean_ans == 2);
    CHECK(s.pattern_string() == "ABC AB C -> ABD AB D");
}

TEST_CASE("class 4: answer name displaces n5, no substitution in sentence one") {
    CorruptionSpec s = make_corruption(4, 2);
    for (int i = 0; i < 3; ++i) CHECK(s.clean_slots[static_cast<size_t>(i)] == s.corr_slots[static_cast<size_t>(i)]);
    CHECK(s.replaced_slot() == 4);
    CHECK(s.corr_slots[4] == s.clean_ans);
    // the displaced name becomes the answer: C -> B on the canonical form
    CHECK(s.pattern_string() == "ABC AB C -> ABC AC B");
}

TEST_CASE("class 5 on the paper's canonical arrangement") {
    CorruptionSpec s = make_corruption(5, 1);
    CHECK(s.pattern_string() == "ABC AC B -> ABC BC A");
}

namespace {

// Parses "CAB AB C" into slot/answer letter indices.
std::pair<std::array<int, 5>, int> parse_pattern(const std::string& s) {
    std::array<int, 5> slots{s[0] - 'A', s[1] - 'A', s[2] - 'A', s[4] - 'A', s[5] - 'A'};
    return {slots, s[7] - 'A'};
}

// True when the spec equals the paper pattern up to a renaming of letters
// (the paper letters classes 1-2 by role, not by slot order).
bool matches_paper_pattern(const CorruptionSpec& spec, const std::string& clean_s, const std::string& corr_s) {
    auto [pc, pa] = parse_pattern(clean_s);
    auto [px, pxa] = parse_pattern(corr_s);
    std::array<int, 4> to_ours{-1, -1, -1, -1};
    auto bind = [&](int paper_letter, int ours) {
        if (to_ours[static_cast<size_t>(paper_letter)] == -1) to_ours[static_cast<size_t>(paper_letter)] = ours;
        return to_ours[static_cast<size_t>(paper_letter)] == ours;
    };
    for (int i = 0; i < 5; ++i) {
        if (!bind(pc[static_cast<size_t>(i)], spec.clean_slots[static_cast<size_t>(i)])) return false;
        if (!bind(px[static_cast<size_t>(i)], spec.corr_slots[static_cast<size_t>(i)])) return false;
    }
    return bind(pa, spec.clean_ans) && bind(pxa, spec.corr_ans);
}

}  // namespace

TEST_CASE("all five classes reproduce the published letter patterns up to renaming") {
    CHECK(matches_paper_pattern(make_corruption(1, 0), "CAB AB C", "DAB AB D"));
    CHECK(matches_paper_pattern(make_corruption(2, 1), "ACB AB C", "ADB AB D"));
    CHECK(matches_paper_pattern(make_corruption(3, 2), "ABC AB C", "ABD AB D"));
    CHECK(matches_paper_pattern(make_corruption(4, 2), "ABC AB C", "ABC AC B"));
    CHECK(matches_paper_pattern(make_corruption(5, 1), "ABC AC B", "ABC BC A"));
}

TEST_CASE("classes 1-3 demand the matching answer slot") {
    CHECK_THROWS(make_corruption(1, 1));
    CHECK_THROWS(make_corruption(3, 0));
    CHECK_NOTHROW(make_corruption(4, 0));
    CHECK_NOTHROW(make_corruption(5, 2));
}

TEST_CASE("exhaustive oracle: generator corruptions equal the valid answer-changing substitutions") {
    // quantified over every clean arrangement (answer position 0..2)
    std::set<std::pair<LetterPattern, LetterPattern>> from_generator;
    for (int answer_pos = 0; answer_pos < 3; ++answer_pos) {
        for (int cls = 1; cls <= 5; ++cls) {
            if (!corruption_compatible(cls, answer_pos)) continue;
            CorruptionSpec s = make_corruption(cls, answer_pos);
            LetterPattern clean{s.clean_slots, s.clean_ans};
            LetterPattern corr{s.corr_slots, s.corr_ans};
            from_generator.insert({clean, corr});
        }
    }
    std::set<std::pair<LetterPattern, LetterPattern>> from_oracle;
    for (int answer_pos = 0; answer_pos < 3; ++answer_pos) {
        auto e = enumerate_corruptions(canonical_clean(answer_pos));
        from_oracle.insert(e.begin(), e.end());
    }
    CHECK(from_generator == from_oracle);
    CHECK(from_generator.size() == 9);  // 3 arrangements x 3 valid substitutions
}

TEST_CASE("every generated corruption belongs to exactly one class") {
    for (int answer_pos = 0; answer_pos < 3; ++answer_pos) {
        for (int cls = 1; cls <= 5; ++cls) {
            if (!corruption_compatible(cls, answer_pos)) continue;
            CorruptionSpec s = make_corruption(cls, answer_pos);
            // the replaced slot determines the class
            const int slot = s.replaced_slot();
            int derived = slot < 3 ? slot + 1 : (slot == 4 ? 4 : 5);
            CHECK(derived == cls);
        }
    }
}

TEST_CASE("three templates share name token indices; 'then' is shifted") {
    auto shared = shared_position_templates();
    REQUIRE(shared.size() == 3);
    auto base = PromptTemplate::get(shared[0]).name_positions();
    for (TemplateId id : shared) {
        CHECK(PromptTemplate::get(id).name_positions() == base);
    }
    CHECK(PromptTemplate::get(TemplateId::then).name_positions() != base);
    CHECK(base == std::array<int64_t, 5>{2, 4, 6, 12, 14});
    CHECK(PromptTemplate::get(TemplateId::then).name_positions() == std::array<int64_t, 5>{3, 5, 7, 13, 15});
}

TEST_CASE("semantic positions cover every token exactly once; out is last") {
    for (const auto& tpl : PromptTemplate::all()) {
        auto pos = semantic_positions(tpl);
        CHECK(pos.size() == tpl.pattern.size());
        std::set<int64_t> seen;
        for (const auto& [label, p] : pos) seen.insert(p);
        CHECK(seen.size() == tpl.pattern.size());
        CHECK(pos.at("out") == static_cast<int64_t>(tpl.pattern.size()) - 1);
        CHECK(pos.at("n1") < pos.at("n2"));
        CHECK(pos.at("n2") < pos.at("n3"));
        CHECK(pos.at("n3") < pos.at("n4"));
        CHECK(pos.at("n4") < pos.at("n5"));
        CHECK(pos.at("n5") < pos.at("out"));
        CHECK(pos.at("pos0") == 0);  // BOS occupies pos0
    }
}

TEST_CASE("pos14 labels the 'and' between n4 and n5 on the then-template") {
    const auto& tpl = PromptTemplate::get(TemplateId::then);
    auto pos = semantic_positions(tpl);
    CHECK(pos.count("pos14") == 1);
    CHECK(tpl.pattern[14] == "and");
    CHECK(pos.at("n4") == 13);
    CHECK(pos.at("n5") == 15);
}

TEST_CASE("render round-trip: detokenizing reproduces the rendered prompt") {
    Lexicon lex = Lexicon::defaults();
    Tokenizer tok = default_tokenizer(lex);
    CorruptionSpec spec = make_corruption(3, 2);
    PromptPair pair = render_pair(tok, PromptTemplate::get(TemplateId::friends), spec,
                                  {"Alice", "Bob", "Carol", "David"}, "park", "ring");
    CHECK(tok.detokenize(pair.clean_tokens) ==
          "<bos> Friends Alice , Bob and Carol went to the park . Alice and Bob gave a ring to");
    CHECK(tok.detokenize(pair.corrupted_tokens) ==
          "<bos> Friends Alice , Bob and David went to the park . Alice and Bob gave a ring to");
    CHECK(pair.answer_tok == tok.id("Carol"));
    CHECK(pair.corrupted_answer_tok == tok.id("David"));
}

TEST_CASE("multi-token and duplicate names are rejected") {
    Lexicon lex = Lexicon::defaults();
    Tokenizer tok = default_tokenizer(lex);
    CorruptionSpec spec = make_corruption(3, 2);
    CHECK_THROWS_AS(render_pair(tok, PromptTemplate::get(TemplateId::friends), spec,
                                {"Alice Maria", "Bob", "Carol", "David"}, "park", "ring"),
                    std::invalid_argument);
    CHECK_THROWS_AS(render_pair(tok, PromptTemplate::get(TemplateId::friends), spec,
                                {"Alice", "Alice", "Carol", "David"}, "park", "ring"),
                    std::invalid_argument);
}

TEST_CASE("generate_batch is deterministic under a fixed seed") {
    Lexicon lex = Lexicon::defaults();
    Tokenizer tok = default_tokenizer(lex);
    GenOptions opt;
    opt.count = 40;
    opt.seed = 7;
    auto a = generate_batch(tok, lex, opt);
    auto b = generate_batch(tok, lex, opt);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].clean_tokens == b[i].clean_tokens);
        CHECK(a[i].corrupted_tokens == b[i].corrupted_tokens);
        CHECK(a[i].corruption_id == b[i].corruption_id);
    }
}

TEST_CASE("generated pairs satisfy the pair invariants") {
    Lexicon lex = Lexicon::defaults();
    Tokenizer tok = default_tokenizer(lex);
    GenOptions opt;
    opt.count = 200;
    opt.seed = 11;
    for (const auto& p : generate_batch(tok, lex, opt)) {
        CHECK(p.clean_tokens.size() == p.corrupted_tokens.size());
        CHECK(p.answer_tok != p.corrupted_answer_tok);
        int changed = 0;
        for (int i = 0; i < 5; ++i) {
            if (p.clean_name_toks[static_cast<size_t>(i)] != p.corr_name_toks[static_cast<size_t>(i)]) ++changed;
        }
        CHECK(changed == 1);
        // non-name tokens agree across the pair
        std::set<int64_t> name_pos;
        for (int i = 1; i <= 5; ++i) name_pos.insert(p.pos("n" + std::to_string(i)));
        for (size_t t = 0; t < p.clean_tokens.size(); ++t) {
            if (!name_pos.count(static_cast<int64_t>(t))) {
                CHECK(p.clean_tokens[t] == p.corrupted_tokens[t]);
            }
        }
    }
}

TEST_CASE("class frequencies under uniform sampling stay within 3 sigma over 10k draws") {
    Lexicon lex = Lexicon::defaults();
    Tokenizer tok = default_tokenizer(lex);
    GenOptions opt;
    opt.count = 10000;
    opt.seed = 13;
    std::array<int, 6> counts{};
    for (const auto& p : generate_batch(tok, lex, opt)) counts[static_cast<size_t>(p.corruption_id)]++;
    const double expected = 10000.0 / 5.0;
    const double sigma = std::sqrt(10000.0 * 0.2 * 0.8);
    for (int c = 1; c <= 5; ++c) {
        CHECK(std::abs(counts[static_cast<size_t>(c)] - expected) <= 3.0 * sigma);
    }
}

TEST_CASE("jsonl round trip preserves pairs") {
    Lexicon lex = Lexicon::defaults();
    Tokenizer tok = default_tokenizer(lex);
    GenOptions opt;
    opt.count = 12;
    opt.seed = 17;
    auto pairs = generate_batch(tok, lex, opt);
    auto back = pairs_from_jsonl(pairs_to_jsonl(pairs));
    REQUIRE(back.size() == pairs.size());
    for (size_t i = 0; i < pairs.size(); ++i) {
        CHECK(back[i].clean_tokens == pairs[i].clean_tokens);
        CHECK(back[i].corrupted_tokens == pairs[i].corrupted_tokens);
        CHECK(back[i].positions == pairs[i].positions);
    }
}
