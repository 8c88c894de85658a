#include <malloc.h>
#include <chrono>
#include <cstdio>
#include "ssmc/testbench.hpp"
#include "ssmc/patching.hpp"
using namespace ssmc;
using Clock = std::chrono::steady_clock;
static double ms(Clock::time_point a, Clock::time_point b) { return std::chrono::duration<double, std::milli>(b - a).count(); }
int main() {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    ToyTaskSpec spec;
    Model m = Model::random(spec.model_cfg, 1);
    Lexicon lex = Lexicon::defaults();
    Tokenizer tok = default_tokenizer(lex);
    GenOptions g; g.count = 32; g.seed = 3;
    auto pairs = generate_batch(tok, lex, g);
    std::vector<int64_t> flat;
    for (int i = 0; i < 32; ++i) {
        auto& p = pairs[0];
        flat.insert(flat.end(), p.clean_tokens.begin(), p.clean_tokens.end());
    }
    const int64_t B = 32, L = pairs[0].seq_len();
    // forward only, no grads
    auto t0 = Clock::now();
    for (int i = 0; i < 10; ++i) { Tape tape(false); model_forward(tape, m, flat, B, L); }
    auto t1 = Clock::now();
    std::printf("fwd nograd: %.1f ms\n", ms(t0, t1) / 10);
    // forward with grads
    t0 = Clock::now();
    for (int i = 0; i < 10; ++i) { Tape tape(true); model_forward(tape, m, flat, B, L); }
    t1 = Clock::now();
    std::printf("fwd grad:   %.1f ms\n", ms(t0, t1) / 10);
    // forward + backward
    t0 = Clock::now();
    for (int i = 0; i < 10; ++i) {
        Tape tape(true);
        auto fr = model_forward(tape, m, flat, B, L);
        tape.backward(sum_all(mul(fr.logits, fr.logits)));
    }
    t1 = Clock::now();
    std::printf("fwd+bwd:    %.1f ms\n", ms(t0, t1) / 10);
    // tape size
    Tape tape(true);
    model_forward(tape, m, flat, B, L);
    std::printf("nodes: %d\n", tape.size());
    return 0;
}
