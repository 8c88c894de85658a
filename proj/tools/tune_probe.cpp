// scratch tuning harness; not part of the shipped build
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <string>

#include "ssmc/testbench.hpp"

using namespace ssmc;

int main(int argc, char** argv) {
    ToyTaskSpec spec;
    spec.max_steps = argc > 1 ? std::atoi(argv[1]) : 1500;
    spec.lr = argc > 2 ? std::atof(argv[2]) : 2e-3;
    spec.batch_size = argc > 3 ? std::atoi(argv[3]) : 32;
    spec.seed = argc > 4 ? std::strtoull(argv[4], nullptr, 10) : 1;
    spec.eval_every = 100;
    spec.target_accuracy = 0.95;
    auto t0 = std::chrono::steady_clock::now();
    try {
        TrainResult res = train_toy(spec);
        auto dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("OK steps=%d acc=%.4f time=%.1fs\n", res.steps, res.final_accuracy, dt);
        for (const auto& e : res.log) {
            if (e.eval_accuracy >= 0) std::printf("  step %5d loss %.4f acc %.4f\n", e.step, e.loss, e.eval_accuracy);
        }
    } catch (const std::exception& e) {
        auto dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("FAIL after %.1fs: %s\n", dt, e.what());
        return 1;
    }
    return 0;
}
