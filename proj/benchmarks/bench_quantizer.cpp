#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include <kvcar/quantizer.hpp>

using namespace kvcar;

namespace {

std::vector<float> random_vector(int64_t n) {
    std::mt19937 gen(42);
    std::uniform_real_distribution<float> dist(-2.0f, 2.0f);
    std::vector<float> v(static_cast<size_t>(n));
    for (auto& x : v) x = dist(gen);
    return v;
}

void BM_Quantize(benchmark::State& state) {
    const auto x = random_vector(state.range(0));
    for (auto _ : state) {
        QuantizedBlock b = quantize(x);
        benchmark::DoNotOptimize(b.q.data());
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_QuantizeRoundTrip(benchmark::State& state) {
    const auto x = random_vector(state.range(0));
    for (auto _ : state) {
        const auto back = dequantize(quantize(x));
        benchmark::DoNotOptimize(back.data());
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}

BENCHMARK(BM_Quantize)->RangeMultiplier(4)->Range(64, 4096);
BENCHMARK(BM_QuantizeRoundTrip)->RangeMultiplier(4)->Range(64, 4096);

} // namespace

BENCHMARK_MAIN();
