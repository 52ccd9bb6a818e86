#include <benchmark/benchmark.h>

#include <random>

#include <kvcar/tensor.hpp>

using namespace kvcar;

namespace {

void BM_Matmul(benchmark::State& state) {
    const int64_t n = state.range(0);
    std::mt19937 gen(3);
    Tensor a = Tensor::randn({n, n}, gen, 1.0f);
    Tensor b = Tensor::randn({n, n}, gen, 1.0f);
    NoGradGuard guard;
    for (auto _ : state) {
        Tensor c = matmul(a, b);
        benchmark::DoNotOptimize(c.data().data());
    }
    state.SetItemsProcessed(state.iterations() * n * n * n);
}

void BM_SoftmaxRows(benchmark::State& state) {
    const int64_t n = state.range(0);
    std::mt19937 gen(5);
    Tensor x = Tensor::randn({n, n}, gen, 2.0f);
    NoGradGuard guard;
    for (auto _ : state) {
        Tensor s = softmax_rows(x);
        benchmark::DoNotOptimize(s.data().data());
    }
    state.SetItemsProcessed(state.iterations() * n * n);
}

void BM_MatmulBackward(benchmark::State& state) {
    const int64_t n = state.range(0);
    std::mt19937 gen(7);
    for (auto _ : state) {
        Tensor a = Tensor::randn({n, n}, gen, 1.0f).set_requires_grad(true);
        Tensor b = Tensor::randn({n, n}, gen, 1.0f).set_requires_grad(true);
        backward(sum_all(matmul(a, b)));
        benchmark::DoNotOptimize(a.grad().data());
    }
}

BENCHMARK(BM_Matmul)->RangeMultiplier(2)->Range(16, 128);
BENCHMARK(BM_SoftmaxRows)->RangeMultiplier(2)->Range(16, 128);
BENCHMARK(BM_MatmulBackward)->RangeMultiplier(2)->Range(16, 64);

} // namespace

BENCHMARK_MAIN();
