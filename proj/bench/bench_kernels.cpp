// Serial reference kernels against their OpenMP counterparts.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "crashsev/kernels.hpp"
#include "crashsev/resample.hpp"

namespace {

using namespace crashsev;

template <class T>
std::vector<T> random_vec(std::size_t n, unsigned seed) {
    std::mt19937 gen(seed);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(dist(gen));
    return v;
}

template <class T, bool Parallel>
void BM_GemmNN(benchmark::State& state) {
    const auto m = static_cast<std::size_t>(state.range(0));
    const auto k = static_cast<std::size_t>(state.range(1));
    const auto n = static_cast<std::size_t>(state.range(2));
    auto a = random_vec<T>(m * k, 1);
    auto b = random_vec<T>(k * n, 2);
    std::vector<T> c(m * n);
    for (auto _ : state) {
        if constexpr (Parallel) {
            kernels::par::gemm_nn(m, k, n, a.data(), b.data(), c.data(), false);
        } else {
            kernels::serial::gemm_nn(m, k, n, a.data(), b.data(), c.data(), false);
        }
        benchmark::DoNotOptimize(c.data());
    }
    state.counters["GFLOPS"] = benchmark::Counter(2.0 * m * k * n * state.iterations(),
                                                  benchmark::Counter::kIsRate, benchmark::Counter::kIs1000);
}

template <bool Parallel>
void BM_SqDistances(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const std::size_t d = 64;
    auto x = random_vec<double>(n * d, 3);
    std::vector<double> xt(n * d);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t c = 0; c < d; ++c) xt[c * n + j] = x[j * d + c];
    auto q = random_vec<double>(d, 4);
    std::vector<double> out(n);
    for (auto _ : state) {
        if constexpr (Parallel) {
            kernels::par::sq_distances_colmajor(n, d, xt.data(), q.data(), out.data());
        } else {
            kernels::serial::sq_distances(n, d, x.data(), q.data(), out.data());
        }
        benchmark::DoNotOptimize(out.data());
    }
}

void BM_KnnAll(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    Matrix x(n, 32);
    x.data = random_vec<double>(n * 32, 5);
    for (auto _ : state) {
        auto nn = knn_all(x, 3);
        benchmark::DoNotOptimize(nn.data());
    }
}

}  // namespace

BENCHMARK(BM_GemmNN<float, false>)->Args({768, 32, 96})->Args({64, 256, 128})->Args({96, 64, 192});
BENCHMARK(BM_GemmNN<float, true>)->Args({768, 32, 96})->Args({64, 256, 128})->Args({96, 64, 192});
BENCHMARK(BM_GemmNN<double, false>)->Args({768, 32, 96});
BENCHMARK(BM_GemmNN<double, true>)->Args({768, 32, 96});
BENCHMARK(BM_SqDistances<false>)->Arg(4096)->Arg(32768);
BENCHMARK(BM_SqDistances<true>)->Arg(4096)->Arg(32768);
BENCHMARK(BM_KnnAll)->Arg(2000);

BENCHMARK_MAIN();
