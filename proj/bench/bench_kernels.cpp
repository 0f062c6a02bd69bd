// Serial reference vs OpenMP kernels at the shapes the model uses.

#include <benchmark/benchmark.h>

#include <vector>

#include "copal/kernels.hpp"
#include "copal/rng.hpp"

namespace {

std::vector<double> filled(std::size_t n, std::uint64_t seed) {
    copal::Rng rng(seed);
    std::vector<double> v(n);
    for (double& x : v) x = rng.normal();
    return v;
}

template <void (*Kernel)(const double*, const double*, double*, std::size_t, std::size_t, std::size_t)>
void run(benchmark::State& state) {
    const auto m = static_cast<std::size_t>(state.range(0));
    const auto k = static_cast<std::size_t>(state.range(1));
    const auto n = static_cast<std::size_t>(state.range(2));
    const auto a = filled(m * k, 1);
    const auto b = filled(k * n, 2);
    std::vector<double> c(m * n);
    for (auto _ : state) {
        Kernel(a.data(), b.data(), c.data(), m, k, n);
        benchmark::DoNotOptimize(c.data());
        benchmark::ClobberMemory();
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * m * k * n));
    state.counters["threads"] = copal::kernels::max_threads();
}

void shapes(benchmark::internal::Benchmark* b) {
    b->Args({127, 64, 128})    // window x first projection
        ->Args({127, 128, 64})  // second projection
        ->Args({1016, 64, 256}) // training batch x tied output
        ->Args({256, 256, 256});
}

}  // namespace

BENCHMARK(run<copal::kernels::serial::gemm>)->Name("gemm/serial")->Apply(shapes);
BENCHMARK(run<copal::kernels::parallel::gemm>)->Name("gemm/parallel")->Apply(shapes);
BENCHMARK(run<copal::kernels::serial::gemm_bt>)->Name("gemm_bt/serial")->Apply(shapes);
BENCHMARK(run<copal::kernels::parallel::gemm_bt>)->Name("gemm_bt/parallel")->Apply(shapes);
BENCHMARK(run<copal::kernels::serial::gemm_at>)->Name("gemm_at/serial")->Apply(shapes);
BENCHMARK(run<copal::kernels::parallel::gemm_at>)->Name("gemm_at/parallel")->Apply(shapes);

BENCHMARK_MAIN();
