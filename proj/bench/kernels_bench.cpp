// Serial reference kernels against their OpenMP variants.

#include <benchmark/benchmark.h>

#include <vector>

#include "varan/kernels.hpp"
#include "varan/rng.hpp"

namespace k = varan::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  varan::Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  k::GemmArgs g;
  g.batch = 16;
  g.m = g.n = g.k = n;
  g.stride_a = g.stride_b = g.stride_c = n * n;
  const auto a = random_vec(g.batch * n * n, 1);
  const auto b = random_vec(g.batch * n * n, 2);
  std::vector<double> c(g.batch * n * n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::parallel::gemm(g, a, b, c);
    } else {
      k::serial::gemm(g, a, b, c);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(2 * g.batch * n * n * n));
}

template <bool Parallel>
void BM_Softmax(benchmark::State& state) {
  const k::AxisView v{static_cast<std::size_t>(state.range(0)), 12, 1};
  const auto x = random_vec(v.outer * v.len, 3);
  std::vector<double> y(x.size());
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::parallel::softmax(v, x, y);
    } else {
      k::serial::softmax(v, x, y);
    }
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Parallel>
void BM_LayerWeightedSum(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  const std::size_t layers = 12, row = 8 * 64;
  const auto stack = random_vec(batch * layers * row, 4);
  const auto w = random_vec(batch * layers, 5);
  std::vector<double> out(batch * row);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::parallel::layer_weighted_sum(batch, layers, row, stack, w, layers, out);
    } else {
      k::serial::layer_weighted_sum(batch, layers, row, stack, w, layers, out);
    }
    benchmark::DoNotOptimize(out.data());
  }
}

}  // namespace

BENCHMARK(BM_Gemm<false>)->Arg(32)->Arg(128);
BENCHMARK(BM_Gemm<true>)->Arg(32)->Arg(128);
BENCHMARK(BM_Softmax<false>)->Arg(1 << 12)->Arg(1 << 16);
BENCHMARK(BM_Softmax<true>)->Arg(1 << 12)->Arg(1 << 16);
BENCHMARK(BM_LayerWeightedSum<false>)->Arg(64)->Arg(1024);
BENCHMARK(BM_LayerWeightedSum<true>)->Arg(64)->Arg(1024);

BENCHMARK_MAIN();
