#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "remind/kernels.hpp"

namespace k = remind::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

template <bool Parallel>
void BM_matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  auto a = random_vec(n * n, 1), b = random_vec(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    if constexpr (Parallel) k::matmul(a, b, c, n, n, n);
    else k::serial::matmul(a, b, c, n, n, n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n * n));
}

// attention-shaped: rows of length cols, causal chunk mask
template <bool Parallel>
void BM_softmax(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const std::size_t cols = rows;
  auto x = random_vec(rows * cols, 3);
  std::vector<std::uint8_t> mask(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) mask[i * cols + j] = (j / 48) <= (i / 48);
  std::vector<double> y(rows * cols);
  for (auto _ : state) {
    if constexpr (Parallel) k::softmax_rows(x, mask, y, rows, cols);
    else k::serial::softmax_rows(x, mask, y, rows, cols);
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * rows * cols));
}

template <bool Parallel>
void BM_matmul_at_b(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  auto a = random_vec(n * n, 4), b = random_vec(n * n, 5);
  std::vector<double> c(n * n, 0.0);
  for (auto _ : state) {
    if constexpr (Parallel) k::matmul_at_b_acc(a, b, c, n, n, n);
    else k::serial::matmul_at_b_acc(a, b, c, n, n, n);
    benchmark::DoNotOptimize(c.data());
  }
}

}  // namespace

BENCHMARK(BM_matmul<false>)->Name("matmul/serial")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(BM_matmul<true>)->Name("matmul/omp")->RangeMultiplier(2)->Range(32, 256)->UseRealTime();
BENCHMARK(BM_matmul_at_b<false>)->Name("matmul_at_b/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_matmul_at_b<true>)->Name("matmul_at_b/omp")->Arg(64)->Arg(256)->UseRealTime();
BENCHMARK(BM_softmax<false>)->Name("softmax/serial")->Arg(336)->Arg(1344);
BENCHMARK(BM_softmax<true>)->Name("softmax/omp")->Arg(336)->Arg(1344)->UseRealTime();

BENCHMARK_MAIN();
