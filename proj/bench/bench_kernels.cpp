// Serial reference kernels against their OpenMP counterparts. Outputs are
// bit-identical by construction, so only timing differs.
#include <benchmark/benchmark.h>

#include <numeric>

#include "eshift/kernels.hpp"
#include "eshift/linalg.hpp"
#include "eshift/rng.hpp"

namespace {

using eshift::Matrix;

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  eshift::Rng rng(seed);
  Matrix m(r, c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) m(i, j) = rng.normal();
  return m;
}

template <bool Omp>
void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
  for (auto _ : state) {
    auto c = Omp ? eshift::kernels::omp::matmul(a, b) : eshift::kernels::serial::matmul(a, b);
    benchmark::DoNotOptimize(c.data().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(n * n * n));
}

template <bool Omp>
void BM_ProjectRows(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  const auto h = random_matrix(512, d, 3), basis = random_matrix(d, d, 4);
  for (auto _ : state) {
    auto p = Omp ? eshift::kernels::omp::project_rows(h, basis)
                 : eshift::kernels::serial::project_rows(h, basis);
    benchmark::DoNotOptimize(p.data().data());
  }
}

template <bool Omp>
void BM_Svd(benchmark::State& state) {
  const auto cols = static_cast<std::size_t>(state.range(0));
  const auto m = random_matrix(4 * cols, cols, 5);
  const auto backend = Omp ? eshift::Backend::omp : eshift::Backend::serial;
  for (auto _ : state) {
    auto f = eshift::svd(m, backend);
    benchmark::DoNotOptimize(f.sigma.data());
  }
}

template <bool Omp>
void BM_LowRankUpdate(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto u = random_matrix(n, n, 6), vt = random_matrix(n, n, 7);
  std::vector<std::size_t> idx(16);
  std::iota(idx.begin(), idx.end(), 0);
  const std::vector<double> coef(idx.size(), -0.5);
  Matrix w = random_matrix(n, n, 8);
  for (auto _ : state) {
    if constexpr (Omp)
      eshift::kernels::omp::low_rank_update(w, u, vt, idx, coef);
    else
      eshift::kernels::serial::low_rank_update(w, u, vt, idx, coef);
    benchmark::DoNotOptimize(w.data().data());
  }
}

}  // namespace

BENCHMARK(BM_Matmul<false>)->Name("matmul/serial")->Arg(128)->Arg(256);
BENCHMARK(BM_Matmul<true>)->Name("matmul/omp")->Arg(128)->Arg(256);
BENCHMARK(BM_ProjectRows<false>)->Name("project_rows/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_ProjectRows<true>)->Name("project_rows/omp")->Arg(64)->Arg(256);
BENCHMARK(BM_Svd<false>)->Name("svd/serial")->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Svd<true>)->Name("svd/omp")->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_LowRankUpdate<false>)->Name("low_rank_update/serial")->Arg(256)->Arg(1024);
BENCHMARK(BM_LowRankUpdate<true>)->Name("low_rank_update/omp")->Arg(256)->Arg(1024);

BENCHMARK_MAIN();
