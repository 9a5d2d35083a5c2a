#include <vector>

#include "doctest.h"
#include "test_util.hpp"
#include "varan/kernels.hpp"

using namespace varan;
namespace k = varan::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

}  // namespace

// Sizes are chosen above the parallel threshold so the OpenMP branch runs.
TEST_CASE("parallel gemm is bit-identical to serial") {
  for (bool ta : {false, true})
    for (bool tb : {false, true}) {
      k::GemmArgs g;
      g.batch = 9;
      g.m = 37;
      g.n = 41;
      g.k = 29;
      g.trans_a = ta;
      g.trans_b = tb;
      g.stride_a = g.m * g.k;
      g.stride_b = 0;
      g.stride_c = g.m * g.n;
      const auto a = random_vec(g.batch * g.m * g.k, 1);
      const auto b = random_vec(g.n * g.k, 2);
      std::vector<double> c1(g.batch * g.m * g.n, 0.25), c2 = c1;
      g.accumulate = true;
      k::serial::gemm(g, a, b, c1);
      k::parallel::gemm(g, a, b, c2);
      CHECK(c1 == c2);
    }
}

TEST_CASE("gemm matches a triple loop") {
  k::GemmArgs g;
  g.m = 3;
  g.n = 2;
  g.k = 4;
  g.stride_a = 12;
  g.stride_b = 8;
  g.stride_c = 6;
  const auto a = random_vec(12, 3), b = random_vec(8, 4);
  std::vector<double> c(6);
  k::serial::gemm(g, a, b, c);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < 4; ++p) s += a[i * 4 + p] * b[p * 2 + j];
      CHECK(c[i * 2 + j] == doctest::Approx(s).epsilon(1e-12));
    }
}

TEST_CASE("parallel softmax family is bit-identical to serial") {
  const k::AxisView v{4096, 12, 3};
  const auto x = random_vec(v.outer * v.len * v.inner, 5);
  std::vector<double> s1(x.size()), s2(x.size());
  k::serial::softmax(v, x, s1);
  k::parallel::softmax(v, x, s2);
  CHECK(s1 == s2);
  k::serial::log_softmax(v, x, s1);
  k::parallel::log_softmax(v, x, s2);
  CHECK(s1 == s2);
  std::vector<double> m1(v.outer * v.inner), m2(m1.size());
  k::serial::mean_axis(v, x, m1);
  k::parallel::mean_axis(v, x, m2);
  CHECK(m1 == m2);
}

TEST_CASE("parallel layer weighted sum is bit-identical to serial") {
  const std::size_t batch = 64, layers = 12, row = 256;
  const auto stack = random_vec(batch * layers * row, 6);
  const auto w = random_vec(batch * layers, 7);
  std::vector<double> o1(batch * row), o2(batch * row);
  for (std::size_t stride : {layers, std::size_t{0}}) {
    k::serial::layer_weighted_sum(batch, layers, row, stack, w, stride, o1);
    k::parallel::layer_weighted_sum(batch, layers, row, stack, w, stride, o2);
    CHECK(o1 == o2);
  }
}

TEST_CASE("thread count is positive") { CHECK(k::max_threads() >= 1); }

TEST_CASE("sorted gemm ignores the order of the shared axis") {
  const std::size_t m = 3, n = 4, kk = 7;
  const auto a = random_vec(m * kk, 8), b = random_vec(kk * n, 9);
  std::vector<std::size_t> perm{3, 6, 0, 5, 1, 4, 2};
  std::vector<double> ap(a.size()), bp(b.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < kk; ++p) ap[i * kk + p] = a[i * kk + perm[p]];
  for (std::size_t p = 0; p < kk; ++p)
    for (std::size_t j = 0; j < n; ++j) bp[p * n + j] = b[perm[p] * n + j];
  k::GemmArgs g;
  g.m = m;
  g.n = n;
  g.k = kk;
  g.sorted_sum = true;
  std::vector<double> c1(m * n), c2(m * n);
  k::serial::gemm(g, a, b, c1);
  k::serial::gemm(g, ap, bp, c2);
  CHECK(c1 == c2);
}

TEST_CASE("softmax is exactly permutation-equivariant along its axis") {
  const auto x = random_vec(9, 10);
  std::vector<std::size_t> perm{4, 8, 1, 0, 7, 2, 6, 3, 5};
  std::vector<double> xp(9), y(9), yp(9);
  for (std::size_t i = 0; i < 9; ++i) xp[i] = x[perm[i]];
  k::serial::softmax({1, 9, 1}, x, y);
  k::serial::softmax({1, 9, 1}, xp, yp);
  for (std::size_t i = 0; i < 9; ++i) CHECK(yp[i] == y[perm[i]]);
}
