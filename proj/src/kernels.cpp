#include "varan/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#ifdef VARAN_HAVE_OPENMP
#include <omp.h>
#endif

namespace varan::kernels {

namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelWork = std::size_t{1} << 15;

double sorted_total(double* terms, std::size_t n) {
  std::sort(terms, terms + n);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum += terms[i];
  return sum;
}

std::vector<double>& scratch(std::size_t n) {
  thread_local std::vector<double> buf;
  if (buf.size() < n) buf.resize(n);
  return buf;
}

// One output row of one batch entry. Shared by both variants so the
// reduction order is identical.
inline void gemm_row(const GemmArgs& g, const double* a, const double* b, double* c_row, std::size_t i) {
  const std::size_t m = g.m, n = g.n, k = g.k;
  if (!g.accumulate) std::fill(c_row, c_row + n, 0.0);
  if (g.sorted_sum) {
    double* terms = scratch(k).data();
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = g.trans_a ? a[p * m + i] : a[i * k + p];
        terms[p] = aip * (g.trans_b ? b[j * k + p] : b[p * n + j]);
      }
      c_row[j] += sorted_total(terms, k);
    }
  } else if (!g.trans_b) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = g.trans_a ? a[p * m + i] : a[i * k + p];
      const double* b_row = b + p * n;
      for (std::size_t j = 0; j < n; ++j) c_row[j] += aip * b_row[j];
    }
  } else {
    for (std::size_t j = 0; j < n; ++j) {
      const double* b_row = b + j * k;
      double acc = c_row[j];
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = g.trans_a ? a[p * m + i] : a[i * k + p];
        acc += aip * b_row[p];
      }
      c_row[j] = acc;
    }
  }
}

inline void gemm_task(const GemmArgs& g, const double* a, const double* b, double* c, std::size_t t) {
  const std::size_t bi = t / g.m;
  const std::size_t i = t % g.m;
  gemm_row(g, a + bi * g.stride_a, b + bi * g.stride_b, c + bi * g.stride_c + i * g.n, i);
}

inline void softmax_slice(const AxisView& v, const double* x, double* y, std::size_t o, std::size_t in, bool log) {
  const std::size_t base = o * v.len * v.inner + in;
  double mx = x[base];
  for (std::size_t l = 1; l < v.len; ++l) mx = std::max(mx, x[base + l * v.inner]);
  double* terms = scratch(v.len).data();
  for (std::size_t l = 0; l < v.len; ++l) terms[l] = std::exp(x[base + l * v.inner] - mx);
  const double sum = sorted_total(terms, v.len);
  if (log) {
    const double lse = mx + std::log(sum);
    for (std::size_t l = 0; l < v.len; ++l) y[base + l * v.inner] = x[base + l * v.inner] - lse;
  } else {
    for (std::size_t l = 0; l < v.len; ++l) y[base + l * v.inner] = std::exp(x[base + l * v.inner] - mx) / sum;
  }
}

inline void mean_slice(const AxisView& v, const double* x, double* y, std::size_t o, std::size_t in) {
  const std::size_t base = o * v.len * v.inner + in;
  double sum = 0.0;
  for (std::size_t l = 0; l < v.len; ++l) sum += x[base + l * v.inner];
  y[o * v.inner + in] = sum / static_cast<double>(v.len);
}

inline void weighted_row(std::size_t layers, std::size_t row, const double* stack, const double* w, double* out,
                         std::size_t b, std::size_t r) {
  double acc = 0.0;
  for (std::size_t l = 0; l < layers; ++l) acc += w[l] * stack[(b * layers + l) * row + r];
  out[b * row + r] = acc;
}

}  // namespace

namespace serial {

void gemm(const GemmArgs& g, std::span<const double> a, std::span<const double> b, std::span<double> c) {
  const std::size_t tasks = g.batch * g.m;
  for (std::size_t t = 0; t < tasks; ++t) gemm_task(g, a.data(), b.data(), c.data(), t);
}

void softmax(const AxisView& v, std::span<const double> x, std::span<double> y) {
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t in = 0; in < v.inner; ++in) softmax_slice(v, x.data(), y.data(), o, in, false);
}

void log_softmax(const AxisView& v, std::span<const double> x, std::span<double> y) {
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t in = 0; in < v.inner; ++in) softmax_slice(v, x.data(), y.data(), o, in, true);
}

void mean_axis(const AxisView& v, std::span<const double> x, std::span<double> y) {
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t in = 0; in < v.inner; ++in) mean_slice(v, x.data(), y.data(), o, in);
}

void layer_weighted_sum(std::size_t batch, std::size_t layers, std::size_t row, std::span<const double> stack,
                        std::span<const double> w, std::size_t w_stride, std::span<double> out) {
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t r = 0; r < row; ++r)
      weighted_row(layers, row, stack.data(), w.data() + b * w_stride, out.data(), b, r);
}

}  // namespace serial

namespace parallel {

void gemm(const GemmArgs& g, std::span<const double> a, std::span<const double> b, std::span<double> c) {
  const auto tasks = static_cast<std::int64_t>(g.batch * g.m);
  const bool big = g.batch * g.m * g.n * g.k >= kParallelWork;
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
#pragma omp parallel for schedule(static) if (big)
  for (std::int64_t t = 0; t < tasks; ++t) gemm_task(g, pa, pb, pc, static_cast<std::size_t>(t));
}

void softmax(const AxisView& v, std::span<const double> x, std::span<double> y) {
  const auto slices = static_cast<std::int64_t>(v.outer * v.inner);
  const bool big = v.outer * v.len * v.inner >= kParallelWork;
#pragma omp parallel for schedule(static) if (big)
  for (std::int64_t s = 0; s < slices; ++s) {
    const auto u = static_cast<std::size_t>(s);
    softmax_slice(v, x.data(), y.data(), u / v.inner, u % v.inner, false);
  }
}

void log_softmax(const AxisView& v, std::span<const double> x, std::span<double> y) {
  const auto slices = static_cast<std::int64_t>(v.outer * v.inner);
  const bool big = v.outer * v.len * v.inner >= kParallelWork;
#pragma omp parallel for schedule(static) if (big)
  for (std::int64_t s = 0; s < slices; ++s) {
    const auto u = static_cast<std::size_t>(s);
    softmax_slice(v, x.data(), y.data(), u / v.inner, u % v.inner, true);
  }
}

void mean_axis(const AxisView& v, std::span<const double> x, std::span<double> y) {
  const auto slices = static_cast<std::int64_t>(v.outer * v.inner);
  const bool big = v.outer * v.len * v.inner >= kParallelWork;
#pragma omp parallel for schedule(static) if (big)
  for (std::int64_t s = 0; s < slices; ++s) {
    const auto u = static_cast<std::size_t>(s);
    mean_slice(v, x.data(), y.data(), u / v.inner, u % v.inner);
  }
}

void layer_weighted_sum(std::size_t batch, std::size_t layers, std::size_t row, std::span<const double> stack,
                        std::span<const double> w, std::size_t w_stride, std::span<double> out) {
  const auto tasks = static_cast<std::int64_t>(batch * row);
  const bool big = batch * layers * row >= kParallelWork;
#pragma omp parallel for schedule(static) if (big)
  for (std::int64_t t = 0; t < tasks; ++t) {
    const auto u = static_cast<std::size_t>(t);
    const std::size_t b = u / row;
    weighted_row(layers, row, stack.data(), w.data() + b * w_stride, out.data(), b, u % row);
  }
}

}  // namespace parallel

int max_threads() {
#ifdef VARAN_HAVE_OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace varan::kernels
