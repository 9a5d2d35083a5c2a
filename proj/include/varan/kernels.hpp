#pragma once

// Inner loops shared by the differentiable ops. Every kernel exists twice:
// `serial` is the reference and `parallel` splits the outermost independent
// loop across OpenMP threads. Each output element is reduced in the same
// order in both variants, so results are bit-identical for any thread count.

#include <cstddef>
#include <span>

namespace varan::kernels {

/// Batched row-major GEMM: for each batch b, C_b (m x n) = op(A_b) * op(B_b),
/// added to C_b when `accumulate` is set. A stride of 0 broadcasts an operand
/// across the batch.
struct GemmArgs {
  std::size_t batch = 1;
  std::size_t m = 0, n = 0, k = 0;
  bool trans_a = false;  // A_b stored k x m
  bool trans_b = false;  // B_b stored n x k
  std::size_t stride_a = 0, stride_b = 0, stride_c = 0;
  bool accumulate = false;
  /// Sum each dot product over its terms in ascending order, so the result
  /// does not depend on the order of the k axis.
  bool sorted_sum = false;
};

/// Softmax-family kernels view the input as (outer, len, inner) with the
/// reduction running over `len`. The softmax normalizers are summed in sorted
/// order, which makes them invariant to permutations along `len`.
struct AxisView {
  std::size_t outer = 1, len = 1, inner = 1;
};

namespace serial {
void gemm(const GemmArgs& g, std::span<const double> a, std::span<const double> b, std::span<double> c);
void softmax(const AxisView& v, std::span<const double> x, std::span<double> y);
void log_softmax(const AxisView& v, std::span<const double> x, std::span<double> y);
void mean_axis(const AxisView& v, std::span<const double> x, std::span<double> y);
/// out(b, r) = sum_l w(b, l) * stack(b, l, r); w_stride = 0 shares one weight row.
void layer_weighted_sum(std::size_t batch, std::size_t layers, std::size_t row, std::span<const double> stack,
                        std::span<const double> w, std::size_t w_stride, std::span<double> out);
}  // namespace serial

namespace parallel {
void gemm(const GemmArgs& g, std::span<const double> a, std::span<const double> b, std::span<double> c);
void softmax(const AxisView& v, std::span<const double> x, std::span<double> y);
void log_softmax(const AxisView& v, std::span<const double> x, std::span<double> y);
void mean_axis(const AxisView& v, std::span<const double> x, std::span<double> y);
void layer_weighted_sum(std::size_t batch, std::size_t layers, std::size_t row, std::span<const double> stack,
                        std::span<const double> w, std::size_t w_stride, std::span<double> out);
}  // namespace parallel

/// Number of threads the parallel variants may use (1 without OpenMP).
int max_threads();

// Entry points used by the library; they route to `parallel`.
using parallel::gemm;
using parallel::layer_weighted_sum;
using parallel::log_softmax;
using parallel::mean_axis;
using parallel::softmax;

}  // namespace varan::kernels
