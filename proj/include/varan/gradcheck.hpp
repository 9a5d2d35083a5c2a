#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "varan/autodiff.hpp"

namespace varan {

/// Builds a scalar loss on `tape` from parameter Vars (one per input tensor).
using ScalarFn = std::function<Var(Tape& tape, std::span<const Var> params)>;

struct GradCheckOptions {
  double step = 1e-6;
  double tolerance = 1e-5;
  /// Denominator floor of the relative error, so gradients near zero are
  /// compared in absolute terms instead of amplifying round-off.
  double abs_floor = 1e-3;
};

struct ParamGradCheck {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<ParamGradCheck> params;
  double max_rel_error = 0.0;
  bool passed = true;
};

/// Compares tape gradients with central differences, element by element.
/// Throws std::domain_error if any evaluation of `f` is not finite.
GradCheckReport finite_diff_check(const ScalarFn& f, const std::vector<Tensor>& params,
                                  const GradCheckOptions& opts = {});

/// One named case of the built-in suite.
struct GradSuiteResult {
  std::string name;
  int seeds = 0;
  int failures = 0;
  double worst_rel_error = 0.0;
  bool passed() const { return failures == 0; }
};

/// Every differentiable primitive plus the end-to-end VARAN loss, each over
/// `seeds` random draws.
std::vector<GradSuiteResult> run_gradient_suite(int seeds = 50, const GradCheckOptions& opts = {});

}  // namespace varan
