#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "varan/autodiff.hpp"
#include "varan/distributions.hpp"

namespace varan {

using Label = std::int32_t;

/// total = expected_task_loss + beta * kl_term, all batch means.
struct LossBreakdown {
  Var total;
  double total_value = 0.0;
  double expected_task_loss = 0.0;
  double kl_term = 0.0;
  double beta = 0.0;
};

/// -(1/b) sum_b sum_i w_bi log p_i(y_b) + beta * (1/b) sum_b KL(w_b || prior).
/// The expectation over layers is summed exactly, so gradients reach the
/// weights directly. Throws std::invalid_argument for labels >= C or weight
/// rows that miss normalization by more than 1e-9.
LossBreakdown varan_loss(const Var& weights, const Var& per_layer_log_probs, std::span<const Label> labels,
                         const Categorical& prior, double beta);

/// Mean negative log-likelihood of labels under log-probabilities (b, C).
Var cross_entropy(const Var& log_probs, std::span<const Label> labels);

struct Prediction {
  Tensor combined_log_scores;  // (b, C)
  Tensor per_layer_log_probs;  // (b, n, C)
  Tensor weights;              // (b, n)
};

/// Row b of the scores is sum_i w_bi * log p_i(. | x_b). The rows are not
/// normalized; `renormalize` subtracts each row's log-sum-exp.
Prediction combine_inference(const Tensor& weights, const Tensor& per_layer_log_probs, bool renormalize = false);

/// Row-wise argmax with ties to the lowest class index.
std::vector<Label> predict_labels(const Tensor& scores);

double accuracy(std::span<const Label> predicted, std::span<const Label> labels);
double accuracy(const Prediction& prediction, std::span<const Label> labels);

/// Per-class F1 averaged with weights proportional to true-class support.
double weighted_f1(std::span<const Label> predicted, std::span<const Label> labels);
double weighted_f1(const Prediction& prediction, std::span<const Label> labels);

struct EvalMetrics {
  double loss = 0.0;
  double task_loss = 0.0;
  double kl = 0.0;
  double accuracy = 0.0;
  double weighted_f1 = 0.0;
};

/// `{step, split, loss, task_loss, kl, accuracy, weighted_f1}`.
nlohmann::ordered_json metrics_record(std::int64_t step, const std::string& split, const EvalMetrics& m);

}  // namespace varan
