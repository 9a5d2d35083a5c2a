#include "varan/objective.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "varan/aggregation.hpp"

namespace varan {

namespace {

void check_labels(std::span<const Label> labels, std::size_t batch, std::size_t classes) {
  if (labels.size() != batch) {
    throw std::invalid_argument("expected " + std::to_string(batch) + " labels, got " + std::to_string(labels.size()));
  }
  for (Label y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw std::invalid_argument("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
}

// Constant (b, n, C) with ones at the label of each sample.
Tensor label_mask(std::span<const Label> labels, std::size_t n, std::size_t classes) {
  Tensor mask(Shape{labels.size(), n, classes}, 0.0);
  for (std::size_t b = 0; b < labels.size(); ++b)
    for (std::size_t i = 0; i < n; ++i) mask[(b * n + i) * classes + static_cast<std::size_t>(labels[b])] = 1.0;
  return mask;
}

}  // namespace

LossBreakdown varan_loss(const Var& weights, const Var& per_layer_log_probs, std::span<const Label> labels,
                         const Categorical& prior, double beta) {
  const Tensor& w = weights.value();
  const Tensor& lp = per_layer_log_probs.value();
  if (w.rank() != 2 || lp.rank() != 3 || lp.dim(0) != w.dim(0) || lp.dim(1) != w.dim(1)) {
    throw ShapeError("varan_loss: weights " + shape_string(w.shape()) + " vs log-probs " + shape_string(lp.shape()));
  }
  const std::size_t b = w.dim(0), n = w.dim(1), classes = lp.dim(2);
  if (prior.size() != n) throw ShapeError("varan_loss: prior over " + std::to_string(prior.size()) + " layers, weights over " + std::to_string(n));
  check_labels(labels, b, classes);
  for (std::size_t r = 0; r < b; ++r) {
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (w[r * n + i] < 0.0) throw std::invalid_argument("varan_loss: negative layer weight");
      sum += w[r * n + i];
    }
    if (std::abs(sum - 1.0) > 1e-9) {
      throw std::invalid_argument("varan_loss: weight row " + std::to_string(r) + " sums to " + std::to_string(sum));
    }
  }

  Tape& tape = weights.tape();
  const double inv_b = 1.0 / static_cast<double>(b);
  Var mask = tape.constant(label_mask(labels, n, classes));
  Var label_lp = ad::sum(ad::mul(per_layer_log_probs, mask), 2);          // (b, n)
  Var task = ad::mul_scalar(ad::sum_all(ad::mul(weights, label_lp)), -inv_b);
  std::vector<double> pv(prior.probs().begin(), prior.probs().end());
  Var kl = ad::mul_scalar(ad::sum_all(ad::kl_rows(weights, Tensor(Shape{n}, std::move(pv)))), inv_b);
  Var total = ad::add(task, ad::mul_scalar(kl, beta));

  LossBreakdown out;
  out.total = total;
  out.total_value = total.value().item();
  out.expected_task_loss = task.value().item();
  out.kl_term = kl.value().item();
  out.beta = beta;
  return out;
}

Var cross_entropy(const Var& log_probs, std::span<const Label> labels) {
  const Tensor& lp = log_probs.value();
  if (lp.rank() != 2) throw ShapeError("cross_entropy expects (b, C), got " + shape_string(lp.shape()));
  const std::size_t b = lp.dim(0), classes = lp.dim(1);
  check_labels(labels, b, classes);
  Tensor mask = label_mask(labels, 1, classes).reshaped(Shape{b, classes});
  Var picked = ad::sum_all(ad::mul(log_probs, log_probs.tape().constant(std::move(mask))));
  return ad::mul_scalar(picked, -1.0 / static_cast<double>(b));
}

Prediction combine_inference(const Tensor& weights, const Tensor& lp, bool renormalize) {
  if (weights.rank() != 2 || lp.rank() != 3 || lp.dim(0) != weights.dim(0) || lp.dim(1) != weights.dim(1)) {
    throw ShapeError("combine_inference: weights " + shape_string(weights.shape()) + " vs log-probs " +
                     shape_string(lp.shape()));
  }
  const std::size_t b = weights.dim(0), n = weights.dim(1), classes = lp.dim(2);
  Tensor scores(Shape{b, classes}, 0.0);
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t c = 0; c < classes; ++c) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += weights[r * n + i] * lp[(r * n + i) * classes + c];
      scores[r * classes + c] = acc;
    }
  if (renormalize) scores = log_softmax_axis(scores, 1);
  return Prediction{std::move(scores), lp, weights};
}

std::vector<Label> predict_labels(const Tensor& scores) {
  if (scores.rank() != 2) throw ShapeError("scores must be (b, C), got " + shape_string(scores.shape()));
  const std::size_t b = scores.dim(0), classes = scores.dim(1);
  std::vector<Label> out(b);
  for (std::size_t r = 0; r < b; ++r) {
    out[r] = static_cast<Label>(argmax(scores.data().subspan(r * classes, classes)));
  }
  return out;
}

double accuracy(std::span<const Label> predicted, std::span<const Label> labels) {
  if (labels.empty()) throw std::invalid_argument("accuracy of an empty batch");
  if (predicted.size() != labels.size()) throw std::invalid_argument("accuracy: prediction/label count mismatch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predicted[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double accuracy(const Prediction& prediction, std::span<const Label> labels) {
  if (labels.empty()) throw std::invalid_argument("accuracy of an empty batch");
  return accuracy(predict_labels(prediction.combined_log_scores), labels);
}

double weighted_f1(std::span<const Label> predicted, std::span<const Label> labels) {
  if (labels.empty()) throw std::invalid_argument("weighted F1 of an empty batch");
  if (predicted.size() != labels.size()) throw std::invalid_argument("weighted F1: prediction/label count mismatch");
  struct Counts {
    std::size_t tp = 0, fp = 0, fn = 0, support = 0;
  };
  std::map<Label, Counts> per_class;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    per_class[labels[i]].support += 1;
    if (predicted[i] == labels[i]) {
      per_class[labels[i]].tp += 1;
    } else {
      per_class[predicted[i]].fp += 1;
      per_class[labels[i]].fn += 1;
    }
  }
  double total = 0.0;
  for (const auto& [cls, c] : per_class) {
    if (c.support == 0) continue;
    const double denom = static_cast<double>(2 * c.tp + c.fp + c.fn);
    const double f1 = denom > 0.0 ? 2.0 * static_cast<double>(c.tp) / denom : 0.0;
    total += f1 * static_cast<double>(c.support);
  }
  return total / static_cast<double>(labels.size());
}

double weighted_f1(const Prediction& prediction, std::span<const Label> labels) {
  if (labels.empty()) throw std::invalid_argument("weighted F1 of an empty batch");
  return weighted_f1(predict_labels(prediction.combined_log_scores), labels);
}

nlohmann::ordered_json metrics_record(std::int64_t step, const std::string& split, const EvalMetrics& m) {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["split"] = split;
  j["loss"] = m.loss;
  j["task_loss"] = m.task_loss;
  j["kl"] = m.kl;
  j["accuracy"] = m.accuracy;
  j["weighted_f1"] = m.weighted_f1;
  return j;
}

}  // namespace varan
