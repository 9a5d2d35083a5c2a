#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <vector>

namespace varan {

/// Probability vector over layer indices 1..n (stored 0-based).
class Categorical {
 public:
  /// Validates nonnegativity and normalization (|sum - 1| <= tol).
  explicit Categorical(std::vector<double> probs, double tol = 1e-12);

  static Categorical uniform(std::size_t n);
  static Categorical one_hot(std::size_t n, std::size_t index);

  std::size_t size() const { return probs_.size(); }
  double operator[](std::size_t i) const { return probs_[i]; }
  std::span<const double> probs() const { return probs_; }

  /// Lowest index among the maxima.
  std::size_t argmax() const;

 private:
  std::vector<double> probs_;
};

struct PriorSpec {
  double degrees_of_freedom = 3.0;
  std::size_t n_layers = 12;
};

/// Chi-squared density with k degrees of freedom at x > 0.
double chi2_pdf(double x, double k);

/// Chi-squared density sampled at x = 1..n, normalized, then index-flipped so
/// mass near small x lands on the top layers.
Categorical discretized_reversed_chi2(const PriorSpec& spec);

/// KL(q || p) in nats; 0 * ln(0/p) = 0. Throws std::domain_error when q has
/// mass where p has none.
double kl_categorical(const Categorical& q, const Categorical& p);
double kl_categorical(std::span<const double> q, std::span<const double> p);

/// ln sum_i prior_i * exp(log_prob_i), stabilized by log-sum-exp.
double exact_log_marginal(const Categorical& prior, std::span<const double> per_layer_log_prob);

/// E_q[log_prob] - KL(q || prior): the evidence lower bound for one sample.
double elbo(const Categorical& q, const Categorical& prior, std::span<const double> per_layer_log_prob);

/// q_i proportional to prior_i * exp(log_prob_i); the bound is tight here.
Categorical true_posterior(const Categorical& prior, std::span<const double> per_layer_log_prob);

/// Writes `layer_index,probability` rows (1-based layers) after a header.
void write_pmf_csv(std::ostream& os, const Categorical& pmf);

}  // namespace varan
