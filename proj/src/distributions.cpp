#include "varan/distributions.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>

namespace varan {

Categorical::Categorical(std::vector<double> probs, double tol) : probs_(std::move(probs)) {
  if (probs_.empty()) throw std::invalid_argument("categorical needs at least one outcome");
  double sum = 0.0;
  for (double p : probs_) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw std::invalid_argument("categorical entries must be finite and >= 0");
    sum += p;
  }
  if (std::abs(sum - 1.0) > tol) {
    throw std::invalid_argument("categorical does not sum to 1 (sum = " + std::to_string(sum) + ")");
  }
}

Categorical Categorical::uniform(std::size_t n) {
  if (n == 0) throw std::invalid_argument("uniform categorical over zero outcomes");
  return Categorical(std::vector<double>(n, 1.0 / static_cast<double>(n)));
}

Categorical Categorical::one_hot(std::size_t n, std::size_t index) {
  if (index >= n) throw std::out_of_range("one-hot index out of range");
  std::vector<double> p(n, 0.0);
  p[index] = 1.0;
  return Categorical(std::move(p));
}

std::size_t Categorical::argmax() const {
  return static_cast<std::size_t>(std::max_element(probs_.begin(), probs_.end()) - probs_.begin());
}

double chi2_pdf(double x, double k) {
  if (x <= 0.0) return 0.0;
  const double half_k = 0.5 * k;
  const double log_pdf = (half_k - 1.0) * std::log(x) - 0.5 * x - half_k * std::log(2.0) - std::lgamma(half_k);
  return std::exp(log_pdf);
}

Categorical discretized_reversed_chi2(const PriorSpec& spec) {
  if (!(spec.degrees_of_freedom > 0.0)) throw std::invalid_argument("chi2 degrees of freedom must be > 0");
  if (spec.n_layers == 0) throw std::invalid_argument("chi2 prior needs at least one layer");
  const std::size_t n = spec.n_layers;
  const double k = spec.degrees_of_freedom;

  // Normalize in log space: large k pushes every density at x <= n far
  // below the smallest double.
  std::vector<double> logd(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = static_cast<double>(i + 1);
    logd[i] = (0.5 * k - 1.0) * std::log(x) - 0.5 * x;
  }
  const double mx = *std::max_element(logd.begin(), logd.end());
  double sum = 0.0;
  for (double v : logd) sum += std::exp(v - mx);
  std::vector<double> pmf(n);
  for (std::size_t i = 0; i < n; ++i) pmf[n - 1 - i] = std::exp(logd[i] - mx) / sum;
  return Categorical(std::move(pmf));
}

double kl_categorical(std::span<const double> q, std::span<const double> p) {
  if (q.size() != p.size()) {
    throw std::invalid_argument("KL length mismatch: " + std::to_string(q.size()) + " vs " + std::to_string(p.size()));
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (q[i] == 0.0) continue;
    if (p[i] == 0.0) throw std::domain_error("KL is infinite: q > 0 where p = 0 at index " + std::to_string(i));
    kl += q[i] * std::log(q[i] / p[i]);
  }
  return kl;
}

double kl_categorical(const Categorical& q, const Categorical& p) { return kl_categorical(q.probs(), p.probs()); }

double exact_log_marginal(const Categorical& prior, std::span<const double> lp) {
  if (prior.size() != lp.size()) throw std::invalid_argument("exact_log_marginal length mismatch");
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < lp.size(); ++i) {
    if (prior[i] > 0.0) mx = std::max(mx, lp[i]);
  }
  if (!std::isfinite(mx)) return mx;
  double sum = 0.0;
  for (std::size_t i = 0; i < lp.size(); ++i) {
    if (prior[i] > 0.0) sum += prior[i] * std::exp(lp[i] - mx);
  }
  return mx + std::log(sum);
}

double elbo(const Categorical& q, const Categorical& prior, std::span<const double> lp) {
  if (q.size() != lp.size()) throw std::invalid_argument("elbo length mismatch");
  double expected = 0.0;
  for (std::size_t i = 0; i < lp.size(); ++i) {
    if (q[i] > 0.0) expected += q[i] * lp[i];
  }
  return expected - kl_categorical(q, prior);
}

Categorical true_posterior(const Categorical& prior, std::span<const double> lp) {
  const double log_z = exact_log_marginal(prior, lp);
  std::vector<double> post(lp.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < lp.size(); ++i) {
    post[i] = prior[i] > 0.0 ? std::exp(std::log(prior[i]) + lp[i] - log_z) : 0.0;
    sum += post[i];
  }
  for (auto& v : post) v /= sum;
  return Categorical(std::move(post));
}

void write_pmf_csv(std::ostream& os, const Categorical& pmf) {
  os << "layer_index,probability\n";
  char buf[64];
  for (std::size_t i = 0; i < pmf.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i + 1, pmf[i]);
    os << buf;
  }
}

}  // namespace varan
