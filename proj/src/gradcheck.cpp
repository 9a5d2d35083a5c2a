#include "varan/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <stdexcept>

#include "varan/aggregation.hpp"
#include "varan/distributions.hpp"
#include "varan/model.hpp"
#include "varan/objective.hpp"
#include "varan/rng.hpp"

namespace varan {

namespace {

using ValueFn = std::function<double(const std::vector<Tensor>&)>;

GradCheckReport compare(const std::vector<Tensor>& analytic, std::vector<Tensor> params, const ValueFn& value,
                        const GradCheckOptions& opts) {
  GradCheckReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    ParamGradCheck pc;
    Tensor& x = params[p];
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const double orig = x[i];
      x[i] = orig + opts.step;
      const double up = value(params);
      x[i] = orig - opts.step;
      const double down = value(params);
      x[i] = orig;
      if (!std::isfinite(up) || !std::isfinite(down)) throw std::domain_error("function is not finite near the point");
      const double numeric = (up - down) / (2.0 * opts.step);
      const double a = analytic[p][i];
      const double abs_err = std::abs(a - numeric);
      const double rel_err = abs_err / std::max({std::abs(a), std::abs(numeric), opts.abs_floor});
      pc.max_abs_error = std::max(pc.max_abs_error, abs_err);
      pc.max_rel_error = std::max(pc.max_rel_error, rel_err);
    }
    pc.passed = pc.max_rel_error <= opts.tolerance;
    report.max_rel_error = std::max(report.max_rel_error, pc.max_rel_error);
    report.passed = report.passed && pc.passed;
    report.params.push_back(pc);
  }
  return report;
}

}  // namespace

GradCheckReport finite_diff_check(const ScalarFn& f, const std::vector<Tensor>& params, const GradCheckOptions& opts) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : params) vars.push_back(tape.parameter(t));
    const Var loss = f(tape, vars);
    if (!std::isfinite(loss.value().item())) throw std::domain_error("function is not finite at the point");
    const GradientMap grads = tape.backward(loss);
    for (const auto& v : vars) analytic.push_back(grads.at(v.id()));
  }
  const ValueFn value = [&f](const std::vector<Tensor>& ps) {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : ps) vars.push_back(tape.parameter(t));
    return f(tape, vars).value().item();
  };
  return compare(analytic, params, value, opts);
}

// ---------------------------------------------------------------------------

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape), 0.0);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

struct Case {
  std::string name;
  std::vector<Shape> shapes;
  std::function<Var(Tape&, std::span<const Var>)> op;
  double lo = -1.0;
  double hi = 1.0;
};

/// sum(op(x) * R) with a fixed random R, so every output element matters.
ScalarFn projected(const std::function<Var(Tape&, std::span<const Var>)>& op, Rng& rng) {
  auto r = std::make_shared<std::optional<Tensor>>();
  auto r_seed = rng.next();
  return [op, r, r_seed](Tape& tape, std::span<const Var> xs) {
    const Var y = op(tape, xs);
    if (!*r) {
      Rng local(r_seed);
      *r = random_tensor(local, y.shape());
    }
    return ad::sum_all(ad::mul(y, tape.constant(**r)));
  };
}

PosteriorPredictorParams posterior_from(std::span<const Var> xs, std::size_t offset, std::size_t heads) {
  PosteriorPredictorParams p;
  for (std::size_t h = 0; h < heads; ++h) {
    p.query.push_back(xs[offset + 3 * h]);
    p.key.push_back(xs[offset + 3 * h + 1]);
    p.value.push_back(xs[offset + 3 * h + 2]);
  }
  std::size_t k = offset + 3 * heads;
  p.out_weight = xs[k++];
  p.out_bias = xs[k++];
  p.score = xs[k++];
  if (k < xs.size()) p.layer_embedding = xs[k];
  return p;
}

std::vector<Shape> posterior_shapes(std::size_t n, std::size_t d, std::size_t heads, bool embedding) {
  const std::size_t dh = d / heads;
  std::vector<Shape> s;
  for (std::size_t h = 0; h < heads; ++h) {
    s.push_back({d, dh});
    s.push_back({d, dh});
    s.push_back({d, dh});
  }
  s.push_back({heads * dh, d});
  s.push_back({d});
  s.push_back({d, 1});
  if (embedding) s.push_back({n, d});
  return s;
}

std::vector<Case> primitive_cases() {
  std::vector<Case> c;
  auto unary = [](auto fn) { return [fn](Tape&, std::span<const Var> x) { return fn(x[0]); }; };
  auto binary = [](auto fn) { return [fn](Tape&, std::span<const Var> x) { return fn(x[0], x[1]); }; };

  c.push_back({"matmul", {{3, 4}, {4, 5}}, binary(ad::matmul)});
  c.push_back({"matmul_batched", {{2, 3, 4}, {2, 4, 5}}, binary(ad::matmul)});
  c.push_back({"matmul_broadcast_rhs", {{2, 3, 4}, {4, 5}}, binary(ad::matmul)});
  c.push_back({"matmul_broadcast_lhs", {{3, 4}, {2, 4, 5}}, binary(ad::matmul)});
  c.push_back({"transpose", {{2, 3, 4}}, unary(ad::transpose)});
  c.push_back({"add_broadcast", {{2, 3, 4}, {4}}, binary(ad::add)});
  c.push_back({"sub_broadcast", {{3, 4}, {3, 4}}, binary(ad::sub)});
  c.push_back({"mul_broadcast", {{2, 3, 4}, {3, 4}}, binary(ad::mul)});
  c.push_back({"scalar_ops", {{3, 4}},
               [](Tape&, std::span<const Var> x) { return ad::neg(ad::add_scalar(ad::mul_scalar(x[0], 1.7), -0.3)); }});
  c.push_back({"tanh", {{3, 5}}, unary(ad::tanh)});
  c.push_back({"log", {{3, 5}}, unary(ad::log), 0.5, 2.0});
  c.push_back({"softmax_last", {{2, 3, 4}}, [](Tape&, std::span<const Var> x) { return ad::softmax(x[0], 2); }});
  c.push_back({"softmax_middle", {{2, 3, 4}}, [](Tape&, std::span<const Var> x) { return ad::softmax(x[0], 1); }});
  c.push_back({"log_softmax", {{2, 3, 4}}, [](Tape&, std::span<const Var> x) { return ad::log_softmax(x[0], 2); }});
  c.push_back({"mean", {{2, 3, 4}}, [](Tape&, std::span<const Var> x) { return ad::mean(x[0], 1); }});
  c.push_back({"sum", {{2, 3, 4}}, [](Tape&, std::span<const Var> x) { return ad::sum(x[0], 0); }});
  c.push_back({"sum_all", {{2, 3}}, unary(ad::sum_all)});
  c.push_back({"reshape", {{2, 6}}, [](Tape&, std::span<const Var> x) { return ad::reshape(x[0], {3, 4}); }});
  c.push_back({"select", {{2, 3, 4}}, [](Tape&, std::span<const Var> x) { return ad::select(x[0], 1, 2); }});
  c.push_back({"stack", {{3, 4}, {3, 4}},
               [](Tape&, std::span<const Var> x) { return ad::stack({x[0], x[1]}, 1); }});
  c.push_back({"concat", {{2, 3}, {2, 4}},
               [](Tape&, std::span<const Var> x) { return ad::concat({x[0], x[1]}, 1); }});
  c.push_back({"kl_rows", {{3, 4}},
               [](Tape&, std::span<const Var> x) {
                 return ad::kl_rows(x[0], Tensor({4}, std::vector<double>{0.1, 0.2, 0.3, 0.4}));
               },
               0.05, 1.0});
  c.push_back({"kl_rows_softmax", {{3, 4}},
               [](Tape&, std::span<const Var> x) {
                 return ad::kl_rows(ad::softmax(x[0], 1), Tensor({4}, std::vector<double>{0.4, 0.3, 0.2, 0.1}));
               },
               -2.0, 2.0});
  c.push_back({"layer_weighted_sum_rows", {{2, 3, 2, 4}, {2, 3}}, binary(layer_weighted_sum)});
  c.push_back({"layer_weighted_sum_shared", {{2, 3, 2, 4}, {3}}, binary(layer_weighted_sum)});
  c.push_back({"weighted_sum_aggregate", {{2, 3, 2, 4}, {3}}, binary(weighted_sum_aggregate)});
  c.push_back({"last_layer_select", {{2, 3, 2, 4}}, unary(last_layer_select)});
  c.push_back({"pool_layers", {{2, 3, 2, 4}}, unary([](const Var& v) { return pool_layers(v); })});
  c.push_back({"lora_linear", {{2, 3, 4}, {4, 5}, {4, 2}, {2, 5}},
               [](Tape&, std::span<const Var> x) { return lora_linear(x[0], x[1], x[2], x[3], 0.7); }});

  {
    std::vector<Shape> s{{2, 3, 4}};
    for (auto& p : posterior_shapes(3, 4, 2, false)) s.push_back(p);
    c.push_back({"posterior", s, [](Tape&, std::span<const Var> x) { return posterior_forward(x[0], posterior_from(x, 1, 2)); }});
  }
  {
    std::vector<Shape> s{{2, 3, 4}};
    for (auto& p : posterior_shapes(3, 4, 1, true)) s.push_back(p);
    c.push_back({"posterior_embedding", s,
                 [](Tape&, std::span<const Var> x) { return posterior_forward(x[0], posterior_from(x, 1, 1)); }});
  }
  c.push_back({"probing_heads", {{2, 2, 4}, {4, 5}, {5}, {5, 3}, {3}, {4, 3}, {3}},
               [](Tape&, std::span<const Var> x) {
                 ProbingHeadParams p;
                 p.heads.push_back(ProbingHead{x[1], x[2], x[3], x[4]});
                 p.heads.push_back(ProbingHead{std::nullopt, std::nullopt, x[5], x[6]});
                 return heads_forward_pooled(x[0], p);
               }});
  return c;
}

/// Gradient of the training loss with respect to every model parameter,
/// checked by perturbing the model state itself.
GradCheckReport model_check(ModelKind kind, bool lora, std::uint64_t seed, const GradCheckOptions& opts) {
  const ModelDims dims{3, 4, 2};
  ModelConfig mc;
  mc.kind = kind;
  mc.head_hidden = 5;
  mc.mhsa_heads = 2;
  mc.lora.enabled = lora;
  mc.lora.rank = 2;
  mc.lora.scale = 0.5;
  ModelState state = init_model(mc, dims, seed);
  Rng rng(derive_seed(seed, 7));
  for (auto& [name, t] : state.params) {
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-0.8, 0.8);
  }
  const Tensor stack = random_tensor(rng, {2, 3, 2, 4});
  const std::vector<Label> labels{static_cast<Label>(rng.below(2)), static_cast<Label>(rng.below(2))};
  const Categorical prior = discretized_reversed_chi2(PriorSpec{3, dims.n_layers});
  const double beta = 0.3;

  std::vector<std::string> names;
  std::vector<Tensor> point, analytic;
  {
    Tape tape;
    const ForwardPass pass = model_forward(tape, mc, state, stack);
    const LossBreakdown loss = model_loss(pass, kind, labels, prior, beta);
    const GradientMap grads = tape.backward(loss.total);
    for (const auto& [name, var] : pass.params) {
      names.push_back(name);
      point.push_back(state.params.at(name));
      analytic.push_back(grads.at(var.id()));
    }
  }
  const ValueFn value = [&](const std::vector<Tensor>& ps) {
    ModelState s = state;
    for (std::size_t i = 0; i < names.size(); ++i) s.params.at(names[i]) = ps[i];
    Tape tape;
    const ForwardPass pass = model_forward(tape, mc, s, stack);
    return model_loss(pass, kind, labels, prior, beta).total_value;
  };
  return compare(analytic, point, value, opts);
}

}  // namespace

std::vector<GradSuiteResult> run_gradient_suite(int seeds, const GradCheckOptions& opts) {
  std::vector<GradSuiteResult> out;
  const auto cases = primitive_cases();
  for (std::size_t ci = 0; ci < cases.size(); ++ci) {
    const Case& c = cases[ci];
    GradSuiteResult r{c.name, seeds, 0, 0.0};
    for (int s = 0; s < seeds; ++s) {
      Rng rng(derive_seed(0x67726164ULL + ci, static_cast<std::uint64_t>(s)));
      std::vector<Tensor> params;
      for (const auto& shape : c.shapes) params.push_back(random_tensor(rng, shape, c.lo, c.hi));
      const GradCheckReport rep = finite_diff_check(projected(c.op, rng), params, opts);
      r.worst_rel_error = std::max(r.worst_rel_error, rep.max_rel_error);
      if (!rep.passed) ++r.failures;
    }
    out.push_back(r);
  }

  struct ModelCase {
    const char* name;
    ModelKind kind;
    bool lora;
  };
  const ModelCase model_cases[] = {
      {"varan_loss_end_to_end", ModelKind::varan, false},
      {"varan_loss_lora", ModelKind::varan, true},
      {"weighted_sum_loss", ModelKind::weighted_sum, false},
      {"last_layer_loss", ModelKind::last_layer, false},
  };
  for (std::size_t mi = 0; mi < std::size(model_cases); ++mi) {
    const auto& mcase = model_cases[mi];
    GradSuiteResult r{mcase.name, seeds, 0, 0.0};
    for (int s = 0; s < seeds; ++s) {
      const auto rep = model_check(mcase.kind, mcase.lora, derive_seed(0x6d6f64656cULL + mi, static_cast<std::uint64_t>(s)), opts);
      r.worst_rel_error = std::max(r.worst_rel_error, rep.max_rel_error);
      if (!rep.passed) ++r.failures;
    }
    out.push_back(r);
  }
  return out;
}

}  // namespace varan
