#include "varan/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>

#include "varan/container.hpp"
#include "varan/distributions.hpp"
#include "varan/rng.hpp"

namespace varan {

AdamState make_adam(const OptimConfig& optim) {
  AdamState s;
  s.lr = optim.lr;
  s.beta1 = optim.beta1;
  s.beta2 = optim.beta2;
  s.eps = optim.eps;
  s.weight_decay = optim.weight_decay;
  return s;
}

void adam_step(std::map<std::string, Tensor>& params, const std::map<std::string, Tensor>& grads, AdamState& state) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument("gradient for unknown parameter '" + name + "'");
    if (it->second.shape() != g.shape()) {
      throw ShapeError("gradient shape " + shape_string(g.shape()) + " does not match parameter '" + name + "' " +
                       shape_string(it->second.shape()));
    }
    if (!g.all_finite()) throw NonFiniteGradientError("non-finite gradient for parameter '" + name + "'");
  }

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name);
    auto [mit, m_new] = state.m.try_emplace(name, Tensor(p.shape(), 0.0));
    auto [vit, v_new] = state.v.try_emplace(name, Tensor(p.shape(), 0.0));
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    for (std::size_t i = 0; i < p.numel(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      p[i] -= state.lr * state.weight_decay * p[i];
      p[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
  }
}

// ---------------------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  Container out;
  out.meta["format"] = "varan-checkpoint";
  out.meta["format_version"] = kCheckpointFormatVersion;
  out.meta["kind"] = to_string(c.state.kind);
  out.meta["step"] = c.step;
  out.meta["best_val_metric"] = c.best_val_metric;
  out.meta["config"] = c.config;
  for (const auto& [name, t] : c.state.params) out.f64.emplace_back("param/" + name, t);
  for (const auto& [name, t] : c.state.frozen) out.f64.emplace_back("frozen/" + name, t);
  write_container(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const Container in = read_container(path);
  if (in.meta.value("format", std::string()) != "varan-checkpoint") {
    throw CorruptFileError(path.string() + ": not a checkpoint file");
  }
  const int version = in.meta.value("format_version", -1);
  if (version != kCheckpointFormatVersion) {
    throw FormatVersionError(path.string() + ": checkpoint format version " + std::to_string(version) + ", expected " +
                             std::to_string(kCheckpointFormatVersion));
  }
  Checkpoint c;
  try {
    c.state.kind = parse_model_kind(in.meta.at("kind").get<std::string>());
    c.step = in.meta.at("step").get<std::int64_t>();
    c.best_val_metric = in.meta.at("best_val_metric").get<double>();
    c.config = in.meta.at("config");
  } catch (const std::exception& e) {
    throw CorruptFileError(path.string() + ": bad checkpoint manifest (" + e.what() + ")");
  }
  for (const auto& [name, t] : in.f64) {
    if (name.rfind("param/", 0) == 0) {
      c.state.params.emplace(name.substr(6), t);
    } else if (name.rfind("frozen/", 0) == 0) {
      c.state.frozen.emplace(name.substr(7), t);
    } else {
      throw CorruptFileError(path.string() + ": unexpected array '" + name + "'");
    }
  }
  return c;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, ModelKind expected) {
  Checkpoint c = load_checkpoint(path);
  if (c.state.kind != expected) {
    throw KindMismatchError(path.string() + " holds a " + to_string(c.state.kind) + " model, expected " +
                            to_string(expected));
  }
  return c;
}

// ---------------------------------------------------------------------------

namespace {

Categorical make_prior(const RunConfig& config, std::size_t n_layers) {
  return discretized_reversed_chi2(PriorSpec{config.objective.prior_df, n_layers});
}

struct Accumulator {
  double loss = 0.0, task = 0.0, kl = 0.0;
  std::size_t count = 0;
  std::vector<Label> predicted, labels;

  void add(const LossBreakdown& l, const Prediction& p, std::span<const Label> y) {
    const auto b = static_cast<double>(y.size());
    loss += l.total_value * b;
    task += l.expected_task_loss * b;
    kl += l.kl_term * b;
    count += y.size();
    const auto pred = predict_labels(p.combined_log_scores);
    predicted.insert(predicted.end(), pred.begin(), pred.end());
    labels.insert(labels.end(), y.begin(), y.end());
  }

  EvalMetrics finish() const {
    EvalMetrics m;
    const auto n = static_cast<double>(count);
    m.loss = loss / n;
    m.task_loss = task / n;
    m.kl = kl / n;
    m.accuracy = accuracy(predicted, labels);
    m.weighted_f1 = weighted_f1(predicted, labels);
    return m;
  }
};

Tensor concat_rows(const std::vector<Tensor>& parts) {
  Shape shape = parts.front().shape();
  std::vector<double> data;
  shape[0] = 0;
  for (const auto& p : parts) {
    shape[0] += p.dim(0);
    data.insert(data.end(), p.data().begin(), p.data().end());
  }
  return Tensor(std::move(shape), std::move(data));
}

ModelConfig model_config_for(const RunConfig& config, ModelKind kind) {
  ModelConfig mc = config.model;
  mc.kind = kind;
  return mc;
}

void emit(std::vector<nlohmann::ordered_json>& sink, std::ostream* out, nlohmann::ordered_json rec) {
  if (out) *out << rec.dump() << '\n';
  sink.push_back(std::move(rec));
}

}  // namespace

EvalResult evaluate(const RunConfig& config, const ModelState& state, const SplitData& split, std::size_t chunk) {
  if (split.size() == 0) throw std::invalid_argument("cannot evaluate an empty split");
  const ModelConfig mc = model_config_for(config, state.kind);
  const Categorical prior = make_prior(config, split.stacks.dim(1));
  Accumulator acc;
  std::vector<Tensor> scores, lps, weights;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < split.size(); start += chunk) {
    const std::size_t end = std::min(split.size(), start + chunk);
    rows.resize(end - start);
    std::iota(rows.begin(), rows.end(), start);
    const auto labels = split.batch_labels(rows);
    Tape tape;
    const ForwardPass pass = model_forward(tape, mc, state, split.batch(rows));
    const LossBreakdown loss = model_loss(pass, state.kind, labels, prior, config.objective.beta);
    Prediction pred = model_predict(pass, state.kind);
    acc.add(loss, pred, labels);
    scores.push_back(std::move(pred.combined_log_scores));
    lps.push_back(std::move(pred.per_layer_log_probs));
    weights.push_back(std::move(pred.weights));
  }
  EvalResult r;
  r.metrics = acc.finish();
  r.prediction = Prediction{concat_rows(scores), concat_rows(lps), concat_rows(weights)};
  return r;
}

TrainResult train(const RunConfig& config, const SynthDataset& data, ModelKind kind, std::ostream* metrics_out) {
  config.validate();
  const ModelConfig mc = model_config_for(config, kind);
  const SynthSpec& spec = data.spec;
  const ModelDims dims{spec.n_layers, spec.dim, spec.n_classes};
  const Categorical prior = make_prior(config, spec.n_layers);

  ModelState state = init_model(mc, dims, derive_seed(config.seed, kInitStream));
  AdamState adam = make_adam(config.optim);

  TrainResult result;
  std::int64_t step = 0;

  EvalMetrics val = evaluate(config, state, data.val).metrics;
  emit(result.metrics, metrics_out, metrics_record(step, "val", val));
  ModelState best = state;
  double best_acc = val.accuracy;
  std::int64_t best_step = 0;

  const std::size_t n_train = data.train.size();
  const std::size_t batch = config.optim.batch_size;
  std::vector<std::size_t> order(n_train);
  std::vector<std::size_t> rows;
  for (std::size_t epoch = 0; epoch < config.optim.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(config.seed, kBatchOrderStream + epoch));
    for (std::size_t i = n_train; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    Accumulator train_acc;
    for (std::size_t start = 0; start < n_train; start += batch) {
      const std::size_t end = std::min(n_train, start + batch);
      rows.assign(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
      const auto labels = data.train.batch_labels(rows);

      Tape tape;
      const ForwardPass pass = model_forward(tape, mc, state, data.train.batch(rows));
      const LossBreakdown loss = model_loss(pass, kind, labels, prior, config.objective.beta);
      if (!std::isfinite(loss.total_value)) {
        throw DivergenceError("loss became non-finite at step " + std::to_string(step));
      }
      const GradientMap grads = tape.backward(loss.total);
      std::map<std::string, Tensor> named;
      for (const auto& [name, var] : pass.params) named.emplace(name, grads.at(var.id()));
      adam_step(state.params, named, adam);
      ++step;
      train_acc.add(loss, model_predict(pass, kind), labels);
    }
    emit(result.metrics, metrics_out, metrics_record(step, "train", train_acc.finish()));

    val = evaluate(config, state, data.val).metrics;
    emit(result.metrics, metrics_out, metrics_record(step, "val", val));
    if (val.accuracy > best_acc) {
      best_acc = val.accuracy;
      best = state;
      best_step = step;
    }
  }

  result.test = evaluate(config, best, data.test).metrics;
  emit(result.metrics, metrics_out, metrics_record(best_step, "test", result.test));

  RunConfig echo = config;
  echo.model.kind = kind;
  result.checkpoint.state = std::move(best);
  result.checkpoint.config = to_json(echo);
  result.checkpoint.step = best_step;
  result.checkpoint.best_val_metric = best_acc;
  return result;
}

std::vector<std::string> zero_gradient_params(const RunConfig& config, const ModelState& state, const Tensor& stack,
                                              std::span<const Label> labels) {
  const ModelConfig mc = model_config_for(config, state.kind);
  const Categorical prior = make_prior(config, stack.dim(1));
  Tape tape;
  const ForwardPass pass = model_forward(tape, mc, state, stack);
  const LossBreakdown loss = model_loss(pass, state.kind, labels, prior, config.objective.beta);
  const GradientMap grads = tape.backward(loss.total);
  std::vector<std::string> zero;
  for (const auto& [name, var] : pass.params) {
    const Tensor& g = grads.at(var.id());
    bool any = false;
    for (double v : g.data()) any = any || v != 0.0;
    if (!any) zero.push_back(name);
  }
  return zero;
}

void export_weight_analysis(const RunConfig& config, const Checkpoint& checkpoint, const SplitData& split,
                            const std::filesystem::path& out) {
  if (checkpoint.state.kind != ModelKind::varan) {
    throw KindMismatchError("weight analysis needs a varan checkpoint, got " + to_string(checkpoint.state.kind));
  }
  const EvalResult r = evaluate(config, checkpoint.state, split);
  const Tensor& w = r.prediction.weights;
  const std::size_t n = w.dim(1);
  std::ofstream f(out);
  if (!f) throw std::runtime_error("cannot write " + out.string());
  f << "sample_id,true_regime,argmax_layer";
  for (std::size_t l = 0; l < n; ++l) f << ",w_" << l + 1;
  f << '\n';
  char buf[64];
  for (std::size_t i = 0; i < split.size(); ++i) {
    const auto row = w.data().subspan(i * n, n);
    f << split.ids[i] << ',' << split.regimes[i] << ',' << argmax(row) + 1;
    for (double v : row) {
      std::snprintf(buf, sizeof buf, ",%.17g", v);
      f << buf;
    }
    f << '\n';
  }
}

}  // namespace varan
