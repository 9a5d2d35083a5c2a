#include "varan/model.hpp"

#include <cmath>
#include <stdexcept>

#include "varan/rng.hpp"

namespace varan {

std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::varan: return "varan";
    case ModelKind::weighted_sum: return "weighted_sum";
    case ModelKind::last_layer: return "last_layer";
  }
  return "unknown";
}

ModelKind parse_model_kind(const std::string& name) {
  if (name == "varan") return ModelKind::varan;
  if (name == "weighted_sum") return ModelKind::weighted_sum;
  if (name == "last_layer") return ModelKind::last_layer;
  throw std::invalid_argument("unknown model kind '" + name + "' (expected varan, weighted_sum or last_layer)");
}

namespace {

std::string idx(const std::string& prefix, std::size_t i, const std::string& suffix = "") {
  return prefix + "." + std::to_string(i) + (suffix.empty() ? "" : "." + suffix);
}

Tensor uniform(Rng& rng, Shape shape, double bound) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

void init_head(Rng& rng, std::map<std::string, Tensor>& out, const std::string& prefix, std::size_t dim,
               std::size_t hidden, std::size_t classes) {
  std::size_t fan_in = dim;
  if (hidden > 0) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
    out[prefix + ".hidden_weight"] = uniform(rng, Shape{dim, hidden}, bound);
    out[prefix + ".hidden_bias"] = uniform(rng, Shape{hidden}, bound);
    fan_in = hidden;
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  out[prefix + ".out_weight"] = uniform(rng, Shape{fan_in, classes}, bound);
  out[prefix + ".out_bias"] = uniform(rng, Shape{classes}, bound);
}

ProbingHead bind_head(const std::map<std::string, Var>& p, const std::string& prefix) {
  ProbingHead h;
  if (auto it = p.find(prefix + ".hidden_weight"); it != p.end()) {
    h.hidden_weight = it->second;
    h.hidden_bias = p.at(prefix + ".hidden_bias");
  }
  h.out_weight = p.at(prefix + ".out_weight");
  h.out_bias = p.at(prefix + ".out_bias");
  return h;
}

}  // namespace

ModelState init_model(const ModelConfig& config, const ModelDims& dims, std::uint64_t seed) {
  if (dims.n_layers == 0 || dims.dim == 0 || dims.n_classes < 2) throw std::invalid_argument("invalid model dimensions");
  Rng rng(seed);
  ModelState st;
  st.kind = config.kind;
  const std::size_t n = dims.n_layers, d = dims.dim;

  switch (config.kind) {
    case ModelKind::varan: {
      const std::size_t h = config.mhsa_heads;
      if (h == 0 || d % h != 0) {
        throw std::invalid_argument("MHSA heads (" + std::to_string(h) + ") must divide the hidden size " +
                                    std::to_string(d));
      }
      const std::size_t dh = d / h;
      const double bound = 1.0 / std::sqrt(static_cast<double>(d));
      for (std::size_t i = 0; i < h; ++i) {
        st.params[idx("posterior.query", i)] = uniform(rng, Shape{d, dh}, bound);
        st.params[idx("posterior.key", i)] = uniform(rng, Shape{d, dh}, bound);
        st.params[idx("posterior.value", i)] = uniform(rng, Shape{d, dh}, bound);
      }
      st.params["posterior.out_weight"] = uniform(rng, Shape{d, d}, bound);
      st.params["posterior.out_bias"] = uniform(rng, Shape{d}, bound);
      st.params["posterior.score"] = uniform(rng, Shape{d, 1}, 0.1 * bound);
      if (config.layer_embedding) st.params["posterior.layer_embedding"] = uniform(rng, Shape{n, d}, bound);
      for (std::size_t i = 0; i < n; ++i) init_head(rng, st.params, idx("heads", i), d, config.head_hidden, dims.n_classes);
      break;
    }
    case ModelKind::weighted_sum:
      st.params["static.logits"] = Tensor(Shape{n}, 0.0);
      init_head(rng, st.params, "head", d, config.head_hidden, dims.n_classes);
      break;
    case ModelKind::last_layer:
      init_head(rng, st.params, "head", d, config.head_hidden, dims.n_classes);
      break;
  }

  if (config.lora.enabled) {
    const std::size_t r = config.lora.rank;
    if (r < 1 || r > d) throw std::invalid_argument("LoRA rank must lie in [1, " + std::to_string(d) + "]");
    const BackboneWeights bw = make_backbone(n, d, d, derive_seed(seed, 0xb0b));
    for (std::size_t i = 0; i < n; ++i) {
      st.frozen[idx("backbone.ffn", i)] = bw.ffn[i];
      st.params[idx("lora", i, "a")] = Tensor(Shape{d, r}, 0.0);
      st.params[idx("lora", i, "b")] = uniform(rng, Shape{r, d}, 1.0 / std::sqrt(static_cast<double>(r)));
    }
  }
  return st;
}

ForwardPass model_forward(Tape& tape, const ModelConfig& config, const ModelState& state, const Tensor& stack) {
  if (config.kind != state.kind) {
    throw std::invalid_argument("config kind " + to_string(config.kind) + " does not match parameters of kind " +
                                to_string(state.kind));
  }
  ForwardPass out;
  for (const auto& [name, t] : state.params) out.params.emplace(name, tape.parameter(t));

  Var h = tape.constant(stack);
  if (h.shape().size() != 4) throw ShapeError("model input must be (b, n, s, d), got " + shape_string(h.shape()));
  const std::size_t n = h.shape()[1];

  if (config.lora.enabled) {
    BackboneVars bb;
    LoraAdapters lora;
    lora.scale = config.lora.scale;
    for (std::size_t i = 0; i < n; ++i) {
      bb.ffn.push_back(tape.constant(state.frozen.at(idx("backbone.ffn", i))));
      lora.a.push_back(out.params.at(idx("lora", i, "a")));
      lora.b.push_back(out.params.at(idx("lora", i, "b")));
    }
    h = refine_stack(h, bb, &lora);
  }

  switch (config.kind) {
    case ModelKind::varan: {
      PosteriorPredictorParams pp;
      for (std::size_t i = 0; out.params.count(idx("posterior.query", i)); ++i) {
        pp.query.push_back(out.params.at(idx("posterior.query", i)));
        pp.key.push_back(out.params.at(idx("posterior.key", i)));
        pp.value.push_back(out.params.at(idx("posterior.value", i)));
      }
      pp.out_weight = out.params.at("posterior.out_weight");
      pp.out_bias = out.params.at("posterior.out_bias");
      pp.score = out.params.at("posterior.score");
      if (auto it = out.params.find("posterior.layer_embedding"); it != out.params.end()) pp.layer_embedding = it->second;
      ProbingHeadParams hp;
      for (std::size_t i = 0; i < n; ++i) hp.heads.push_back(bind_head(out.params, idx("heads", i)));

      Var pooled = pool_layers(h);
      out.layer_weights = posterior_forward(pooled, pp);
      out.log_probs = ad::log_softmax(heads_forward_pooled(pooled, hp), 2);
      break;
    }
    case ModelKind::weighted_sum: {
      Var logits = out.params.at("static.logits");
      out.layer_weights = ad::softmax(logits, 0);
      Var agg = layer_weighted_sum(h, out.layer_weights);  // (b, s, d)
      out.log_probs = ad::log_softmax(head_forward(ad::mean(agg, 1), bind_head(out.params, "head")), 1);
      break;
    }
    case ModelKind::last_layer: {
      Var top = last_layer_select(h);
      out.log_probs = ad::log_softmax(head_forward(ad::mean(top, 1), bind_head(out.params, "head")), 1);
      break;
    }
  }
  return out;
}

LossBreakdown model_loss(const ForwardPass& pass, ModelKind kind, std::span<const Label> labels,
                         const Categorical& prior, double beta) {
  if (kind == ModelKind::varan) return varan_loss(pass.layer_weights, pass.log_probs, labels, prior, beta);
  LossBreakdown out;
  out.total = cross_entropy(pass.log_probs, labels);
  out.total_value = out.total.value().item();
  out.expected_task_loss = out.total_value;
  out.kl_term = 0.0;
  out.beta = beta;
  return out;
}

Prediction model_predict(const ForwardPass& pass, ModelKind kind) {
  if (kind == ModelKind::varan) return combine_inference(pass.layer_weights.value(), pass.log_probs.value());
  const Tensor& lp = pass.log_probs.value();
  const std::size_t b = lp.dim(0), classes = lp.dim(1);
  return combine_inference(Tensor(Shape{b, 1}, 1.0), lp.reshaped(Shape{b, 1, classes}));
}

}  // namespace varan
