#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>

#include "varan/aggregation.hpp"
#include "varan/backbone.hpp"
#include "varan/distributions.hpp"
#include "varan/objective.hpp"

namespace varan {

enum class ModelKind { varan, weighted_sum, last_layer };

std::string to_string(ModelKind kind);
/// Throws std::invalid_argument for an unknown name.
ModelKind parse_model_kind(const std::string& name);

struct LoraConfig {
  bool enabled = false;
  std::size_t rank = 16;
  double scale = 1.0;
};

struct ModelConfig {
  ModelKind kind = ModelKind::varan;
  std::size_t head_hidden = 256;  // 0: probing heads are a single linear map
  std::size_t mhsa_heads = 4;
  bool layer_embedding = false;
  bool include_layer0 = false;
  LoraConfig lora;
};

struct ModelDims {
  std::size_t n_layers = 0;
  std::size_t dim = 0;
  std::size_t n_classes = 0;
};

/// Named parameter tensors. `params` are trained; `frozen` holds the toy
/// backbone weights used in LoRA mode.
struct ModelState {
  ModelKind kind = ModelKind::varan;
  std::map<std::string, Tensor> params;
  std::map<std::string, Tensor> frozen;
};

/// Probing-head and projection weights are uniform in +-1/sqrt(fan_in). The
/// posterior's final score map starts at a tenth of that, so initial layer
/// weights are close to uniform. LoRA A starts at zero.
ModelState init_model(const ModelConfig& config, const ModelDims& dims, std::uint64_t seed);

struct ForwardPass {
  std::map<std::string, Var> params;  // every trainable parameter node
  Var layer_weights;                  // varan: (b, n); weighted_sum: (n); last_layer: unset
  Var log_probs;                      // varan: per-layer (b, n, C); baselines: (b, C)
};

/// Builds the forward graph for a (b, n, s, d) batch of stored stacks.
ForwardPass model_forward(Tape& tape, const ModelConfig& config, const ModelState& state, const Tensor& stack);

/// varan: the variational loss; baselines: cross-entropy with kl_term = 0.
LossBreakdown model_loss(const ForwardPass& pass, ModelKind kind, std::span<const Label> labels,
                         const Categorical& prior, double beta);

/// Detached prediction. Baselines are reported as a single "layer" with
/// weight 1, so the combined scores equal their log-probabilities.
Prediction model_predict(const ForwardPass& pass, ModelKind kind);

}  // namespace varan
