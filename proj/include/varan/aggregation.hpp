#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "varan/autodiff.hpp"

namespace varan {

/// Hidden states of every encoder layer, shape (batch, layers, sequence, dim).
class LayerStack {
 public:
  explicit LayerStack(Tensor states);

  const Tensor& states() const { return states_; }
  std::size_t batch() const { return states_.dim(0); }
  std::size_t layers() const { return states_.dim(1); }
  std::size_t seq() const { return states_.dim(2); }
  std::size_t dim() const { return states_.dim(3); }

 private:
  Tensor states_;
};

/// Mean over the sequence axis: (b, n, s, d) -> (b, n, d).
Var pool_layers(const Var& stack);
Tensor pool_layers(const LayerStack& stack);

// ---------------------------------------------------------------------------
// Posterior predictor q(l | x)

struct PosteriorPredictorParams {
  std::vector<Var> query;  // h matrices, d x d_head
  std::vector<Var> key;
  std::vector<Var> value;
  Var out_weight;  // (h * d_head) x d
  Var out_bias;    // d
  Var score;       // d x 1
  /// Optional learned per-layer embedding (n x d) added to the layer tokens.
  /// Absent by default, which keeps the predictor permutation-equivariant.
  std::optional<Var> layer_embedding;
};

/// Unnormalized per-layer scores (b, n): MHSA across the n layer tokens,
/// output projection, then a linear map to one score per token.
Var posterior_logits(const Var& pooled, const PosteriorPredictorParams& params);

/// softmax of posterior_logits over the layer axis; rows are Categoricals.
Var posterior_forward(const Var& pooled, const PosteriorPredictorParams& params);

// ---------------------------------------------------------------------------
// Probing heads

/// linear(d -> hidden) -> tanh -> linear(hidden -> C), or a single
/// linear(d -> C) when `hidden_weight` is absent.
struct ProbingHead {
  std::optional<Var> hidden_weight;  // d x hidden
  std::optional<Var> hidden_bias;    // hidden
  Var out_weight;                    // hidden (or d) x C
  Var out_bias;                      // C
};

struct ProbingHeadParams {
  std::vector<ProbingHead> heads;  // one per layer, never shared
};

/// Class logits (b, C) for pooled features (b, d).
Var head_forward(const Var& features, const ProbingHead& head);

/// Per-layer logits (b, n, C); head i sees only layer i of the pooled stack.
Var heads_forward_pooled(const Var& pooled, const ProbingHeadParams& params);
Var heads_forward(const Var& stack, const ProbingHeadParams& params);

// ---------------------------------------------------------------------------
// Static baselines

/// sum_l w_l * h_l over the layer axis of a (b, n, ...) tensor. `weights` is
/// either (n) shared by the batch or (b, n) per sample.
Var layer_weighted_sum(const Var& stack, const Var& weights);

/// Convex combination (b, s, d) with weights softmax(logits), logits of shape (n).
Var weighted_sum_aggregate(const Var& stack, const Var& logits);

/// States of the top layer, (b, s, d).
Var last_layer_select(const Var& stack);

/// x * (W + scale * A * B), evaluated as x*W + scale*(x*A)*B. Pass W as a
/// tape constant to keep it frozen.
Var lora_linear(const Var& x, const Var& base, const Var& adapter_a, const Var& adapter_b, double scale);

/// Long-format export: `sample_id,layer_index,weight` (1-based layers).
void write_weights_long(std::ostream& os, const Tensor& weights, std::span<const std::size_t> sample_ids);

/// Lowest index among the maxima of a row.
std::size_t argmax(std::span<const double> row);

}  // namespace varan
