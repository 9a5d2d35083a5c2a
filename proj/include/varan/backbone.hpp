#pragma once

// Frozen toy encoder: h_0 = raw * P, h_i = h_{i-1} + tanh(h_{i-1} * W_i).
// With LoRA adapters, each feed-forward W_i becomes W_i + scale * A_i * B_i.

#include <cstdint>
#include <optional>
#include <vector>

#include "varan/autodiff.hpp"

namespace varan {

struct BackboneWeights {
  Tensor input_proj;        // d_in x d
  std::vector<Tensor> ffn;  // n matrices, d x d
};

/// Seeded frozen weights, entries uniform in +-gain/sqrt(fan_in).
BackboneWeights make_backbone(std::size_t n_layers, std::size_t d_in, std::size_t dim, std::uint64_t seed,
                              double gain = 0.5);

struct BackboneVars {
  Var input_proj;
  std::vector<Var> ffn;
};

/// Binds the weights as tape constants, so they never receive gradients.
BackboneVars bind_frozen(Tape& tape, const BackboneWeights& w);

struct LoraAdapters {
  std::vector<Var> a;  // d x r per layer
  std::vector<Var> b;  // r x d per layer
  double scale = 1.0;
};

/// raw (b, s, d_in) -> stack (b, n, s, d), or (b, n + 1, s, d) with h_0
/// prepended when include_layer0 is set.
Var toy_backbone_forward(const Var& raw, const BackboneVars& params, const LoraAdapters* lora,
                         bool include_layer0 = false);

/// Runs block i of the backbone on layer i of an existing stack:
/// h'_i = h_i + tanh(h_i * W_i). Used when training from stored stacks.
Var refine_stack(const Var& stack, const BackboneVars& params, const LoraAdapters* lora);

}  // namespace varan
