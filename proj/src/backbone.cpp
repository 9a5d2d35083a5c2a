#include "varan/backbone.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "varan/aggregation.hpp"
#include "varan/rng.hpp"

namespace varan {

namespace {

Tensor uniform_matrix(Rng& rng, std::size_t rows, std::size_t cols, double bound) {
  Tensor t(Shape{rows, cols});
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

Var block(const Var& h, const BackboneVars& p, const LoraAdapters* lora, std::size_t i) {
  Var pre = lora ? lora_linear(h, p.ffn[i], lora->a[i], lora->b[i], lora->scale) : ad::matmul(h, p.ffn[i]);
  return ad::add(h, ad::tanh(pre));
}

void check_lora(const BackboneVars& p, const LoraAdapters* lora) {
  if (lora && (lora->a.size() != p.ffn.size() || lora->b.size() != p.ffn.size())) {
    throw ShapeError("LoRA adapters for " + std::to_string(lora->a.size()) + " layers, backbone has " +
                     std::to_string(p.ffn.size()));
  }
}

}  // namespace

BackboneWeights make_backbone(std::size_t n_layers, std::size_t d_in, std::size_t dim, std::uint64_t seed,
                              double gain) {
  Rng rng(seed);
  BackboneWeights w;
  w.input_proj = uniform_matrix(rng, d_in, dim, gain / std::sqrt(static_cast<double>(d_in)));
  for (std::size_t i = 0; i < n_layers; ++i) {
    w.ffn.push_back(uniform_matrix(rng, dim, dim, gain / std::sqrt(static_cast<double>(dim))));
  }
  return w;
}

BackboneVars bind_frozen(Tape& tape, const BackboneWeights& w) {
  BackboneVars v;
  v.input_proj = tape.constant(w.input_proj);
  for (const auto& m : w.ffn) v.ffn.push_back(tape.constant(m));
  return v;
}

Var toy_backbone_forward(const Var& raw, const BackboneVars& params, const LoraAdapters* lora, bool include_layer0) {
  if (raw.shape().size() != 3) throw ShapeError("backbone input must be (b, s, d_in), got " + shape_string(raw.shape()));
  check_lora(params, lora);
  Var h = ad::matmul(raw, params.input_proj);
  std::vector<Var> layers;
  if (include_layer0) layers.push_back(h);
  for (std::size_t i = 0; i < params.ffn.size(); ++i) {
    h = block(h, params, lora, i);
    layers.push_back(h);
  }
  return ad::stack(layers, 1);
}

Var refine_stack(const Var& stack, const BackboneVars& params, const LoraAdapters* lora) {
  const Shape s = stack.shape();
  if (s.size() != 4 || s[1] != params.ffn.size()) {
    throw ShapeError("refine_stack: stack " + shape_string(s) + " vs " + std::to_string(params.ffn.size()) +
                     " backbone layers");
  }
  check_lora(params, lora);
  std::vector<Var> layers;
  for (std::size_t i = 0; i < s[1]; ++i) layers.push_back(block(ad::select(stack, 1, i), params, lora, i));
  return ad::stack(layers, 1);
}

}  // namespace varan
