#include "varan/aggregation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <stdexcept>
#include <string>

#include "varan/kernels.hpp"

namespace varan {

LayerStack::LayerStack(Tensor states) : states_(std::move(states)) {
  if (states_.rank() != 4) {
    throw ShapeError("layer stack must be (batch, layers, seq, dim), got " + shape_string(states_.shape()));
  }
  if (!states_.all_finite()) throw std::invalid_argument("layer stack contains non-finite values");
}

Var pool_layers(const Var& stack) {
  if (stack.shape().size() != 4) {
    throw ShapeError("pool_layers expects (b, n, s, d), got " + shape_string(stack.shape()));
  }
  return ad::mean(stack, 2);
}

Tensor pool_layers(const LayerStack& stack) { return mean_axis(stack.states(), 2); }

Var posterior_logits(const Var& pooled, const PosteriorPredictorParams& p) {
  const Shape s = pooled.shape();
  if (s.size() != 3) throw ShapeError("posterior expects pooled (b, n, d), got " + shape_string(s));
  const std::size_t heads = p.query.size();
  if (heads == 0 || p.key.size() != heads || p.value.size() != heads) {
    throw ShapeError("posterior predictor needs matching query/key/value head lists");
  }
  const std::size_t d = s[2];
  const std::size_t d_head = p.query[0].shape().at(1);
  if (heads * d_head != d || p.query[0].shape().at(0) != d) {
    throw ShapeError("posterior predictor dimension mismatch: pooled " + shape_string(s) + ", " +
                     std::to_string(heads) + " heads of " + shape_string(p.query[0].shape()));
  }

  Var tokens = pooled;
  if (p.layer_embedding) tokens = ad::add(tokens, *p.layer_embedding);

  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d_head));
  std::vector<Var> mixed;
  mixed.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var q = ad::matmul(tokens, p.query[h]);
    Var k = ad::matmul(tokens, p.key[h]);
    Var v = ad::matmul(tokens, p.value[h]);
    Var scores = ad::mul_scalar(ad::matmul(q, ad::transpose(k)), inv_sqrt);  // (b, n, n)
    Var attn = ad::softmax(scores, 2);
    mixed.push_back(ad::matmul_sorted(attn, v));  // (b, n, d_head), sum independent of token order
  }
  Var joined = heads == 1 ? mixed[0] : ad::concat(mixed, 2);
  Var projected = ad::add(ad::matmul(joined, p.out_weight), p.out_bias);
  Var scores = ad::matmul(projected, p.score);  // (b, n, 1)
  return ad::reshape(scores, Shape{s[0], s[1]});
}

Var posterior_forward(const Var& pooled, const PosteriorPredictorParams& params) {
  return ad::softmax(posterior_logits(pooled, params), 1);
}

Var head_forward(const Var& features, const ProbingHead& head) {
  Var x = features;
  if (head.hidden_weight) {
    if (!head.hidden_bias) throw std::invalid_argument("probing head has a hidden weight but no bias");
    x = ad::tanh(ad::add(ad::matmul(x, *head.hidden_weight), *head.hidden_bias));
  }
  return ad::add(ad::matmul(x, head.out_weight), head.out_bias);
}

Var heads_forward_pooled(const Var& pooled, const ProbingHeadParams& params) {
  const Shape s = pooled.shape();
  if (s.size() != 3) throw ShapeError("heads expect pooled (b, n, d), got " + shape_string(s));
  if (params.heads.size() != s[1]) {
    throw ShapeError("head count " + std::to_string(params.heads.size()) + " does not match " +
                     std::to_string(s[1]) + " layers");
  }
  std::vector<Var> logits;
  logits.reserve(s[1]);
  for (std::size_t i = 0; i < s[1]; ++i) logits.push_back(head_forward(ad::select(pooled, 1, i), params.heads[i]));
  return ad::stack(logits, 1);
}

Var heads_forward(const Var& stack, const ProbingHeadParams& params) {
  return heads_forward_pooled(pool_layers(stack), params);
}

Var layer_weighted_sum(const Var& stack, const Var& weights) {
  const Tensor& sv = stack.value();
  const Tensor& wv = weights.value();
  if (sv.rank() < 2) throw ShapeError("layer_weighted_sum needs (b, n, ...), got " + shape_string(sv.shape()));
  const std::size_t b = sv.dim(0), n = sv.dim(1);
  const bool shared = wv.rank() == 1;
  if (!(shared && wv.dim(0) == n) && !(wv.rank() == 2 && wv.dim(0) == b && wv.dim(1) == n)) {
    throw ShapeError("weight shape " + shape_string(wv.shape()) + " does not fit stack " + shape_string(sv.shape()));
  }
  Shape out_shape(sv.shape().begin() + 2, sv.shape().end());
  out_shape.insert(out_shape.begin(), b);
  const std::size_t row = sv.numel() / (b * n);
  const std::size_t w_stride = shared ? 0 : n;
  Tensor out(out_shape);
  kernels::layer_weighted_sum(b, n, row, sv.data(), wv.data(), w_stride, out.data());

  return stack.tape().record(
      std::move(out), {stack, weights},
      [sv, wv, b, n, row, w_stride](const Tensor& g, std::span<Tensor* const> pg) {
        if (pg[0]) {
          Tensor& gs = *pg[0];
          for (std::size_t bi = 0; bi < b; ++bi)
            for (std::size_t l = 0; l < n; ++l) {
              const double w = wv[bi * w_stride + l];
              for (std::size_t r = 0; r < row; ++r) gs[(bi * n + l) * row + r] += w * g[bi * row + r];
            }
        }
        if (pg[1]) {
          Tensor& gw = *pg[1];
          for (std::size_t bi = 0; bi < b; ++bi)
            for (std::size_t l = 0; l < n; ++l) {
              double acc = 0.0;
              for (std::size_t r = 0; r < row; ++r) acc += sv[(bi * n + l) * row + r] * g[bi * row + r];
              gw[bi * w_stride + l] += acc;
            }
        }
      });
}

Var weighted_sum_aggregate(const Var& stack, const Var& logits) {
  if (logits.shape().size() != 1 || stack.shape().size() != 4 || logits.shape()[0] != stack.shape()[1]) {
    throw ShapeError("weighted_sum_aggregate: weights " + shape_string(logits.shape()) + " do not fit stack " +
                     shape_string(stack.shape()));
  }
  return layer_weighted_sum(stack, ad::softmax(logits, 0));
}

Var last_layer_select(const Var& stack) {
  if (stack.shape().size() != 4) throw ShapeError("last_layer_select expects (b, n, s, d)");
  return ad::select(stack, 1, stack.shape()[1] - 1);
}

Var lora_linear(const Var& x, const Var& base, const Var& adapter_a, const Var& adapter_b, double scale) {
  const Shape w = base.shape();
  const Shape a = adapter_a.shape();
  const Shape b = adapter_b.shape();
  if (w.size() != 2 || a.size() != 2 || b.size() != 2) throw ShapeError("lora_linear expects matrices");
  const std::size_t d = w[0], k = w[1], r = a[1];
  if (r < 1 || r > std::min(d, k)) {
    throw std::invalid_argument("LoRA rank " + std::to_string(r) + " outside [1, " + std::to_string(std::min(d, k)) + "]");
  }
  if (a[0] != d || b[0] != r || b[1] != k) {
    throw ShapeError("LoRA shapes do not conform: W " + shape_string(w) + ", A " + shape_string(a) + ", B " +
                     shape_string(b));
  }
  Var base_out = ad::matmul(x, base);
  Var delta = ad::matmul(ad::matmul(x, adapter_a), adapter_b);
  return ad::add(base_out, ad::mul_scalar(delta, scale));
}

void write_weights_long(std::ostream& os, const Tensor& weights, std::span<const std::size_t> sample_ids) {
  if (weights.rank() != 2 || weights.dim(0) != sample_ids.size()) {
    throw ShapeError("weight export: " + shape_string(weights.shape()) + " for " + std::to_string(sample_ids.size()) +
                     " samples");
  }
  const std::size_t n = weights.dim(1);
  os << "sample_id,layer_index,weight\n";
  char buf[96];
  for (std::size_t i = 0; i < sample_ids.size(); ++i)
    for (std::size_t l = 0; l < n; ++l) {
      std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g\n", sample_ids[i], l + 1, weights[i * n + l]);
      os << buf;
    }
}

std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i) {
    if (row[i] > row[best]) best = i;
  }
  return best;
}

}  // namespace varan
