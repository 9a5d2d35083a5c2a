#include "varan/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>

#include "varan/kernels.hpp"

namespace varan {

Tape& Var::tape() const {
  if (!tape_) throw TapeError("variable is not attached to a tape");
  return *tape_;
}

const Tensor& Var::value() const { return tape().value(id_); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, true, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, const std::vector<Var>& parents, BackwardFn fn) {
  Node node;
  node.value = std::move(value);
  for (const auto& p : parents) {
    if (&p.tape() != this) throw TapeError("operands live on different tapes");
    node.parents.push_back(p.id());
    node.requires_grad = node.requires_grad || nodes_[p.id()].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

GradientMap Tape::backward(const Var& loss) const {
  if (!loss.attached() || &loss.tape() != this) throw TapeError("loss is detached from this tape");
  const Tensor& lv = nodes_[loss.id()].value;
  if (lv.numel() != 1) throw TapeError("loss must be scalar, got shape " + shape_string(lv.shape()));

  std::vector<std::optional<Tensor>> grads(loss.id() + 1);
  grads[loss.id()] = Tensor(lv.shape(), 1.0);

  std::vector<Tensor*> parent_ptrs;
  for (NodeId id = loss.id() + 1; id-- > 0;) {
    const Node& node = nodes_[id];
    if (!grads[id] || !node.backward) continue;
    parent_ptrs.assign(node.parents.size(), nullptr);
    for (std::size_t i = 0; i < node.parents.size(); ++i) {
      const NodeId pid = node.parents[i];
      if (!nodes_[pid].requires_grad) continue;
      if (!grads[pid]) grads[pid] = Tensor(nodes_[pid].value.shape(), 0.0);
      parent_ptrs[i] = &*grads[pid];
    }
    node.backward(*grads[id], parent_ptrs);
  }

  GradientMap out;
  for (NodeId id = 0; id < nodes_.size(); ++id) {
    if (!nodes_[id].is_parameter) continue;
    if (id < grads.size() && grads[id]) {
      out.emplace(id, std::move(*grads[id]));
    } else {
      out.emplace(id, Tensor(nodes_[id].value.shape(), 0.0));
    }
  }
  return out;
}

namespace {

kernels::AxisView axis_view(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw std::out_of_range("axis " + std::to_string(axis) + " out of range for shape " + shape_string(shape));
  }
  kernels::AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out = shape;
  out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  return out;
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

struct MatmulPlan {
  kernels::GemmArgs g;
  Shape out_shape;
  bool a_broadcast = false;
  bool b_broadcast = false;
};

MatmulPlan plan_matmul(const Shape& sa, const Shape& sb) {
  auto fail = [&] {
    return ShapeError("matmul shape mismatch: " + shape_string(sa) + " x " + shape_string(sb));
  };
  if (sa.size() < 2 || sb.size() < 2) throw fail();
  const std::size_t m = sa[sa.size() - 2], k = sa.back();
  const std::size_t kb = sb[sb.size() - 2], n = sb.back();
  if (k != kb) throw fail();
  const Shape batch_a(sa.begin(), sa.end() - 2);
  const Shape batch_b(sb.begin(), sb.end() - 2);

  MatmulPlan p;
  Shape batch;
  if (batch_a == batch_b) {
    batch = batch_a;
  } else if (batch_b.empty()) {
    batch = batch_a;
    p.b_broadcast = true;
  } else if (batch_a.empty()) {
    batch = batch_b;
    p.a_broadcast = true;
  } else {
    throw fail();
  }
  p.g.batch = shape_numel(batch);
  p.g.m = m;
  p.g.n = n;
  p.g.k = k;
  p.g.stride_a = p.a_broadcast ? 0 : m * k;
  p.g.stride_b = p.b_broadcast ? 0 : k * n;
  p.g.stride_c = m * n;
  p.out_shape = batch;
  p.out_shape.push_back(m);
  p.out_shape.push_back(n);
  return p;
}

Tensor matmul_forward(const Tensor& a, const Tensor& b, const MatmulPlan& p) {
  Tensor out(p.out_shape);
  kernels::gemm(p.g, a.data(), b.data(), out.data());
  return out;
}

enum class Binary { add, sub, mul };

// Shapes equal, or one operand's shape is a suffix of the other's (this
// covers scalars and bias rows broadcast over leading batch axes).
Var binary(const Var& a, const Var& b, Binary kind) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const char* name = kind == Binary::add ? "add" : kind == Binary::sub ? "sub" : "mul";
  const bool a_big = is_suffix(bv.shape(), av.shape());
  if (!a_big && !is_suffix(av.shape(), bv.shape())) {
    throw ShapeError(std::string(name) + ": incompatible shapes " + shape_string(av.shape()) + " and " +
                     shape_string(bv.shape()));
  }
  const Shape out_shape = a_big ? av.shape() : bv.shape();
  const std::size_t na = av.numel(), nb = bv.numel();
  Tensor out(out_shape);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = av[i % na], y = bv[i % nb];
    out[i] = kind == Binary::add ? x + y : kind == Binary::sub ? x - y : x * y;
  }
  Tensor a_saved = kind == Binary::mul ? av : Tensor();
  Tensor b_saved = kind == Binary::mul ? bv : Tensor();
  return a.tape().record(std::move(out), {a, b},
                         [kind, na, nb, a_saved = std::move(a_saved), b_saved = std::move(b_saved)](
                             const Tensor& g, std::span<Tensor* const> pg) {
                           const std::size_t n = g.numel();
                           if (pg[0]) {
                             Tensor& ga = *pg[0];
                             for (std::size_t i = 0; i < n; ++i) {
                               ga[i % na] += kind == Binary::mul ? g[i] * b_saved[i % nb] : g[i];
                             }
                           }
                           if (pg[1]) {
                             Tensor& gb = *pg[1];
                             for (std::size_t i = 0; i < n; ++i) {
                               const double d = kind == Binary::mul   ? g[i] * a_saved[i % na]
                                                : kind == Binary::sub ? -g[i]
                                                                      : g[i];
                               gb[i % nb] += d;
                             }
                           }
                         });
}

Var affine_scalar(const Var& a, double scale, double shift) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = v * scale + shift;
  return a.tape().record(std::move(out), {a}, [scale](const Tensor& g, std::span<Tensor* const> pg) {
    Tensor& ga = *pg[0];
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += scale * g[i];
  });
}

}  // namespace

namespace ad {

namespace {

Var matmul_impl(const Var& a, const Var& b, bool sorted) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  MatmulPlan p = plan_matmul(av.shape(), bv.shape());
  p.g.sorted_sum = sorted;
  Tensor out = matmul_forward(av, bv, p);
  return a.tape().record(std::move(out), {a, b}, [p, av, bv](const Tensor& g, std::span<Tensor* const> pg) {
    const auto& gp = p.g;
    if (pg[0]) {
      // dA = dC * B^T
      kernels::GemmArgs d{};
      d.m = gp.m;
      d.n = gp.k;
      d.k = gp.n;
      d.trans_b = true;
      d.accumulate = true;
      if (!p.a_broadcast) {
        d.batch = gp.batch;
        d.stride_a = gp.m * gp.n;
        d.stride_b = gp.stride_b;
        d.stride_c = gp.m * gp.k;
        kernels::gemm(d, g.data(), bv.data(), pg[0]->data());
      } else {
        for (std::size_t bi = 0; bi < gp.batch; ++bi) {
          kernels::gemm(d, g.data().subspan(bi * gp.m * gp.n), bv.data().subspan(bi * gp.stride_b),
                        pg[0]->data());
        }
      }
    }
    if (pg[1]) {
      // dB = A^T * dC
      kernels::GemmArgs d{};
      d.n = gp.n;
      d.trans_a = true;
      d.accumulate = true;
      if (p.b_broadcast) {
        // Batch rows of A and dC stack into one (batch*m) contraction.
        d.m = gp.k;
        d.k = gp.batch * gp.m;
        kernels::gemm(d, av.data(), g.data(), pg[1]->data());
      } else {
        d.m = gp.k;
        d.k = gp.m;
        d.batch = gp.batch;
        d.stride_a = gp.stride_a;
        d.stride_b = gp.m * gp.n;
        d.stride_c = gp.k * gp.n;
        kernels::gemm(d, av.data(), g.data(), pg[1]->data());
      }
    }
  });
}

}  // namespace

Var matmul(const Var& a, const Var& b) { return matmul_impl(a, b, false); }

Var matmul_sorted(const Var& a, const Var& b) { return matmul_impl(a, b, true); }

Var transpose(const Var& a) {
  const Tensor& av = a.value();
  if (av.rank() < 2) throw ShapeError("transpose needs rank >= 2, got " + shape_string(av.shape()));
  Shape s = av.shape();
  const std::size_t r = s[s.size() - 2], c = s.back();
  std::swap(s[s.size() - 2], s.back());
  const std::size_t batch = av.numel() / (r * c);
  Tensor out(s);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = av[b * r * c + i * c + j];
  return a.tape().record(std::move(out), {a}, [batch, r, c](const Tensor& g, std::span<Tensor* const> pg) {
    Tensor& ga = *pg[0];
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga[b * r * c + i * c + j] += g[b * r * c + j * r + i];
  });
}

Var add(const Var& a, const Var& b) { return binary(a, b, Binary::add); }
Var sub(const Var& a, const Var& b) { return binary(a, b, Binary::sub); }
Var mul(const Var& a, const Var& b) { return binary(a, b, Binary::mul); }
Var add_scalar(const Var& a, double s) { return affine_scalar(a, 1.0, s); }
Var mul_scalar(const Var& a, double s) { return affine_scalar(a, s, 0.0); }
Var neg(const Var& a) { return affine_scalar(a, -1.0, 0.0); }

Var tanh(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = std::tanh(v);
  Tensor saved = out;
  return a.tape().record(std::move(out), {a}, [y = std::move(saved)](const Tensor& g, std::span<Tensor* const> pg) {
    Tensor& ga = *pg[0];
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

Var log(const Var& a) {
  const Tensor& av = a.value();
  Tensor out = av;
  for (auto& v : out.data()) v = std::log(v);
  return a.tape().record(std::move(out), {a}, [x = av](const Tensor& g, std::span<Tensor* const> pg) {
    Tensor& ga = *pg[0];
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] / x[i];
  });
}

Var softmax(const Var& x, std::size_t axis) {
  Tensor out = softmax_axis(x.value(), axis);
  const auto v = axis_view(out.shape(), axis);
  Tensor y = out;
  return x.tape().record(std::move(out), {x}, [v, y = std::move(y)](const Tensor& g, std::span<Tensor* const> pg) {
    Tensor& gx = *pg[0];
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t in = 0; in < v.inner; ++in) {
        const std::size_t base = o * v.len * v.inner + in;
        double dot = 0.0;
        for (std::size_t l = 0; l < v.len; ++l) dot += g[base + l * v.inner] * y[base + l * v.inner];
        for (std::size_t l = 0; l < v.len; ++l) {
          const std::size_t i = base + l * v.inner;
          gx[i] += y[i] * (g[i] - dot);
        }
      }
    }
  });
}

Var log_softmax(const Var& x, std::size_t axis) {
  Tensor out = log_softmax_axis(x.value(), axis);
  const auto v = axis_view(out.shape(), axis);
  Tensor y = out;
  return x.tape().record(std::move(out), {x}, [v, y = std::move(y)](const Tensor& g, std::span<Tensor* const> pg) {
    Tensor& gx = *pg[0];
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t in = 0; in < v.inner; ++in) {
        const std::size_t base = o * v.len * v.inner + in;
        double gsum = 0.0;
        for (std::size_t l = 0; l < v.len; ++l) gsum += g[base + l * v.inner];
        for (std::size_t l = 0; l < v.len; ++l) {
          const std::size_t i = base + l * v.inner;
          gx[i] += g[i] - std::exp(y[i]) * gsum;
        }
      }
    }
  });
}

Var mean(const Var& x, std::size_t axis) {
  Tensor out = mean_axis(x.value(), axis);
  const auto v = axis_view(x.value().shape(), axis);
  return x.tape().record(std::move(out), {x}, [v](const Tensor& g, std::span<Tensor* const> pg) {
    Tensor& gx = *pg[0];
    const double scale = 1.0 / static_cast<double>(v.len);
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t l = 0; l < v.len; ++l)
        for (std::size_t in = 0; in < v.inner; ++in)
          gx[(o * v.len + l) * v.inner + in] += g[o * v.inner + in] * scale;
  });
}

Var sum(const Var& x, std::size_t axis) {
  const Tensor& xv = x.value();
  const auto v = axis_view(xv.shape(), axis);
  Tensor out(drop_axis(xv.shape(), axis));
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t in = 0; in < v.inner; ++in) {
      double acc = 0.0;
      for (std::size_t l = 0; l < v.len; ++l) acc += xv[(o * v.len + l) * v.inner + in];
      out[o * v.inner + in] = acc;
    }
  return x.tape().record(std::move(out), {x}, [v](const Tensor& g, std::span<Tensor* const> pg) {
    Tensor& gx = *pg[0];
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t l = 0; l < v.len; ++l)
        for (std::size_t in = 0; in < v.inner; ++in) gx[(o * v.len + l) * v.inner + in] += g[o * v.inner + in];
  });
}

Var sum_all(const Var& x) {
  double acc = 0.0;
  for (double v : x.value().data()) acc += v;
  return x.tape().record(Tensor::scalar(acc), {x}, [](const Tensor& g, std::span<Tensor* const> pg) {
    const double gv = g[0];
    for (auto& v : pg[0]->data()) v += gv;
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape().record(std::move(out), {x}, [](const Tensor& g, std::span<Tensor* const> pg) {
    Tensor& gx = *pg[0];
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
  });
}

Var select(const Var& x, std::size_t axis, std::size_t index) {
  const Tensor& xv = x.value();
  const auto v = axis_view(xv.shape(), axis);
  if (index >= v.len) {
    throw std::out_of_range("select index " + std::to_string(index) + " out of range for axis " +
                            std::to_string(axis) + " of " + shape_string(xv.shape()));
  }
  Tensor out(drop_axis(xv.shape(), axis));
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t in = 0; in < v.inner; ++in) out[o * v.inner + in] = xv[(o * v.len + index) * v.inner + in];
  return x.tape().record(std::move(out), {x}, [v, index](const Tensor& g, std::span<Tensor* const> pg) {
    Tensor& gx = *pg[0];
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t in = 0; in < v.inner; ++in) gx[(o * v.len + index) * v.inner + in] += g[o * v.inner + in];
  });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape first = parts[0].shape();
  if (axis >= first.size()) throw std::out_of_range("concat axis out of range for " + shape_string(first));
  std::vector<std::size_t> lens;
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    Shape a = s, b = first;
    if (s.size() != first.size()) throw ShapeError("concat rank mismatch: " + shape_string(s) + " vs " + shape_string(first));
    a[axis] = b[axis] = 0;
    if (a != b) throw ShapeError("concat shape mismatch: " + shape_string(s) + " vs " + shape_string(first));
    lens.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }
  const auto vo = axis_view(out_shape, axis);
  Tensor out(out_shape);
  std::size_t start = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const Tensor& pv = parts[pi].value();
    const std::size_t len = lens[pi];
    for (std::size_t o = 0; o < vo.outer; ++o)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t in = 0; in < vo.inner; ++in)
          out[(o * vo.len + start + l) * vo.inner + in] = pv[(o * len + l) * vo.inner + in];
    start += len;
  }
  return parts[0].tape().record(std::move(out), parts, [vo, lens](const Tensor& g, std::span<Tensor* const> pg) {
    std::size_t start = 0;
    for (std::size_t pi = 0; pi < pg.size(); ++pi) {
      const std::size_t len = lens[pi];
      if (pg[pi]) {
        Tensor& gp = *pg[pi];
        for (std::size_t o = 0; o < vo.outer; ++o)
          for (std::size_t l = 0; l < len; ++l)
            for (std::size_t in = 0; in < vo.inner; ++in)
              gp[(o * len + l) * vo.inner + in] += g[(o * vo.len + start + l) * vo.inner + in];
      }
      start += len;
    }
  });
}

Var stack(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("stack of zero tensors");
  const Shape first = parts[0].shape();
  if (axis > first.size()) throw std::out_of_range("stack axis out of range for " + shape_string(first));
  Shape unit = first;
  unit.insert(unit.begin() + static_cast<std::ptrdiff_t>(axis), 1);
  std::vector<Var> reshaped;
  reshaped.reserve(parts.size());
  for (const auto& p : parts) {
    if (p.shape() != first) throw ShapeError("stack shape mismatch: " + shape_string(p.shape()) + " vs " + shape_string(first));
    reshaped.push_back(reshape(p, unit));
  }
  return concat(reshaped, axis);
}

Var kl_rows(const Var& w, const Tensor& prior) {
  const Tensor& wv = w.value();
  if (wv.rank() != 2 || prior.rank() != 1 || wv.dim(1) != prior.dim(0)) {
    throw ShapeError("kl_rows shape mismatch: " + shape_string(wv.shape()) + " vs prior " + shape_string(prior.shape()));
  }
  const std::size_t b = wv.dim(0), n = wv.dim(1);
  Tensor out(Shape{b});
  for (std::size_t r = 0; r < b; ++r) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double q = wv[r * n + i];
      if (q == 0.0) continue;
      if (prior[i] == 0.0) throw std::domain_error("KL is infinite: q > 0 where prior is 0");
      acc += q * std::log(q / prior[i]);
    }
    out[r] = acc;
  }
  return w.tape().record(std::move(out), {w}, [wv, prior, b, n](const Tensor& g, std::span<Tensor* const> pg) {
    Tensor& gw = *pg[0];
    constexpr double tiny = std::numeric_limits<double>::min();
    for (std::size_t r = 0; r < b; ++r)
      for (std::size_t i = 0; i < n; ++i) {
        const double q = std::max(wv[r * n + i], tiny);
        gw[r * n + i] += g[r] * (std::log(q / prior[i]) + 1.0);
      }
  });
}

}  // namespace ad

Tensor matmul(const Tensor& a, const Tensor& b) { return matmul_forward(a, b, plan_matmul(a.shape(), b.shape())); }

Tensor softmax_axis(const Tensor& x, std::size_t axis) {
  const auto v = axis_view(x.shape(), axis);
  Tensor out(x.shape());
  kernels::softmax(v, x.data(), out.data());
  return out;
}

Tensor log_softmax_axis(const Tensor& x, std::size_t axis) {
  const auto v = axis_view(x.shape(), axis);
  Tensor out(x.shape());
  kernels::log_softmax(v, x.data(), out.data());
  return out;
}

Tensor mean_axis(const Tensor& x, std::size_t axis) {
  const auto v = axis_view(x.shape(), axis);
  Tensor out(drop_axis(x.shape(), axis));
  kernels::mean_axis(v, x.data(), out.data());
  return out;
}

}  // namespace varan
