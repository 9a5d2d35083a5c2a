#pragma once

// Define-by-run reverse-mode differentiation. A Tape records every operation
// applied to its Vars in insertion order; backward() walks that order in
// reverse, visiting each node exactly once. Rebuild the tape for every
// forward pass.

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <vector>

#include "varan/tensor.hpp"

namespace varan {

using NodeId = std::size_t;
using GradientMap = std::map<NodeId, Tensor>;

class Tape;

/// Thrown for misuse of the tape: detached or non-scalar losses, mixing tapes.
class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Handle to a tape node. Cheap to copy; it and references to its value stay
/// valid while its tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  bool attached() const { return tape_ != nullptr; }
  Tape& tape() const;
  NodeId id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape* tape_ = nullptr;
  NodeId id_ = 0;
};

class Tape {
 public:
  /// parent_grads[i] is null when parent i needs no gradient; otherwise it
  /// points at that parent's accumulator, which the function adds into.
  using BackwardFn = std::function<void(const Tensor& grad_out, std::span<Tensor* const> parent_grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Tensor value);
  /// Leaf whose gradient is reported by backward().
  Var parameter(Tensor value);

  /// Appends an op node. Nodes whose parents need no gradient drop `fn`.
  Var record(Tensor value, const std::vector<Var>& parents, BackwardFn fn);

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  bool is_parameter(NodeId id) const { return nodes_.at(id).is_parameter; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient of a scalar loss with respect to every parameter node. Leaves
  /// the tape untouched, so repeated calls give bit-identical results.
  GradientMap backward(const Var& loss) const;

 private:
  struct Node {
    Tensor value;
    std::vector<NodeId> parents;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_parameter = false;
  };
  std::deque<Node> nodes_;  // stable addresses: values stay valid as the tape grows
};

namespace ad {

Var matmul(const Var& a, const Var& b);
/// matmul whose forward dot products do not depend on the order of the
/// shared axis (see kernels::GemmArgs::sorted_sum).
Var matmul_sorted(const Var& a, const Var& b);
Var transpose(const Var& a);  // swaps the last two axes

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var add_scalar(const Var& a, double s);
Var mul_scalar(const Var& a, double s);
Var neg(const Var& a);

Var tanh(const Var& a);
Var log(const Var& a);

Var softmax(const Var& x, std::size_t axis);
Var log_softmax(const Var& x, std::size_t axis);
Var mean(const Var& x, std::size_t axis);
Var sum(const Var& x, std::size_t axis);
Var sum_all(const Var& x);

Var reshape(const Var& x, Shape shape);
/// Picks index `index` along `axis` and drops that axis.
Var select(const Var& x, std::size_t axis, std::size_t index);
/// Inserts a new axis at `axis`; all parts must share a shape.
Var stack(const std::vector<Var>& parts, std::size_t axis);
Var concat(const std::vector<Var>& parts, std::size_t axis);

/// Row-wise KL(w_b || prior) for w of shape (b, n) and a constant prior (n).
/// Zero entries of w contribute nothing.
Var kl_rows(const Var& w, const Tensor& prior);

}  // namespace ad

// Plain-tensor forwards for callers that need no gradient.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax_axis(const Tensor& x, std::size_t axis);
Tensor log_softmax_axis(const Tensor& x, std::size_t axis);
Tensor mean_axis(const Tensor& x, std::size_t axis);

}  // namespace varan
