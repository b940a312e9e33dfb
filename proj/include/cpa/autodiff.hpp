// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode differentiation over Tensor values.
//
// A Tape owns every intermediate produced while it is alive. Ops append a
// node holding the forward value and a closure that scatters the node's
// output gradient into its parents. Nodes are appended in evaluation order,
// so a reverse sweep over node ids is a reverse topological order.
//
// Parameters can be bound by reference (Tape::external) so large weight
// matrices are not copied into every graph; the referenced tensors must
// outlive the tape and stay unmodified while it is in use.

#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "cpa/tensor.hpp"

namespace cpa::ad {

class Tape;

class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  std::size_t id() const { return id_; }
  Tape& tape() const { return *tape_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Contiguous run of packed rows that form one token sequence.
struct Segment {
  std::size_t offset = 0;
  std::size_t length = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var external(const Tensor& value, bool requires_grad);

  /// Reverse sweep from a scalar loss. Gradients from a previous sweep are
  /// discarded first.
  void backward(Var loss);

  /// Gradient of the last backward() loss with respect to `v`; zeros when
  /// `v` did not influence the loss.
  Tensor grad(Var v) const;
  bool has_grad(Var v) const;

  std::size_t size() const { return nodes_.size(); }

  // Op-authoring interface.
  Var record(std::string_view op, Tensor value, std::initializer_list<Var> parents, BackwardFn fn);
  Var record(std::string_view op, Tensor value, std::span<const Var> parents, BackwardFn fn);
  const Tensor& value(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  Tensor& grad_buffer(std::size_t id);

 private:
  struct Node {
    std::string_view op;
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Primitives. Rank-2 semantics throughout; 1 x n rows stand in for vectors.

Var matmul(Var a, Var b);     // (n x k) . (k x m)
Var matmul_nt(Var a, Var w);  // (n x k) . (m x k)^T
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_row(Var a, Var row);  // broadcast a 1 x m row over every row of a
Var sum(Var a);
Var mean(Var a);
Var frobenius_norm(Var a);
Var gelu(Var a);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var embedding(Var table, std::span<const std::size_t> ids);
Var gather_rows(Var a, std::span<const std::size_t> rows);
Var replace_rows(Var a, std::span<const std::size_t> rows, std::span<const Var> values);

/// Causal multi-head attention over packed sequences. `qkv` is rows x 3d
/// with query, key and value blocks side by side; attention never crosses
/// segment boundaries.
Var causal_self_attention(Var qkv, std::size_t n_heads, std::span<const Segment> segments);

/// Mean over rows of -log softmax(logits[r])[targets[r]].
Var cross_entropy(Var logits, std::span<const std::size_t> targets);

/// Mean over rows of KL(softmax(p_logits[r]) || softmax(q_logits[r])).
Var kl_divergence(Var p_logits, Var q_logits);

// Plain (non-recorded) helpers.
Tensor softmax_rows(const Tensor& logits);
Tensor log_softmax_rows(const Tensor& logits);
double gelu_value(double x);

}  // namespace cpa::ad
