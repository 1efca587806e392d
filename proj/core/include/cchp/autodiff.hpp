// SPDX-License-Identifier: Apache-2.0
/**
 * @file   autodiff.hpp
 * @brief  Reverse-mode automatic differentiation over dense matrices.
 *
 * A Tape records every operation applied to its Vars. Values are computed
 * eagerly; calling backward() on a 1x1 Var walks the tape in reverse and
 * accumulates gradients into the Parameters that were bound with
 * Tape::parameter(). A tape built with record = false skips all bookkeeping
 * and is used for inference.
 *
 * Layout convention: rows index batch elements (or time-stacked rows),
 * columns index features. Linear layers compute X * W + b.
 */
#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace cchp {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// A named learnable tensor together with its accumulated gradient.
/// The gradient is an accumulator written by Tape::backward(), so it stays
/// mutable on otherwise read-only parameters.
struct Parameter {
  std::string name;
  Matrix value;
  mutable Matrix grad;
};

namespace ad {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  bool valid() const { return tape_ != nullptr; }

  Tape* tape() const { return tape_; }
  int id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(Matrix value);
  /// Binds a parameter as a leaf. Repeated binds of the same parameter
  /// return the same node. The parameter must outlive the tape.
  Var parameter(const Parameter& p);

  /// Seeds d(out)/d(out) = 1 and back-propagates; out must be 1x1.
  void backward(const Var& out);

  /// Gradient of the last backward() with respect to var (zero if unreached).
  Matrix gradient(const Var& var) const;

  std::size_t size() const { return nodes_.size(); }

  // Internal interface used by the op implementations.
  using Backprop = std::function<void(Tape&, int self)>;
  Var push(Matrix value, Backprop backprop);
  const Matrix& value_of(int id) const;
  const Matrix& grad_of(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  /// Accumulates delta into the gradient of node id, allocating on first use.
  void accumulate(int id, const Matrix& delta);
  template <typename Expr>
  void accumulate_expr(int id, const Expr& delta);
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

 private:
  struct Node {
    Matrix value;
    const Matrix* external = nullptr;
    Matrix grad;
    Backprop backprop;
    const Parameter* param = nullptr;
    bool needs_grad = false;
  };

  bool record_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, int> bound_;
  friend class Var;
};

template <typename Expr>
void Tape::accumulate_expr(int id, const Expr& delta) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.needs_grad) return;
  if (n.grad.size() == 0) {
    n.grad = delta;
  } else {
    n.grad += delta;
  }
}

// ---- elementary ops -------------------------------------------------------

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var hadamard(const Var& a, const Var& b);
Var scale(const Var& a, double s);
/// x (n x m) plus a 1 x m row broadcast to every row.
Var add_row(const Var& x, const Var& row);
/// Broadcasts a 1 x m row to n rows.
Var repeat_rows(const Var& row, Eigen::Index n);

Var relu(const Var& x);
Var sigmoid(const Var& x);
Var tanh(const Var& x);
/// log(1 + exp(x)) + floor, evaluated stably.
Var softplus(const Var& x, double floor = 0.0);
Var exp(const Var& x);
Var sqrt(const Var& x);
Var square(const Var& x);

Var concat_cols(std::span<const Var> parts);
Var concat_cols(std::initializer_list<Var> parts);
Var slice_cols(const Var& x, Eigen::Index start, Eigen::Index count);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(const Var& x, Eigen::Index start, Eigen::Index count);
/// out.row(i) = x.row(index[i]); index -1 yields a zero row.
Var gather_rows(const Var& x, std::vector<int> index);
/// Reinterprets the row-major storage with a new shape.
Var reshape(const Var& x, Eigen::Index rows, Eigen::Index cols);
/// out.row(group[i]) += weight[i] * x.row(i) for group[i] >= 0.
Var segment_sum(const Var& x, std::vector<int> group, std::vector<double> weight,
                Eigen::Index n_groups);

Var sum(const Var& x);

// ---- fused ops ------------------------------------------------------------

/// Per-element dot-product attention over padded key blocks.
///
/// query: B x d; keys: (B * n_keys) x d with block b holding element b's keys;
/// values: (B * n_keys) x v (constant); mask: B x n_keys with 1 = valid key.
/// Returns B x v read-outs. When weights_out is non-null the softmax weights
/// (B x n_keys, zero at masked keys) are written there.
Var masked_attention(const Var& query, const Var& keys, const Matrix& values,
                     const Matrix& mask, Matrix* weights_out = nullptr);

/// Sum over rows of w_i * NLL(y_i | mean_i, var_i) for diagonal Gaussians.
Var gaussian_nll(const Matrix& y, const Var& mean, const Var& var, const Vector& row_weight);

/// Sum over rows of w_i * KL(N(mq_i, vq_i) || N(mp_i, vp_i)) for diagonal Gaussians.
Var gaussian_kl(const Var& mean_q, const Var& var_q, const Var& mean_p, const Var& var_p,
                const Vector& row_weight);

}  // namespace ad
}  // namespace cchp
