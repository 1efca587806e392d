// SPDX-License-Identifier: Apache-2.0
#include "cchp/autodiff.hpp"

#include <algorithm>
#include <cassert>
#include <limits>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace cchp::ad {

const Matrix& Var::value() const { return tape_->value_of(id_); }

const Matrix& Tape::value_of(int id) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  return n.external != nullptr ? *n.external : n.value;
}

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::parameter(const Parameter& p) {
  if (auto it = bound_.find(&p); it != bound_.end()) return Var(this, it->second);
  Node n;
  n.external = &p.value;
  n.param = &p;
  n.needs_grad = record_;
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size() - 1);
  bound_.emplace(&p, id);
  return Var(this, id);
}

Var Tape::push(Matrix value, Backprop backprop) {
  Node n;
  n.value = std::move(value);
  if (record_ && backprop) {
    n.backprop = std::move(backprop);
    n.needs_grad = true;
  }
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

void Tape::accumulate(int id, const Matrix& delta) { accumulate_expr(id, delta); }

void Tape::backward(const Var& out) {
  if (out.tape() != this) throw std::invalid_argument("backward: var from another tape");
  if (out.rows() != 1 || out.cols() != 1) throw std::invalid_argument("backward: output must be 1x1");
  if (!record_) throw std::logic_error("backward: tape was built without recording");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  nodes_[static_cast<std::size_t>(out.id())].grad = Matrix::Ones(1, 1);
  for (int id = out.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) continue;
    if (n.backprop) n.backprop(*this, id);
    if (n.param != nullptr) {
      if (n.param->grad.size() == 0) {
        n.param->grad = n.grad;
      } else {
        n.param->grad += n.grad;
      }
    }
  }
}

Matrix Tape::gradient(const Var& var) const {
  const Node& n = nodes_[static_cast<std::size_t>(var.id())];
  if (n.grad.size() == 0) return Matrix::Zero(var.rows(), var.cols());
  return n.grad;
}

namespace {

Tape& tape_of(const Var& a) {
  assert(a.valid());
  return *a.tape();
}

Tape& tape_of(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw std::invalid_argument("ad: vars belong to different tapes");
  return *a.tape();
}

bool any_grad(const Tape& t, std::initializer_list<int> ids) {
  if (!t.recording()) return false;
  for (int id : ids) {
    if (t.needs_grad(id)) return true;
  }
  return false;
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Matrix out = a.value() * b.value();
  if (!any_grad(t, {a.id(), b.id()})) return t.push(std::move(out), nullptr);
  const int ia = a.id(), ib = b.id();
  return t.push(std::move(out), [ia, ib](Tape& tp, int self) {
    const Matrix& g = tp.grad_of(self);
    if (tp.needs_grad(ia)) tp.accumulate_expr(ia, g * tp.value_of(ib).transpose());
    if (tp.needs_grad(ib)) tp.accumulate_expr(ib, tp.value_of(ia).transpose() * g);
  });
}

Var add(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a, b, "add");
  Matrix out = a.value() + b.value();
  if (!any_grad(t, {a.id(), b.id()})) return t.push(std::move(out), nullptr);
  const int ia = a.id(), ib = b.id();
  return t.push(std::move(out), [ia, ib](Tape& tp, int self) {
    tp.accumulate(ia, tp.grad_of(self));
    tp.accumulate(ib, tp.grad_of(self));
  });
}

Var sub(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a, b, "sub");
  Matrix out = a.value() - b.value();
  if (!any_grad(t, {a.id(), b.id()})) return t.push(std::move(out), nullptr);
  const int ia = a.id(), ib = b.id();
  return t.push(std::move(out), [ia, ib](Tape& tp, int self) {
    tp.accumulate(ia, tp.grad_of(self));
    tp.accumulate_expr(ib, -tp.grad_of(self));
  });
}

Var hadamard(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a, b, "hadamard");
  Matrix out = a.value().cwiseProduct(b.value());
  if (!any_grad(t, {a.id(), b.id()})) return t.push(std::move(out), nullptr);
  const int ia = a.id(), ib = b.id();
  return t.push(std::move(out), [ia, ib](Tape& tp, int self) {
    const Matrix& g = tp.grad_of(self);
    if (tp.needs_grad(ia)) tp.accumulate_expr(ia, g.cwiseProduct(tp.value_of(ib)));
    if (tp.needs_grad(ib)) tp.accumulate_expr(ib, g.cwiseProduct(tp.value_of(ia)));
  });
}

Var scale(const Var& a, double s) {
  Tape& t = tape_of(a);
  Matrix out = a.value() * s;
  if (!any_grad(t, {a.id()})) return t.push(std::move(out), nullptr);
  const int ia = a.id();
  return t.push(std::move(out),
                [ia, s](Tape& tp, int self) { tp.accumulate_expr(ia, tp.grad_of(self) * s); });
}

Var add_row(const Var& x, const Var& row) {
  Tape& t = tape_of(x, row);
  if (row.rows() != 1 || row.cols() != x.cols()) throw std::invalid_argument("add_row: shape mismatch");
  Matrix out = x.value().rowwise() + row.value().row(0);
  if (!any_grad(t, {x.id(), row.id()})) return t.push(std::move(out), nullptr);
  const int ix = x.id(), ir = row.id();
  return t.push(std::move(out), [ix, ir](Tape& tp, int self) {
    const Matrix& g = tp.grad_of(self);
    tp.accumulate(ix, g);
    if (tp.needs_grad(ir)) tp.accumulate_expr(ir, g.colwise().sum());
  });
}

Var repeat_rows(const Var& row, Eigen::Index n) {
  Tape& t = tape_of(row);
  if (row.rows() != 1) throw std::invalid_argument("repeat_rows: expected a single row");
  Matrix out = row.value().replicate(n, 1);
  if (!any_grad(t, {row.id()})) return t.push(std::move(out), nullptr);
  const int ir = row.id();
  return t.push(std::move(out), [ir](Tape& tp, int self) {
    tp.accumulate_expr(ir, tp.grad_of(self).colwise().sum());
  });
}

Var relu(const Var& x) {
  Tape& t = tape_of(x);
  Matrix out = x.value().cwiseMax(0.0);
  if (!any_grad(t, {x.id()})) return t.push(std::move(out), nullptr);
  const int ix = x.id();
  return t.push(std::move(out), [ix](Tape& tp, int self) {
    const Matrix& xv = tp.value_of(ix);
    tp.accumulate_expr(ix, (xv.array() > 0.0).select(tp.grad_of(self).array(), 0.0).matrix());
  });
}

Var sigmoid(const Var& x) {
  Tape& t = tape_of(x);
  Matrix out = (1.0 / (1.0 + (-x.value().array()).exp())).matrix();
  if (!any_grad(t, {x.id()})) return t.push(std::move(out), nullptr);
  const int ix = x.id();
  return t.push(std::move(out), [ix](Tape& tp, int self) {
    const Matrix& s = tp.value_of(self);
    tp.accumulate_expr(ix, (tp.grad_of(self).array() * s.array() * (1.0 - s.array())).matrix());
  });
}

Var tanh(const Var& x) {
  Tape& t = tape_of(x);
  Matrix out = x.value().array().tanh().matrix();
  if (!any_grad(t, {x.id()})) return t.push(std::move(out), nullptr);
  const int ix = x.id();
  return t.push(std::move(out), [ix](Tape& tp, int self) {
    const Matrix& y = tp.value_of(self);
    tp.accumulate_expr(ix, (tp.grad_of(self).array() * (1.0 - y.array().square())).matrix());
  });
}

Var softplus(const Var& x, double floor) {
  Tape& t = tape_of(x);
  const auto xa = x.value().array();
  Matrix out = (xa.max(0.0) + (-xa.abs()).exp().log1p() + floor).matrix();
  if (!any_grad(t, {x.id()})) return t.push(std::move(out), nullptr);
  const int ix = x.id();
  return t.push(std::move(out), [ix](Tape& tp, int self) {
    const auto xv = tp.value_of(ix).array();
    tp.accumulate_expr(ix, (tp.grad_of(self).array() / (1.0 + (-xv).exp())).matrix());
  });
}

Var exp(const Var& x) {
  Tape& t = tape_of(x);
  Matrix out = x.value().array().exp().matrix();
  if (!any_grad(t, {x.id()})) return t.push(std::move(out), nullptr);
  const int ix = x.id();
  return t.push(std::move(out), [ix](Tape& tp, int self) {
    tp.accumulate_expr(ix, tp.grad_of(self).cwiseProduct(tp.value_of(self)));
  });
}

Var sqrt(const Var& x) {
  Tape& t = tape_of(x);
  Matrix out = x.value().array().sqrt().matrix();
  if (!any_grad(t, {x.id()})) return t.push(std::move(out), nullptr);
  const int ix = x.id();
  return t.push(std::move(out), [ix](Tape& tp, int self) {
    tp.accumulate_expr(ix, (0.5 * tp.grad_of(self).array() / tp.value_of(self).array()).matrix());
  });
}

Var square(const Var& x) {
  Tape& t = tape_of(x);
  Matrix out = x.value().array().square().matrix();
  if (!any_grad(t, {x.id()})) return t.push(std::move(out), nullptr);
  const int ix = x.id();
  return t.push(std::move(out), [ix](Tape& tp, int self) {
    tp.accumulate_expr(ix, (2.0 * tp.grad_of(self).array() * tp.value_of(ix).array()).matrix());
  });
}

Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Tape& t = tape_of(parts.front());
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  bool grad = false;
  for (const Var& p : parts) {
    if (p.tape() != &t) throw std::invalid_argument("concat_cols: vars belong to different tapes");
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
    grad = grad || any_grad(t, {p.id()});
  }
  Matrix out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    spans.emplace_back(p.id(), off);
    off += p.cols();
  }
  if (!grad) return t.push(std::move(out), nullptr);
  return t.push(std::move(out), [spans](Tape& tp, int self) {
    const Matrix& g = tp.grad_of(self);
    for (const auto& [id, start] : spans) {
      if (!tp.needs_grad(id)) continue;
      tp.accumulate_expr(id, g.middleCols(start, tp.value_of(id).cols()));
    }
  });
}

Var slice_cols(const Var& x, Eigen::Index start, Eigen::Index count) {
  Tape& t = tape_of(x);
  if (start < 0 || count < 0 || start + count > x.cols()) throw std::out_of_range("slice_cols");
  Matrix out = x.value().middleCols(start, count);
  if (!any_grad(t, {x.id()})) return t.push(std::move(out), nullptr);
  const int ix = x.id();
  return t.push(std::move(out), [ix, start, count](Tape& tp, int self) {
    const Matrix& xv = tp.value_of(ix);
    Matrix d = Matrix::Zero(xv.rows(), xv.cols());
    d.middleCols(start, count) = tp.grad_of(self);
    tp.accumulate(ix, d);
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  Tape& t = tape_of(parts.front());
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  bool grad = false;
  for (const Var& p : parts) {
    if (p.tape() != &t) throw std::invalid_argument("concat_rows: vars belong to different tapes");
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.rows();
    grad = grad || any_grad(t, {p.id()});
  }
  Matrix out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    spans.emplace_back(p.id(), off);
    off += p.rows();
  }
  if (!grad) return t.push(std::move(out), nullptr);
  return t.push(std::move(out), [spans](Tape& tp, int self) {
    const Matrix& g = tp.grad_of(self);
    for (const auto& [id, start] : spans) {
      if (!tp.needs_grad(id)) continue;
      tp.accumulate_expr(id, g.middleRows(start, tp.value_of(id).rows()));
    }
  });
}

Var slice_rows(const Var& x, Eigen::Index start, Eigen::Index count) {
  Tape& t = tape_of(x);
  if (start < 0 || count < 0 || start + count > x.rows()) throw std::out_of_range("slice_rows");
  Matrix out = x.value().middleRows(start, count);
  if (!any_grad(t, {x.id()})) return t.push(std::move(out), nullptr);
  const int ix = x.id();
  return t.push(std::move(out), [ix, start, count](Tape& tp, int self) {
    const Matrix& xv = tp.value_of(ix);
    Matrix d = Matrix::Zero(xv.rows(), xv.cols());
    d.middleRows(start, count) = tp.grad_of(self);
    tp.accumulate(ix, d);
  });
}

Var gather_rows(const Var& x, std::vector<int> index) {
  Tape& t = tape_of(x);
  const Matrix& xv = x.value();
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(index.size()), xv.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0) continue;
    if (index[i] >= xv.rows()) throw std::out_of_range("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = xv.row(index[i]);
  }
  if (!any_grad(t, {x.id()})) return t.push(std::move(out), nullptr);
  const int ix = x.id();
  return t.push(std::move(out), [ix, index = std::move(index)](Tape& tp, int self) {
    const Matrix& g = tp.grad_of(self);
    const Matrix& src = tp.value_of(ix);
    Matrix d = Matrix::Zero(src.rows(), src.cols());
    for (std::size_t i = 0; i < index.size(); ++i) {
      if (index[i] >= 0) d.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
    }
    tp.accumulate(ix, d);
  });
}

Var reshape(const Var& x, Eigen::Index rows, Eigen::Index cols) {
  Tape& t = tape_of(x);
  if (rows * cols != x.rows() * x.cols()) throw std::invalid_argument("reshape: size mismatch");
  Matrix out = Eigen::Map<const Matrix>(x.value().data(), rows, cols);
  if (!any_grad(t, {x.id()})) return t.push(std::move(out), nullptr);
  const int ix = x.id();
  return t.push(std::move(out), [ix](Tape& tp, int self) {
    const Matrix& src = tp.value_of(ix);
    const Matrix& g = tp.grad_of(self);
    tp.accumulate_expr(ix, Eigen::Map<const Matrix>(g.data(), src.rows(), src.cols()));
  });
}

Var segment_sum(const Var& x, std::vector<int> group, std::vector<double> weight,
                Eigen::Index n_groups) {
  Tape& t = tape_of(x);
  const Matrix& xv = x.value();
  if (static_cast<Eigen::Index>(group.size()) != xv.rows() || group.size() != weight.size()) {
    throw std::invalid_argument("segment_sum: group/weight size must equal row count");
  }
  Matrix out = Matrix::Zero(n_groups, xv.cols());
  for (std::size_t i = 0; i < group.size(); ++i) {
    if (group[i] < 0) continue;
    if (group[i] >= n_groups) throw std::out_of_range("segment_sum: group out of range");
    out.row(group[i]) += weight[i] * xv.row(static_cast<Eigen::Index>(i));
  }
  if (!any_grad(t, {x.id()})) return t.push(std::move(out), nullptr);
  const int ix = x.id();
  return t.push(std::move(out), [ix, group = std::move(group), weight = std::move(weight)](Tape& tp,
                                                                                           int self) {
    const Matrix& g = tp.grad_of(self);
    Matrix d = Matrix::Zero(static_cast<Eigen::Index>(group.size()), g.cols());
    for (std::size_t i = 0; i < group.size(); ++i) {
      if (group[i] >= 0) d.row(static_cast<Eigen::Index>(i)) = weight[i] * g.row(group[i]);
    }
    tp.accumulate(ix, d);
  });
}

Var sum(const Var& x) {
  Tape& t = tape_of(x);
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  if (!any_grad(t, {x.id()})) return t.push(std::move(out), nullptr);
  const int ix = x.id();
  return t.push(std::move(out), [ix](Tape& tp, int self) {
    const Matrix& xv = tp.value_of(ix);
    tp.accumulate_expr(ix, Matrix::Constant(xv.rows(), xv.cols(), tp.grad_of(self)(0, 0)));
  });
}

Var masked_attention(const Var& query, const Var& keys, const Matrix& values, const Matrix& mask,
                     Matrix* weights_out) {
  Tape& t = tape_of(query, keys);
  const Eigen::Index batch = query.rows();
  const Eigen::Index n_keys = mask.cols();
  if (mask.rows() != batch || keys.rows() != batch * n_keys || values.rows() != keys.rows() ||
      keys.cols() != query.cols()) {
    throw std::invalid_argument("masked_attention: shape mismatch");
  }
  const Matrix& q = query.value();
  const Matrix& k = keys.value();
  Matrix weights = Matrix::Zero(batch, n_keys);
  Matrix out = Matrix::Zero(batch, values.cols());
  for (Eigen::Index b = 0; b < batch; ++b) {
    const auto kb = k.middleRows(b * n_keys, n_keys);
    Eigen::RowVectorXd logits = (kb * q.row(b).transpose()).transpose();
    double top = -std::numeric_limits<double>::infinity();
    for (Eigen::Index u = 0; u < n_keys; ++u) {
      if (mask(b, u) > 0.0) top = std::max(top, logits(u));
    }
    if (!std::isfinite(top)) throw std::invalid_argument("masked_attention: element without valid keys");
    double total = 0.0;
    for (Eigen::Index u = 0; u < n_keys; ++u) {
      if (mask(b, u) > 0.0) {
        weights(b, u) = std::exp(logits(u) - top);
        total += weights(b, u);
      }
    }
    weights.row(b) /= total;
    out.row(b) = weights.row(b) * values.middleRows(b * n_keys, n_keys);
  }
  if (weights_out != nullptr) *weights_out = weights;
  if (!any_grad(t, {query.id(), keys.id()})) return t.push(std::move(out), nullptr);
  const int iq = query.id(), ik = keys.id();
  return t.push(std::move(out), [iq, ik, values, weights = std::move(weights), n_keys](Tape& tp,
                                                                                      int self) {
    const Matrix& g = tp.grad_of(self);
    const Matrix& qv = tp.value_of(iq);
    const Matrix& kv = tp.value_of(ik);
    Matrix dq = Matrix::Zero(qv.rows(), qv.cols());
    Matrix dk = Matrix::Zero(kv.rows(), kv.cols());
    for (Eigen::Index b = 0; b < qv.rows(); ++b) {
      const auto vb = values.middleRows(b * n_keys, n_keys);
      Eigen::RowVectorXd dlambda = (vb * g.row(b).transpose()).transpose();
      const double mean = dlambda.dot(weights.row(b));
      Eigen::RowVectorXd dlogit = weights.row(b).array() * (dlambda.array() - mean);
      dq.row(b) = dlogit * kv.middleRows(b * n_keys, n_keys);
      dk.middleRows(b * n_keys, n_keys) = dlogit.transpose() * qv.row(b);
    }
    tp.accumulate(iq, dq);
    tp.accumulate(ik, dk);
  });
}

Var gaussian_nll(const Matrix& y, const Var& mean, const Var& var, const Vector& row_weight) {
  Tape& t = tape_of(mean, var);
  require_same_shape(mean, var, "gaussian_nll");
  if (y.rows() != mean.rows() || y.cols() != mean.cols() || row_weight.size() != y.rows()) {
    throw std::invalid_argument("gaussian_nll: shape mismatch");
  }
  const auto m = mean.value().array();
  const auto v = var.value().array();
  if ((v <= 0.0).any()) throw std::domain_error("gaussian_nll: non-positive variance");
  constexpr double kLog2Pi = 1.8378770664093453;  // ln(2 pi)
  const Eigen::ArrayXXd terms = 0.5 * ((kLog2Pi + v.log()) + (y.array() - m).square() / v);
  Matrix out(1, 1);
  out(0, 0) = (terms.rowwise().sum().matrix().transpose() * row_weight)(0, 0);
  if (!any_grad(t, {mean.id(), var.id()})) return t.push(std::move(out), nullptr);
  const int im = mean.id(), iv = var.id();
  return t.push(std::move(out), [im, iv, y, row_weight](Tape& tp, int self) {
    const double g = tp.grad_of(self)(0, 0);
    const auto m = tp.value_of(im).array();
    const auto v = tp.value_of(iv).array();
    const Eigen::ArrayXXd diff = m - y.array();
    Eigen::ArrayXXd dm = diff / v;
    Eigen::ArrayXXd dv = 0.5 * (1.0 / v - diff.square() / v.square());
    dm.colwise() *= row_weight.array() * g;
    dv.colwise() *= row_weight.array() * g;
    tp.accumulate(im, dm.matrix());
    tp.accumulate(iv, dv.matrix());
  });
}

Var gaussian_kl(const Var& mean_q, const Var& var_q, const Var& mean_p, const Var& var_p,
                const Vector& row_weight) {
  Tape& t = tape_of(mean_q, mean_p);
  require_same_shape(mean_q, var_q, "gaussian_kl");
  require_same_shape(mean_q, mean_p, "gaussian_kl");
  require_same_shape(mean_p, var_p, "gaussian_kl");
  if (row_weight.size() != mean_q.rows()) throw std::invalid_argument("gaussian_kl: weight size");
  const auto mq = mean_q.value().array();
  const auto vq = var_q.value().array();
  const auto mp = mean_p.value().array();
  const auto vp = var_p.value().array();
  const Eigen::ArrayXXd terms = 0.5 * ((vp.log() - vq.log()) + (vq + (mq - mp).square()) / vp - 1.0);
  Matrix out(1, 1);
  out(0, 0) = (terms.rowwise().sum().matrix().transpose() * row_weight)(0, 0);
  if (!any_grad(t, {mean_q.id(), var_q.id(), mean_p.id(), var_p.id()})) {
    return t.push(std::move(out), nullptr);
  }
  const int imq = mean_q.id(), ivq = var_q.id(), imp = mean_p.id(), ivp = var_p.id();
  return t.push(std::move(out), [imq, ivq, imp, ivp, row_weight](Tape& tp, int self) {
    const double g = tp.grad_of(self)(0, 0);
    const auto mq = tp.value_of(imq).array();
    const auto vq = tp.value_of(ivq).array();
    const auto mp = tp.value_of(imp).array();
    const auto vp = tp.value_of(ivp).array();
    const Eigen::ArrayXXd diff = mq - mp;
    Eigen::ArrayXXd dmq = diff / vp;
    Eigen::ArrayXXd dvq = 0.5 * (1.0 / vp - 1.0 / vq);
    Eigen::ArrayXXd dvp = 0.5 * (1.0 / vp - (vq + diff.square()) / vp.square());
    const Eigen::ArrayXd w = row_weight.array() * g;
    dmq.colwise() *= w;
    dvq.colwise() *= w;
    dvp.colwise() *= w;
    tp.accumulate(imq, dmq.matrix());
    tp.accumulate(ivq, dvq.matrix());
    tp.accumulate_expr(imp, -dmq.matrix());
    tp.accumulate(ivp, dvp.matrix());
  });
}

}  // namespace cchp::ad
