// Copyright 2026 The lisa-lab Authors
// SPDX-License-Identifier: Apache-2.0

// Matrix-level reverse-mode automatic differentiation.
//
// A Tape records every operation executed on its variables in program
// order, which is already a topological order. backward() walks the
// records in reverse and calls each operation's adjoint exactly once.
// Operations whose inputs all lack requires_grad store no adjoint, so a
// tape without trainable leaves is a plain eager evaluator.
//
// Products use Eigen's GEMM. Its accumulation order depends only on the
// operand shapes and the build, never on thread timing (Eigen threading is
// not enabled), so every product is bit-deterministic for a fixed binary.

#ifndef LISA_AUTODIFF_HPP
#define LISA_AUTODIFF_HPP

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lisa/errors.hpp"
#include "lisa/kernels.hpp"
#include "lisa/tensor.hpp"

namespace lisa::ad {

template <typename Scalar>
class Tape;

/// Handle to a value recorded on a tape.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<Scalar>& value() const { return tape->value(*this); }
  const Matrix<Scalar>& mat() const { return tape->value(*this).mat(); }
  const Shape& shape() const { return value().shape(); }
  Index rows() const { return mat().rows(); }
  Index cols() const { return mat().cols(); }
  bool requires_grad() const { return tape->requires_grad(*this); }
};

template <typename Scalar>
class Tape {
 public:
  using T = Tensor<Scalar>;
  using M = Matrix<Scalar>;
  using V = Var<Scalar>;
  /// Adjoint: receives the tape and the gradient flowing into this node.
  using Adjoint = std::function<void(Tape&, const M&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  V constant(T value) { return push(Node{std::move(value), nullptr, false, true, {}, {}}); }

  V leaf(T value, bool requires_grad = true) {
    return push(Node{std::move(value), nullptr, requires_grad, true, {}, {}});
  }

  /// Leaf that refers to caller-owned storage; the tensor must outlive the tape.
  V param(const T& ref, bool requires_grad) {
    return push(Node{T{}, &ref, requires_grad, true, {}, {}});
  }

  /// Records the result of an operation. `adjoint` is kept only when some
  /// input requires a gradient.
  V record(std::string_view op, T value, std::initializer_list<V> inputs, Adjoint adjoint) {
    return record(op, std::move(value), std::span<const V>(inputs.begin(), inputs.size()),
                  std::move(adjoint));
  }

  V record(std::string_view op, T value, std::span<const V> inputs, Adjoint adjoint) {
    if (check_finite_ && !value.all_finite()) {
      throw NumericError(std::string(op) + " produced a non-finite value");
    }
    bool needs = false;
    for (const V& in : inputs) {
      if (in.tape != this) throw ContractError(std::string(op) + ": operand from another tape");
      needs = needs || nodes_[in.id].requires_grad;
    }
    Node n{std::move(value), nullptr, needs, false, {}, {}};
    if (needs) n.adjoint = std::move(adjoint);
    return push(std::move(n));
  }

  const T& value(V v) const {
    const Node& n = nodes_.at(v.id);
    return n.external ? *n.external : n.value;
  }
  bool requires_grad(V v) const { return nodes_.at(v.id).requires_grad; }
  bool has_grad(V v) const { return nodes_.at(v.id).grad.has_value(); }

  /// Gradient of the last backward() target with respect to `v` (zeros when
  /// no gradient reached it).
  T grad(V v) const {
    const Node& n = nodes_.at(v.id);
    const T& val = value(v);
    if (!n.grad) return T(val.shape());
    return T(val.shape(), *n.grad);
  }

  /// Adds `g` into the gradient of node `id`; ignored for nodes that do not
  /// require gradients.
  void accumulate(std::size_t id, const M& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad) {
      *n.grad += g;
    } else {
      n.grad = g;
    }
  }

  void backward(V loss) {
    if (loss.tape != this) throw ContractError("backward: loss from another tape");
    if (value(loss).numel() != 1) {
      throw ContractError("backward needs a scalar loss, got shape " + shape_str(value(loss).shape()));
    }
    for (Node& n : nodes_) {
      if (!n.is_leaf) n.grad.reset();
    }
    if (!nodes_[loss.id].requires_grad) return;
    nodes_[loss.id].grad = M::Ones(1, 1);
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.grad || !n.adjoint) continue;
      const M g = std::move(*n.grad);
      n.grad.reset();
      n.adjoint(*this, g);
    }
  }

  std::size_t size() const { return nodes_.size(); }
  void set_check_finite(bool on) { check_finite_ = on; }

 private:
  struct Node {
    T value;
    const T* external;
    bool requires_grad;
    bool is_leaf;
    Adjoint adjoint;
    std::optional<M> grad;
  };

  V push(Node n) {
    nodes_.push_back(std::move(n));
    return V{this, nodes_.size() - 1};
  }

  // deque keeps references from value() valid while new nodes are appended.
  std::deque<Node> nodes_;
  bool check_finite_ = true;
};

// ---------------------------------------------------------------------------
// Operations

namespace detail {

template <typename Scalar>
Tensor<Scalar> like(const Shape& shape, Matrix<Scalar> m) {
  return Tensor<Scalar>(shape, std::move(m));
}

enum class Broadcast { same, row, scalar };

template <typename Scalar>
Broadcast broadcast_kind(const Var<Scalar>& a, const Var<Scalar>& b, std::string_view op) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return Broadcast::same;
  if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::row;
  if (b.rows() == 1 && b.cols() == 1) return Broadcast::scalar;
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                   shape_str(a.shape()));
}

template <typename Scalar>
Matrix<Scalar> expand(const Matrix<Scalar>& b, Broadcast kind, Index rows, Index cols) {
  switch (kind) {
    case Broadcast::row:
      return b.replicate(rows, 1);
    case Broadcast::scalar:
      return Matrix<Scalar>::Constant(rows, cols, b(0, 0));
    case Broadcast::same:
      break;
  }
  return b;
}

template <typename Scalar>
Matrix<Scalar> reduce_to(const Matrix<Scalar>& g, Broadcast kind) {
  switch (kind) {
    case Broadcast::row:
      return g.colwise().sum();
    case Broadcast::scalar: {
      Matrix<Scalar> s(1, 1);
      s(0, 0) = g.sum();
      return s;
    }
    case Broadcast::same:
      break;
  }
  return g;
}

}  // namespace detail

/// a (m x k) times b (k x n).
template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions " + std::to_string(a.cols()) + " and " +
                     std::to_string(b.rows()) + " differ");
  }
  Matrix<Scalar> c = a.mat() * b.mat();
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("matmul", Tensor<Scalar>::from_matrix(std::move(c)), {a, b},
                        [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          const auto& am = t.value(Var<Scalar>{&t, ia}).mat();
                          const auto& bm = t.value(Var<Scalar>{&t, ib}).mat();
                          t.accumulate(ia, g * bm.transpose());
                          t.accumulate(ib, am.transpose() * g);
                        });
}

/// a (m x k) times b^T where b is (n x k).
template <typename Scalar>
Var<Scalar> matmul_nt(Var<Scalar> a, Var<Scalar> b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: inner dimensions " + std::to_string(a.cols()) + " and " +
                     std::to_string(b.cols()) + " differ");
  }
  Matrix<Scalar> c = a.mat() * b.mat().transpose();
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("matmul_nt", Tensor<Scalar>::from_matrix(std::move(c)), {a, b},
                        [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          const auto& am = t.value(Var<Scalar>{&t, ia}).mat();
                          const auto& bm = t.value(Var<Scalar>{&t, ib}).mat();
                          t.accumulate(ia, g * bm);
                          t.accumulate(ib, g.transpose() * am);
                        });
}

template <typename Scalar>
Var<Scalar> transpose(Var<Scalar> a) {
  Matrix<Scalar> c = a.mat().transpose();
  const std::size_t ia = a.id;
  return a.tape->record("transpose", Tensor<Scalar>::from_matrix(std::move(c)), {a},
                        [ia](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          t.accumulate(ia, g.transpose());
                        });
}

/// a + b; b may be a single row or a single value broadcast over a.
template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  const auto kind = detail::broadcast_kind(a, b, "add");
  Matrix<Scalar> c = a.mat() + detail::expand(b.mat(), kind, a.rows(), a.cols());
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("add", detail::like(a.shape(), std::move(c)), {a, b},
                        [ia, ib, kind](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          t.accumulate(ia, g);
                          t.accumulate(ib, detail::reduce_to(g, kind));
                        });
}

template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b) {
  const auto kind = detail::broadcast_kind(a, b, "sub");
  Matrix<Scalar> c = a.mat() - detail::expand(b.mat(), kind, a.rows(), a.cols());
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("sub", detail::like(a.shape(), std::move(c)), {a, b},
                        [ia, ib, kind](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          t.accumulate(ia, g);
                          t.accumulate(ib, -detail::reduce_to(g, kind));
                        });
}

template <typename Scalar>
Var<Scalar> hadamard(Var<Scalar> a, Var<Scalar> b) {
  const auto kind = detail::broadcast_kind(a, b, "hadamard");
  Matrix<Scalar> be = detail::expand(b.mat(), kind, a.rows(), a.cols());
  Matrix<Scalar> c = a.mat().cwiseProduct(be);
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("hadamard", detail::like(a.shape(), std::move(c)), {a, b},
                        [ia, ib, kind](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          const auto& am = t.value(Var<Scalar>{&t, ia}).mat();
                          const auto& bm = t.value(Var<Scalar>{&t, ib}).mat();
                          t.accumulate(ia, g.cwiseProduct(detail::expand(bm, kind, am.rows(), am.cols())));
                          t.accumulate(ib, detail::reduce_to<Scalar>(g.cwiseProduct(am), kind));
                        });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s) {
  Matrix<Scalar> c = a.mat() * s;
  const std::size_t ia = a.id;
  return a.tape->record("scale", detail::like(a.shape(), std::move(c)), {a},
                        [ia, s](Tape<Scalar>& t, const Matrix<Scalar>& g) { t.accumulate(ia, g * s); });
}

/// max(x, 0); the subgradient at 0 is 0.
template <typename Scalar>
Var<Scalar> relu(Var<Scalar> a) {
  Matrix<Scalar> c = a.mat().cwiseMax(Scalar(0));
  const std::size_t ia = a.id;
  return a.tape->record("relu", detail::like(a.shape(), std::move(c)), {a},
                        [ia](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          const auto& am = t.value(Var<Scalar>{&t, ia}).mat();
                          t.accumulate(ia, (am.array() > Scalar(0)).select(g.array(), Scalar(0)).matrix());
                        });
}

/// x * sigmoid(x) with the exact derivative s + x s (1 - s).
template <typename Scalar>
Var<Scalar> silu(Var<Scalar> a) {
  Matrix<Scalar> c = a.mat().unaryExpr([](Scalar x) { return kernels::silu(x); });
  const std::size_t ia = a.id;
  return a.tape->record("silu", detail::like(a.shape(), std::move(c)), {a},
                        [ia](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          const auto& am = t.value(Var<Scalar>{&t, ia}).mat();
                          Matrix<Scalar> d = am.unaryExpr([](Scalar x) {
                            const Scalar s = kernels::sigmoid(x);
                            return s + x * s * (Scalar(1) - s);
                          });
                          t.accumulate(ia, g.cwiseProduct(d));
                        });
}

template <typename Scalar>
Var<Scalar> rsqrt(Var<Scalar> a) {
  if ((a.mat().array() <= Scalar(0)).any()) throw NumericError("rsqrt of a non-positive value");
  Matrix<Scalar> c = a.mat().cwiseSqrt().cwiseInverse();
  const std::size_t ic = a.tape->size();
  const std::size_t ia = a.id;
  return a.tape->record("rsqrt", detail::like(a.shape(), std::move(c)), {a},
                        [ia, ic](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          const auto& cm = t.value(Var<Scalar>{&t, ic}).mat();
                          // d/dx x^{-1/2} = -1/2 x^{-3/2}
                          t.accumulate(ia, g.cwiseProduct(cm.cwiseProduct(cm).cwiseProduct(cm)) * Scalar(-0.5));
                        });
}

template <typename Scalar>
Var<Scalar> exp(Var<Scalar> a) {
  Matrix<Scalar> c = a.mat().array().exp().matrix();
  const std::size_t ic = a.tape->size();
  const std::size_t ia = a.id;
  return a.tape->record("exp", detail::like(a.shape(), std::move(c)), {a},
                        [ia, ic](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          t.accumulate(ia, g.cwiseProduct(t.value(Var<Scalar>{&t, ic}).mat()));
                        });
}

template <typename Scalar>
Var<Scalar> log(Var<Scalar> a) {
  if ((a.mat().array() <= Scalar(0)).any()) throw NumericError("log of a non-positive value");
  Matrix<Scalar> c = a.mat().array().log().matrix();
  const std::size_t ia = a.id;
  return a.tape->record("log", detail::like(a.shape(), std::move(c)), {a},
                        [ia](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          t.accumulate(ia, g.cwiseQuotient(t.value(Var<Scalar>{&t, ia}).mat()));
                        });
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a) {
  const std::size_t ia = a.id;
  const Index r = a.rows(), c = a.cols();
  return a.tape->record("sum", Tensor<Scalar>::scalar(a.mat().sum()), {a},
                        [ia, r, c](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          t.accumulate(ia, Matrix<Scalar>::Constant(r, c, g(0, 0)));
                        });
}

template <typename Scalar>
Var<Scalar> mean(Var<Scalar> a) {
  const Scalar n = static_cast<Scalar>(a.value().numel());
  return scale(sum(a), Scalar(1) / n);
}

/// Reinterprets the row-major storage under a new shape.
template <typename Scalar>
Var<Scalar> reshape(Var<Scalar> a, Shape shape) {
  Tensor<Scalar> c = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id;
  const Index r = a.rows(), cc = a.cols();
  return a.tape->record("reshape", std::move(c), {a},
                        [ia, r, cc](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          t.accumulate(ia, Eigen::Map<const Matrix<Scalar>>(g.data(), r, cc));
                        });
}

template <typename Scalar>
Var<Scalar> slice_cols(Var<Scalar> a, Index start, Index n) {
  if (start < 0 || n < 0 || start + n > a.cols()) throw ShapeError("slice_cols out of range");
  Matrix<Scalar> c = a.mat().middleCols(start, n);
  const std::size_t ia = a.id;
  const Index r = a.rows(), cols = a.cols();
  return a.tape->record("slice_cols", Tensor<Scalar>::from_matrix(std::move(c)), {a},
                        [ia, r, cols, start, n](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          Matrix<Scalar> full = Matrix<Scalar>::Zero(r, cols);
                          full.middleCols(start, n) = g;
                          t.accumulate(ia, full);
                        });
}

template <typename Scalar>
Var<Scalar> slice_rows(Var<Scalar> a, Index start, Index n) {
  if (start < 0 || n < 0 || start + n > a.rows()) throw ShapeError("slice_rows out of range");
  Matrix<Scalar> c = a.mat().middleRows(start, n);
  const std::size_t ia = a.id;
  const Index rows = a.rows(), cols = a.cols();
  return a.tape->record("slice_rows", Tensor<Scalar>::from_matrix(std::move(c)), {a},
                        [ia, rows, cols, start, n](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          Matrix<Scalar> full = Matrix<Scalar>::Zero(rows, cols);
                          full.middleRows(start, n) = g;
                          t.accumulate(ia, full);
                        });
}

template <typename Scalar>
Var<Scalar> concat_cols(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  const Index rows = parts[0].rows();
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix<Scalar> c(rows, cols);
  std::vector<std::pair<std::size_t, Index>> layout;
  Index at = 0;
  for (const auto& p : parts) {
    c.middleCols(at, p.cols()) = p.mat();
    layout.emplace_back(p.id, p.cols());
    at += p.cols();
  }
  return parts[0].tape->record("concat_cols", Tensor<Scalar>::from_matrix(std::move(c)), parts,
                               [layout](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                                 Index off = 0;
                                 for (const auto& [id, n] : layout) {
                                   t.accumulate(id, g.middleCols(off, n));
                                   off += n;
                                 }
                               });
}

template <typename Scalar>
Var<Scalar> concat_rows(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  const Index cols = parts[0].cols();
  Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column counts differ");
    rows += p.rows();
  }
  Matrix<Scalar> c(rows, cols);
  std::vector<std::pair<std::size_t, Index>> layout;
  Index at = 0;
  for (const auto& p : parts) {
    c.middleRows(at, p.rows()) = p.mat();
    layout.emplace_back(p.id, p.rows());
    at += p.rows();
  }
  return parts[0].tape->record("concat_rows", Tensor<Scalar>::from_matrix(std::move(c)), parts,
                               [layout](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                                 Index off = 0;
                                 for (const auto& [id, n] : layout) {
                                   t.accumulate(id, g.middleRows(off, n));
                                   off += n;
                                 }
                               });
}

/// Rotary position embedding of an l x (heads*head_dim) matrix whose row r
/// is position first_position + r.
template <typename Scalar>
Var<Scalar> rope(Var<Scalar> a, Index heads, Index head_dim, double base, Index first_position = 0) {
  Matrix<Scalar> c = a.mat();
  kernels::rope_inplace(c, heads, head_dim, base, first_position);
  const std::size_t ia = a.id;
  return a.tape->record("rope", Tensor<Scalar>::from_matrix(std::move(c)), {a},
                        [ia, heads, head_dim, base, first_position](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          Matrix<Scalar> back = g;
                          kernels::rope_inplace(back, heads, head_dim, base, first_position, -1.0);
                          t.accumulate(ia, back);
                        });
}

/// y = x / rms(x) * gain, row-wise; gain is 1 x d.
template <typename Scalar>
Var<Scalar> rmsnorm(Var<Scalar> x, Var<Scalar> gain, Scalar eps) {
  if (gain.rows() != 1 || gain.cols() != x.cols()) throw ShapeError("rmsnorm: gain must be 1 x d");
  const Index n = x.rows(), d = x.cols();
  RowVector<Scalar> gvec = gain.mat().row(0);
  Matrix<Scalar> y(n, d);
  std::vector<Scalar> inv(static_cast<std::size_t>(n));
  for (Index r = 0; r < n; ++r) {
    const Scalar ms = x.mat().row(r).squaredNorm() / static_cast<Scalar>(d);
    inv[static_cast<std::size_t>(r)] = Scalar(1) / std::sqrt(ms + eps);
    y.row(r) = (x.mat().row(r) * inv[static_cast<std::size_t>(r)]).cwiseProduct(gvec);
  }
  const std::size_t ix = x.id, ig = gain.id;
  return x.tape->record("rmsnorm", Tensor<Scalar>::from_matrix(std::move(y)), {x, gain},
                        [ix, ig, inv, d](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          const auto& xm = t.value(Var<Scalar>{&t, ix}).mat();
                          const auto& gm = t.value(Var<Scalar>{&t, ig}).mat();
                          Matrix<Scalar> gx(xm.rows(), d);
                          Matrix<Scalar> gg = Matrix<Scalar>::Zero(1, d);
                          for (Index r = 0; r < xm.rows(); ++r) {
                            const Scalar s = inv[static_cast<std::size_t>(r)];
                            const RowVector<Scalar> xhat = xm.row(r) * s;
                            gg += g.row(r).cwiseProduct(xhat);
                            const RowVector<Scalar> gy = g.row(r).cwiseProduct(gm.row(0));
                            // d xhat: s * (gy - xhat * mean(gy . xhat))
                            const Scalar proj = gy.dot(xhat) / static_cast<Scalar>(d);
                            gx.row(r) = s * (gy - xhat * proj);
                          }
                          t.accumulate(ix, gx);
                          t.accumulate(ig, gg);
                        });
}

/// Running mean over rows: row t of the result is (x_0 + ... + x_t) / (t + 1).
template <typename Scalar>
Var<Scalar> prefix_mean(Var<Scalar> a) {
  const Index l = a.rows();
  Matrix<Scalar> c(l, a.cols());
  RowVector<Scalar> run = RowVector<Scalar>::Zero(a.cols());
  for (Index t = 0; t < l; ++t) {
    run += a.mat().row(t);
    c.row(t) = run / static_cast<Scalar>(t + 1);
  }
  const std::size_t ia = a.id;
  return a.tape->record("prefix_mean", detail::like(a.shape(), std::move(c)), {a},
                        [ia, l](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          Matrix<Scalar> d(l, g.cols());
                          RowVector<Scalar> run = RowVector<Scalar>::Zero(g.cols());
                          for (Index s = l; s-- > 0;) {
                            run += g.row(s) / static_cast<Scalar>(s + 1);
                            d.row(s) = run;
                          }
                          t.accumulate(ia, d);
                        });
}

/// Sets the strictly-upper (future) part of each stacked l x l block to 0.
template <typename Scalar>
Var<Scalar> causal_mask_zero(Var<Scalar> a, Index l) {
  if (a.cols() != l || a.rows() % l != 0) throw ShapeError("causal_mask_zero: blocks must be l x l");
  Matrix<Scalar> c = a.mat();
  for (Index r = 0; r < c.rows(); ++r) c.row(r).tail(l - 1 - r % l).setZero();
  const std::size_t ia = a.id;
  return a.tape->record("causal_mask_zero", detail::like(a.shape(), std::move(c)), {a},
                        [ia, l](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          Matrix<Scalar> m = g;
                          for (Index r = 0; r < m.rows(); ++r) m.row(r).tail(l - 1 - r % l).setZero();
                          t.accumulate(ia, m);
                        });
}

/// Causal row softmax of stacked l x l blocks. Masked entries are excluded
/// before normalization and come out exactly 0.
template <typename Scalar>
Var<Scalar> softmax_causal(Var<Scalar> a, Index l) {
  if (a.cols() != l || a.rows() % l != 0) throw ShapeError("softmax_causal: blocks must be l x l");
  Matrix<Scalar> p = kernels::causal_softmax<Scalar>(a.mat(), l);
  const std::size_t ia = a.id;
  const std::size_t ip = a.tape->size();
  return a.tape->record("softmax_causal", detail::like(a.shape(), std::move(p)), {a},
                        [ia, ip](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          const auto& pm = t.value(Var<Scalar>{&t, ip}).mat();
                          // dA = P * (g - rowsum(g * P)); masked entries have P = 0.
                          Matrix<Scalar> gp = g.cwiseProduct(pm);
                          const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dots = gp.rowwise().sum();
                          Matrix<Scalar> d = gp - pm.cwiseProduct(dots.replicate(1, pm.cols()));
                          t.accumulate(ia, d);
                        });
}

/// Stacked {h, l, l} scores to a (l(l+1)/2) x h matrix: one row per
/// unmasked (query i, key j <= i) pair in row-major order, one column per head.
template <typename Scalar>
Var<Scalar> gather_pairs(Var<Scalar> a, Index heads, Index l) {
  if (a.cols() != l || a.rows() != heads * l) throw ShapeError("gather_pairs: expected {h, l, l}");
  const Index np = kernels::causal_pairs(l);
  Matrix<Scalar> c(np, heads);
  Index p = 0;
  for (Index i = 0; i < l; ++i)
    for (Index j = 0; j <= i; ++j, ++p)
      for (Index h = 0; h < heads; ++h) c(p, h) = a.mat()(h * l + i, j);
  const std::size_t ia = a.id;
  return a.tape->record("gather_pairs", Tensor<Scalar>::from_matrix(std::move(c)), {a},
                        [ia, heads, l](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          Matrix<Scalar> full = Matrix<Scalar>::Zero(heads * l, l);
                          Index q = 0;
                          for (Index i = 0; i < l; ++i)
                            for (Index j = 0; j <= i; ++j, ++q)
                              for (Index h = 0; h < heads; ++h) full(h * l + i, j) = g(q, h);
                          t.accumulate(ia, full);
                        });
}

/// Inverse of gather_pairs; masked entries of the result are 0.
template <typename Scalar>
Var<Scalar> scatter_pairs(Var<Scalar> pairs, Index heads, Index l) {
  if (pairs.rows() != kernels::causal_pairs(l) || pairs.cols() != heads) {
    throw ShapeError("scatter_pairs: expected l(l+1)/2 x h");
  }
  Matrix<Scalar> full = Matrix<Scalar>::Zero(heads * l, l);
  Index q = 0;
  for (Index i = 0; i < l; ++i)
    for (Index j = 0; j <= i; ++j, ++q)
      for (Index h = 0; h < heads; ++h) full(h * l + i, j) = pairs.mat()(q, h);
  const std::size_t ip = pairs.id;
  return pairs.tape->record("scatter_pairs", Tensor<Scalar>(Shape{heads, l, l}, std::move(full)), {pairs},
                            [ip, heads, l](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                              Matrix<Scalar> c(kernels::causal_pairs(l), heads);
                              Index p = 0;
                              for (Index i = 0; i < l; ++i)
                                for (Index j = 0; j <= i; ++j, ++p)
                                  for (Index h = 0; h < heads; ++h) c(p, h) = g(h * l + i, j);
                              t.accumulate(ip, c);
                            });
}

/// Rows of `table` selected by token id.
template <typename Scalar>
Var<Scalar> embedding(Var<Scalar> table, std::span<const int> tokens) {
  const Index vocab = table.rows();
  Matrix<Scalar> c(static_cast<Index>(tokens.size()), table.cols());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= vocab) {
      throw InputError("token id " + std::to_string(tokens[i]) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    c.row(static_cast<Index>(i)) = table.mat().row(tokens[i]);
  }
  const std::size_t it = table.id;
  std::vector<int> ids(tokens.begin(), tokens.end());
  const Index cols = table.cols();
  return table.tape->record("embedding", Tensor<Scalar>::from_matrix(std::move(c)), {table},
                            [it, ids, vocab, cols](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                              Matrix<Scalar> full = Matrix<Scalar>::Zero(vocab, cols);
                              for (std::size_t i = 0; i < ids.size(); ++i) full.row(ids[i]) += g.row(static_cast<Index>(i));
                              t.accumulate(it, full);
                            });
}

/// Mean over elements of the Huber penalty between a and b.
template <typename Scalar>
Var<Scalar> huber_mean(Var<Scalar> a, Var<Scalar> b, Scalar delta) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("huber: shapes differ");
  if (!(delta > Scalar(0))) throw ConfigError("huber: delta must be positive");
  const Matrix<Scalar> diff = a.mat() - b.mat();
  const Scalar n = static_cast<Scalar>(diff.size());
  Scalar total = 0;
  for (Index i = 0; i < diff.size(); ++i) {
    const Scalar ad = std::abs(diff.data()[i]);
    total += ad <= delta ? Scalar(0.5) * ad * ad : delta * (ad - Scalar(0.5) * delta);
  }
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("huber", Tensor<Scalar>::scalar(total / n), {a, b},
                        [ia, ib, delta, n](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          const auto& am = t.value(Var<Scalar>{&t, ia}).mat();
                          const auto& bm = t.value(Var<Scalar>{&t, ib}).mat();
                          Matrix<Scalar> d = (am - bm).unaryExpr([delta](Scalar x) {
                            return std::clamp(x, -delta, delta);
                          });
                          d *= g(0, 0) / n;
                          t.accumulate(ia, d);
                          t.accumulate(ib, -d);
                        });
}

/// Mean negative log-likelihood of targets[r] under a row-wise softmax of logits.
template <typename Scalar>
Var<Scalar> cross_entropy(Var<Scalar> logits, std::span<const int> targets) {
  if (static_cast<Index>(targets.size()) != logits.rows()) {
    throw ShapeError("cross_entropy: one target per row required");
  }
  const Index rows = logits.rows(), vocab = logits.cols();
  if (rows == 0) throw ShapeError("cross_entropy: no rows");
  Matrix<Scalar> probs(rows, vocab);
  Scalar total = 0;
  for (Index r = 0; r < rows; ++r) {
    const int y = targets[static_cast<std::size_t>(r)];
    if (y < 0 || y >= vocab) throw InputError("cross_entropy: target out of range");
    const auto row = logits.mat().row(r);
    const Scalar mx = row.maxCoeff();
    const Scalar lse = mx + std::log((row.array() - mx).exp().sum());
    total += lse - row(y);
    probs.row(r) = (row.array() - lse).exp().matrix();
  }
  const std::size_t il = logits.id;
  std::vector<int> ys(targets.begin(), targets.end());
  return logits.tape->record("cross_entropy", Tensor<Scalar>::scalar(total / static_cast<Scalar>(rows)), {logits},
                             [il, ys, probs = std::move(probs)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                               Matrix<Scalar> d = probs;
                               for (std::size_t r = 0; r < ys.size(); ++r) d(static_cast<Index>(r), ys[r]) -= Scalar(1);
                               d *= g(0, 0) / static_cast<Scalar>(ys.size());
                               t.accumulate(il, d);
                             });
}

// ---------------------------------------------------------------------------
// Finite-difference oracle

template <typename Scalar>
using LossFn = std::function<Var<Scalar>(Tape<Scalar>&, std::span<const Var<Scalar>>)>;

struct GradCheckOptions {
  double eps = 1e-5;
  /// Coordinates checked per parameter; 0 checks every coordinate.
  Index max_coords = 0;
  std::uint64_t seed = 0;
};

/// Largest |analytic - central difference| / (|central difference| + 1e-12)
/// over the checked coordinates of every parameter.
template <typename Scalar>
Scalar grad_check(const LossFn<Scalar>& f, std::vector<Tensor<Scalar>> params,
                  const GradCheckOptions& opts = {}) {
  if (!(opts.eps > 0)) throw ContractError("grad_check: eps must be positive");
  auto evaluate = [&](bool with_grad, std::vector<Tensor<Scalar>>* grads) {
    Tape<Scalar> tape;
    std::vector<Var<Scalar>> vars;
    vars.reserve(params.size());
    for (const auto& p : params) vars.push_back(tape.param(p, with_grad));
    Var<Scalar> loss = f(tape, vars);
    if (loss.value().numel() != 1) throw ContractError("grad_check: loss must be scalar");
    const Scalar v = loss.value().item();
    if (grads) {
      tape.backward(loss);
      for (const auto& var : vars) grads->push_back(tape.grad(var));
    }
    return v;
  };

  std::vector<Tensor<Scalar>> analytic;
  const Scalar base = evaluate(true, &analytic);
  if (evaluate(false, nullptr) != base) {
    throw ContractError("grad_check: loss function is not deterministic");
  }

  std::mt19937_64 rng(opts.seed);
  Scalar worst = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Index n = params[k].numel();
    std::vector<Index> coords;
    if (opts.max_coords <= 0 || opts.max_coords >= n) {
      coords.resize(static_cast<std::size_t>(n));
      std::iota(coords.begin(), coords.end(), Index{0});
    } else {
      std::uniform_int_distribution<Index> pick(0, n - 1);
      for (Index c = 0; c < opts.max_coords; ++c) coords.push_back(pick(rng));
    }
    for (Index c : coords) {
      Scalar* x = params[k].data() + c;
      const Scalar saved = *x;
      *x = saved + static_cast<Scalar>(opts.eps);
      const Scalar up = evaluate(false, nullptr);
      *x = saved - static_cast<Scalar>(opts.eps);
      const Scalar down = evaluate(false, nullptr);
      *x = saved;
      const Scalar numeric = (up - down) / static_cast<Scalar>(2 * opts.eps);
      const Scalar a = analytic[k].data()[c];
      worst = std::max(worst, std::abs(a - numeric) / (std::abs(numeric) + Scalar(1e-12)));
    }
  }
  return worst;
}

}  // namespace lisa::ad

#endif  // LISA_AUTODIFF_HPP
