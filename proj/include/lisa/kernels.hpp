// Copyright 2026 The lisa-lab Authors
// SPDX-License-Identifier: Apache-2.0

// Plain numeric kernels shared by the autodiff tape and the KV-cached
// decoder. Everything here is a free function over Eigen storage, templated
// on the scalar type.

#ifndef LISA_KERNELS_HPP
#define LISA_KERNELS_HPP

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>

#include "lisa/errors.hpp"
#include "lisa/tensor.hpp"

namespace lisa::kernels {

/// Angle of rotary pair `pair` at `position` for a head of width `head_dim`.
inline double rope_angle(Index position, Index pair, Index head_dim, double base) {
  const double inv_freq = std::pow(base, -2.0 * static_cast<double>(pair) / static_cast<double>(head_dim));
  return static_cast<double>(position) * inv_freq;
}

/// Rotates consecutive coordinate pairs of every head in every row.
/// Row r holds the token at position `first_position + r`; `sign` = -1
/// applies the inverse rotation (used by the adjoint).
template <typename Derived>
void rope_inplace(Eigen::MatrixBase<Derived>& x, Index heads, Index head_dim, double base,
                  Index first_position, double sign = 1.0) {
  using Scalar = typename Derived::Scalar;
  if (head_dim % 2 != 0) {
    throw ConfigError("rotary embedding needs an even head width, got " + std::to_string(head_dim));
  }
  if (x.cols() != heads * head_dim) {
    throw ShapeError("rope: " + std::to_string(x.cols()) + " columns for " + std::to_string(heads) +
                     " heads of width " + std::to_string(head_dim));
  }
  const Index half = head_dim / 2;
  for (Index r = 0; r < x.rows(); ++r) {
    const Index pos = first_position + r;
    for (Index i = 0; i < half; ++i) {
      const double angle = sign * rope_angle(pos, i, head_dim, base);
      const Scalar c = static_cast<Scalar>(std::cos(angle));
      const Scalar s = static_cast<Scalar>(std::sin(angle));
      for (Index h = 0; h < heads; ++h) {
        const Index j = h * head_dim + 2 * i;
        const Scalar a = x(r, j);
        const Scalar b = x(r, j + 1);
        x(r, j) = a * c - b * s;
        x(r, j + 1) = a * s + b * c;
      }
    }
  }
}

/// In-place softmax over the first `length` entries of a row; entries past
/// `length` are set to exactly zero.
template <typename Derived>
void softmax_prefix_inplace(Eigen::MatrixBase<Derived>&& row, Index length) {
  using Scalar = typename Derived::Scalar;
  Scalar mx = row(0, 0);
  for (Index j = 1; j < length; ++j) mx = std::max(mx, row(0, j));
  Scalar total = 0;
  for (Index j = 0; j < length; ++j) {
    row(0, j) = std::exp(row(0, j) - mx);
    total += row(0, j);
  }
  for (Index j = 0; j < length; ++j) row(0, j) /= total;
  for (Index j = length; j < row.cols(); ++j) row(0, j) = Scalar(0);
}

/// Row-wise causal softmax of stacked score blocks: row r of an (h*l) x l
/// matrix is query position r % l and may see columns 0..r % l.
template <typename Scalar>
Matrix<Scalar> causal_softmax(const Matrix<Scalar>& scores, Index l) {
  Matrix<Scalar> p = scores;
  for (Index r = 0; r < p.rows(); ++r) softmax_prefix_inplace(p.row(r), (r % l) + 1);
  return p;
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  return Scalar(1) / (Scalar(1) + std::exp(-x));
}

template <typename Scalar>
Scalar silu(Scalar x) {
  return x * sigmoid(x);
}

/// RMS normalization of each row followed by a per-column gain.
template <typename Scalar>
Matrix<Scalar> rmsnorm(const Matrix<Scalar>& x, const RowVector<Scalar>& gain, Scalar eps) {
  Matrix<Scalar> y(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar ms = x.row(r).squaredNorm() / static_cast<Scalar>(x.cols());
    const Scalar inv = Scalar(1) / std::sqrt(ms + eps);
    y.row(r) = (x.row(r) * inv).cwiseProduct(gain);
  }
  return y;
}

/// SwiGLU feed-forward: (silu(x Wg) * (x Wu)) Wd.
template <typename Scalar>
Matrix<Scalar> gated_ffn(const Matrix<Scalar>& x, const Matrix<Scalar>& w_gate,
                         const Matrix<Scalar>& w_up, const Matrix<Scalar>& w_down) {
  Matrix<Scalar> gate = x * w_gate;
  const Matrix<Scalar> up = x * w_up;
  gate = gate.unaryExpr([](Scalar v) { return silu(v); });
  const Matrix<Scalar> hidden = gate.cwiseProduct(up);
  return hidden * w_down;
}

/// Number of unmasked (query, key) pairs of a causal l x l block.
inline Index causal_pairs(Index l) { return l * (l + 1) / 2; }

}  // namespace lisa::kernels

#endif  // LISA_KERNELS_HPP
