// Copyright 2026 The lisa-lab Authors
// SPDX-License-Identifier: Apache-2.0

// Multi-head attention building blocks shared by standard attention and
// the sharing variants. Score tensors are {h, l, l} stacks: head i owns rows
// [i*l, (i+1)*l) of the storage matrix.

#ifndef LISA_ATTENTION_HPP
#define LISA_ATTENTION_HPP

#include <cmath>
#include <vector>

#include "lisa/autodiff.hpp"

namespace lisa {

/// Key/value head serving query head `head` under grouped-query attention:
/// query head g*(h/h_kv)+j uses kv head g.
inline Index kv_head_of(Index head, Index h, Index h_kv) { return head / (h / h_kv); }

/// Causally masked scores q_i k_g^T * scale for every query head, with
/// masked entries stored as 0. q is l x (h*width), k is l x (h_kv*width).
template <typename Scalar>
ad::Var<Scalar> multihead_scores(ad::Var<Scalar> q, ad::Var<Scalar> k, Index h, Index h_kv, Index width,
                                 Scalar scale) {
  const Index l = q.rows();
  if (k.rows() != l) throw ShapeError("multihead_scores: q and k lengths differ");
  if (q.cols() != h * width || k.cols() != h_kv * width) {
    throw ShapeError("multihead_scores: projections do not match head layout");
  }
  std::vector<ad::Var<Scalar>> k_heads;
  k_heads.reserve(static_cast<std::size_t>(h_kv));
  for (Index g = 0; g < h_kv; ++g) k_heads.push_back(ad::slice_cols(k, g * width, width));
  std::vector<ad::Var<Scalar>> blocks;
  blocks.reserve(static_cast<std::size_t>(h));
  for (Index i = 0; i < h; ++i) {
    auto qi = ad::slice_cols(q, i * width, width);
    blocks.push_back(ad::matmul_nt(qi, k_heads[static_cast<std::size_t>(kv_head_of(i, h, h_kv))]));
  }
  auto stacked = ad::concat_rows<Scalar>(blocks);
  auto scaled = ad::scale(stacked, scale);
  auto masked = ad::causal_mask_zero(scaled, l);
  return ad::reshape(masked, Shape{h, l, l});
}

/// Concat_i(P_i V_g(i)): weights {h, l, l}, v l x (h_kv*width) -> l x (h*width).
template <typename Scalar>
ad::Var<Scalar> multihead_mix(ad::Var<Scalar> weights, ad::Var<Scalar> v, Index h, Index h_kv, Index width) {
  const Index l = v.rows();
  if (weights.rows() != h * l || weights.cols() != l) throw ShapeError("multihead_mix: weights must be {h, l, l}");
  std::vector<ad::Var<Scalar>> v_heads;
  for (Index g = 0; g < h_kv; ++g) v_heads.push_back(ad::slice_cols(v, g * width, width));
  std::vector<ad::Var<Scalar>> outs;
  for (Index i = 0; i < h; ++i) {
    auto pi = ad::slice_rows(weights, i * l, l);
    outs.push_back(ad::matmul(pi, v_heads[static_cast<std::size_t>(kv_head_of(i, h, h_kv))]));
  }
  return ad::concat_cols<Scalar>(outs);
}

/// Uniform causal weights: row t of every head is 1/(t+1) over positions 0..t.
template <typename Scalar>
Tensor<Scalar> uniform_causal_weights(Index h, Index l) {
  Tensor<Scalar> p(Shape{h, l, l});
  for (Index i = 0; i < h; ++i)
    for (Index t = 0; t < l; ++t)
      for (Index s = 0; s <= t; ++s) p.at3(i, t, s) = Scalar(1) / static_cast<Scalar>(t + 1);
  return p;
}

}  // namespace lisa

#endif  // LISA_ATTENTION_HPP
