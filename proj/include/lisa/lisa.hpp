// Copyright 2026 The lisa-lab Authors
// SPDX-License-Identifier: Apache-2.0

// Score producers for the sharing attention variants.
//
// A LiSA layer receives the final pre-softmax scores of the layer in front
// of it, computes a low-rank correction
//
//   delta_i = rope(H Wq_lr)_i rope(H Wk_lr)_g(i)^T / sqrt(r)
//
// and integrates the two per (query, key) position through a small head
// alignment network acting on the 2h channels [prev_1..prev_h,
// delta_1..delta_h]: a two-layer ReLU FFN (dl), a single linear map (sl),
// or plain addition (plus). Masked positions are never fed to the
// alignment network and stay exactly 0.

#ifndef LISA_LISA_HPP
#define LISA_LISA_HPP

#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "lisa/attention.hpp"
#include "lisa/autodiff.hpp"
#include "lisa/config.hpp"

namespace lisa {

using Var = ad::Var<double>;
using Tape = ad::Tape<double>;

/// Trainable parameters of one LiSA layer.
struct LisaParams {
  LisaLayerConfig config;
  TensorD wq_lr;     ///< d x (h * r_q)
  TensorD wk_lr;     ///< d x (h_kv * r_k)
  TensorD align_w1;  ///< 2h x m (dl)
  TensorD align_w2;  ///< m x h (dl)
  TensorD align_w;   ///< 2h x h (sl)

  /// Tensors present for this variant, by checkpoint name.
  std::vector<std::pair<std::string, TensorD*>> named();
  std::vector<std::pair<std::string, const TensorD*>> named() const;

  /// Throws ConfigError unless every tensor matches the configured shape.
  void validate(const ModelConfig& model) const;
};

/// Fresh parameters. Low-rank projections are N(0, 0.02^2). The alignment
/// network starts out computing prev + delta exactly (the plus variant), so
/// an untrained layer behaves like direct sharing plus a tiny correction:
/// sl uses [I; I], dl routes channel k through hidden units k and h+k as
/// relu(x) - relu(-x) and leaves the remaining hidden units with small
/// random inputs and zero outputs.
LisaParams init_lisa_params(const ModelConfig& model, const LisaLayerConfig& config, std::mt19937_64& rng);

/// Tape handles for one layer's LiSA parameters.
struct LisaVars {
  Var wq_lr, wk_lr;
  std::optional<Var> align_w1, align_w2, align_w;
};

LisaVars bind_lisa(Tape& tape, const LisaParams& params, bool trainable);

struct DeltaTerms {
  Var delta;  ///< {h, l, l} low-rank scores, masked entries 0
  Var q_lr;   ///< l x (h * r), rotated
  Var k_lr;   ///< l x (h_kv * r), rotated
};

DeltaTerms compute_delta(Var hidden, const LisaVars& params, const LisaLayerConfig& config,
                         const ModelConfig& model);

Var align_and_integrate(Var prev_scores, Var delta, const LisaVars& params, const LisaLayerConfig& config,
                        Index heads);

/// compute_delta followed by align_and_integrate.
Var lisa_scores(Var hidden, Var prev_scores, const LisaVars& params, const LisaLayerConfig& config,
                const ModelConfig& model);

/// Direct sharing: the previous layer's scores, unchanged.
Var ds_scores(std::optional<Var> prev_scores);

// Value-level entry points over plain tensors.

TensorD compute_delta(const TensorD& hidden, const LisaParams& params, const ModelConfig& model);
TensorD align_and_integrate(const TensorD& prev_scores, const TensorD& delta, const LisaParams& params);
TensorD lisa_scores(const TensorD& hidden, const TensorD& prev_scores, const LisaParams& params,
                    const ModelConfig& model);
TensorD ds_scores(const TensorD& prev_scores);
/// Average attention weights {h, l, l}: row t is 1/(t+1) over the prefix.
TensorD avg_scores(Index heads, Index l);

/// Pointwise alignment of one channel vector [prev_1..prev_h, delta_1..delta_h]
/// to h outputs; the decoder applies this to each position of a score row.
Eigen::VectorXd align_channels(const Eigen::VectorXd& prev, const Eigen::VectorXd& delta, const LisaParams& params);

}  // namespace lisa

#endif  // LISA_LISA_HPP
