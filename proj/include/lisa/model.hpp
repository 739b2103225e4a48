// Copyright 2026 The lisa-lab Authors
// SPDX-License-Identifier: Apache-2.0

// LLaMA-style decoder: token embedding, pre-norm residual blocks of
// (RMSNorm -> attention) and (RMSNorm -> SwiGLU FFN), final RMSNorm and an
// untied LM head. The attention score producer of every layer is chosen by
// a SharingConfig.

#ifndef LISA_MODEL_HPP
#define LISA_MODEL_HPP

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lisa/config.hpp"
#include "lisa/lisa.hpp"

namespace lisa {

struct LayerWeights {
  TensorD wq;         ///< d x (h * d_k)
  TensorD wk;         ///< d x (h_kv * d_k)
  TensorD wv;         ///< d x (h_kv * d_k)
  TensorD wo;         ///< (h * d_k) x d
  TensorD attn_norm;  ///< {d}
  TensorD w_gate;     ///< d x d_ff
  TensorD w_up;       ///< d x d_ff
  TensorD w_down;     ///< d_ff x d
  TensorD ffn_norm;   ///< {d}
};

struct ModelWeights {
  TensorD embed;  ///< vocab x d
  std::vector<LayerWeights> layers;
  TensorD final_norm;  ///< {d}
  TensorD lm_head;     ///< d x vocab

  /// Every tensor by checkpoint name, in a fixed order.
  std::vector<std::pair<std::string, TensorD*>> named();
  std::vector<std::pair<std::string, const TensorD*>> named() const;
  void validate(const ModelConfig& config) const;
};

/// Gaussian N(0, 0.02^2) matrices (output projections scaled by
/// 1/sqrt(2 n_layers)), unit norm gains.
ModelWeights init_weights(const ModelConfig& config, std::uint64_t seed);

/// Weights plus the attention-variant map and per-layer LiSA parameters.
struct Model {
  ModelConfig config;
  ModelWeights weights;
  SharingConfig sharing;
  std::vector<std::optional<LisaParams>> lisa;  ///< indexed by layer

  static Model create(const ModelConfig& config, std::uint64_t seed);

  /// Switches to `sharing`, keeping existing LiSA parameters whose shape
  /// still matches and initializing the rest from `seed`.
  void install_sharing(const SharingConfig& sharing, std::uint64_t seed);

  const LisaParams* lisa_params(Index layer) const;
  void validate() const;

  /// Checksum over the base weights only (LiSA parameters excluded).
  std::uint64_t base_checksum() const;
};

struct LayerVars {
  Var wq, wk, wv, wo, attn_norm, w_gate, w_up, w_down, ffn_norm;
};

struct ModelVars {
  Var embed;
  std::vector<LayerVars> layers;
  Var final_norm, lm_head;
  std::vector<std::optional<LisaVars>> lisa;
};

/// Binds every tensor of `model` as a tape leaf without copying.
ModelVars bind_model(Tape& tape, const Model& model, bool base_trainable, bool lisa_trainable);

struct AttentionResult {
  Var out;                    ///< l x d, after W^O
  std::optional<Var> scores;  ///< {h, l, l} pre-softmax A (absent for avg)
  Var weights;                ///< {h, l, l} post-softmax P
  std::optional<Var> q, k;    ///< rotated projections (standard layers)
  Var v;
  Var mixed;  ///< concat of P_i V_g(i), before W^O
  std::optional<Var> q_lr, k_lr;
};

/// One attention sub-layer. `prev_scores` is the final A of the layer in
/// front; ds and lisa layers require it.
AttentionResult attention_forward(Var normed, const LayerVars& w, const LayerSharing& sharing,
                                  const LisaVars* lisa, std::optional<Var> prev_scores, const ModelConfig& config);

struct LayerNodes {
  Var normed;  ///< attention input after RMSNorm
  AttentionResult attn;
  Var output;  ///< residual stream after the block
};

struct ForwardGraph {
  Var logits;
  std::vector<LayerNodes> layers;
};

ForwardGraph forward_graph(const ModelVars& vars, const ModelConfig& config, const SharingConfig& sharing,
                           std::span<const int> tokens);

/// Captured activations of one layer (masked score entries stored as 0).
struct LayerTrace {
  TensorD A, P, Q, K, V, PV, attn_out;
};

struct AttentionTrace {
  std::vector<LayerTrace> layers;
  Index length = 0;
};

struct ForwardResult {
  TensorD logits;  ///< l x vocab
  std::optional<AttentionTrace> trace;
};

ForwardResult model_forward(const Model& model, std::span<const int> tokens, bool trace = false);
/// Forward under a different sharing map (e.g. all-standard for the teacher).
ForwardResult model_forward(const Model& model, const SharingConfig& sharing, std::span<const int> tokens,
                            bool trace = false);

/// Bytes as token ids.
std::vector<int> tokenize(std::string_view text);
std::string detokenize(std::span<const int> tokens);

}  // namespace lisa

#endif  // LISA_MODEL_HPP
