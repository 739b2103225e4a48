// Copyright 2026 The lisa-lab Authors
// SPDX-License-Identifier: Apache-2.0

// Analytic memory and FLOP accounting for prefill and decode.
//
// Conventions: 2 FLOPs per multiply-add; attention counts the Q, K, V, O
// projections plus the two l^2 products (scores and weighted values); KV
// bytes count K and V for every layer; sizes are reported in GiB (2^30).

#ifndef LISA_COST_HPP
#define LISA_COST_HPP

#include <string>
#include <vector>

#include "lisa/config.hpp"

namespace lisa {

/// Shape parameters that drive the cost model.
struct ArchShape {
  std::string name;
  Index n_layers = 0;
  Index d = 0;
  Index h = 0;
  Index h_kv = 0;
  Index d_k = 0;
  Index d_ff = 0;
  /// 2 for the plain up/down FFN, 3 for the gated form.
  Index ffn_matrices = 3;
  Index vocab = 0;

  void validate() const;
};

/// opt-175b, llama-65b, llama3-70b, llama2-7b, llama3-8b.
ArchShape cost_preset(const std::string& name);
std::vector<std::string> cost_preset_names();
ArchShape arch_shape(const ModelConfig& config, const std::string& name = "model");

/// How one layer produces its attention weights, for FLOP counting.
struct LayerCost {
  AttentionMode mode = AttentionMode::standard;
  Index rank = 0;  ///< low-rank width r (lisa)
  LisaVariant variant = LisaVariant::dl;
  Index ffn_hidden = 0;  ///< alignment FFN width m (dl)
};

std::vector<LayerCost> layer_costs(const SharingConfig& sharing);

constexpr double kGiB = 1073741824.0;

struct MemoryReport {
  Index length = 0;
  Index batch = 0;
  Index dtype_bytes = 2;
  double kv_bytes = 0;             ///< K and V of every layer, standard model
  double k_savings_bytes = 0;      ///< K bytes removed by storing K_LR in lisa layers
  double prefill_score_bytes = 0;  ///< one h x l x l score matrix held during prefill
  double decode_score_bytes = 0;   ///< one h x l score row held during decode
  double prefill_net_bytes = 0;    ///< k_savings - prefill_score
  double decode_net_bytes = 0;     ///< k_savings - decode_score
  double lisa_kv_bytes = 0;        ///< kv_bytes - k_savings
  double break_even_length = 0;    ///< l at which prefill_net crosses zero

  double kv_gib() const { return kv_bytes / kGiB; }
};

/// Uniform rank r across `n_lisa` layers. Throws ConfigError for r > d_k.
MemoryReport memory_report(const ArchShape& shape, Index length, Index batch, Index n_lisa, Index rank,
                           Index dtype_bytes = 2);
/// Per-layer ranks, one entry per lisa layer.
MemoryReport memory_report(const ArchShape& shape, Index length, Index batch, const std::vector<Index>& lisa_ranks,
                           Index dtype_bytes = 2);

/// The single-layer closed forms of the savings for h = h_kv, batch 1:
/// h l (N (d_k - r) - l) dtype (prefill) and h l (N (d_k - r) - 1) dtype
/// (decode).
double prefill_net_closed_form(Index h, Index length, Index n_lisa, Index d_k, Index rank, Index dtype_bytes = 2);
double decode_net_closed_form(Index h, Index length, Index n_lisa, Index d_k, Index rank, Index dtype_bytes = 2);

/// Context seen by the last decode step.
enum class DecodeContext {
  input_plus_output,  ///< l_in + l_out
  input_only,         ///< l_in
};

struct FlopsReport {
  double prefill_attention = 0;
  double prefill_ffn = 0;
  double decode_attention = 0;  ///< last decode step, whole batch
  double decode_ffn = 0;
  Index decode_context = 0;

  /// Attention plus FFN FLOPs of one decoded token of one sequence.
  double decode_per_token(Index batch) const { return (decode_attention + decode_ffn) / static_cast<double>(batch); }
};

/// `layers` empty means every layer is standard.
FlopsReport flops_report(const ArchShape& shape, Index l_in, Index l_out, Index batch,
                         const std::vector<LayerCost>& layers = {},
                         DecodeContext context = DecodeContext::input_plus_output);

}  // namespace lisa

#endif  // LISA_COST_HPP
