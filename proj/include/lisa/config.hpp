// Copyright 2026 The lisa-lab Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef LISA_CONFIG_HPP
#define LISA_CONFIG_HPP

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lisa/tensor.hpp"

namespace lisa {

/// Decoder-only transformer hyperparameters.
struct ModelConfig {
  Index n_layers = 4;
  Index d = 64;       ///< hidden width, equal to h * d_k
  Index h = 4;        ///< query heads
  Index h_kv = 4;     ///< key/value heads; divides h
  Index d_k = 16;     ///< head width
  Index d_ff = 172;   ///< gated FFN intermediate width
  Index vocab = 258;  ///< 256 byte values plus BOS and EOS
  Index max_len = 256;
  double rope_base = 10000.0;
  double norm_eps = 1e-5;

  /// Query heads served by each key/value head.
  Index group_size() const { return h / h_kv; }
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline constexpr int kBosToken = 256;
inline constexpr int kEosToken = 257;

enum class AttentionMode { standard, ds, avg, lisa };
enum class LisaVariant { dl, sl, plus };

std::string_view to_string(AttentionMode mode);
std::string_view to_string(LisaVariant variant);
AttentionMode parse_attention_mode(std::string_view s);
LisaVariant parse_lisa_variant(std::string_view s);

/// Shape of one LiSA layer.
struct LisaLayerConfig {
  LisaVariant variant = LisaVariant::dl;
  Index ffn_hidden = 256;  ///< alignment FFN width (dl only)
  Index r_q = 20;          ///< low-rank width per query head
  Index r_k = 20;          ///< low-rank width per key head
  bool nf_keep_original = true;

  void validate(const ModelConfig& model) const;
  friend bool operator==(const LisaLayerConfig&, const LisaLayerConfig&) = default;
};

struct LayerSharing {
  AttentionMode mode = AttentionMode::standard;
  std::optional<LisaLayerConfig> lisa;

  friend bool operator==(const LayerSharing&, const LayerSharing&) = default;
};

/// Per-layer attention variant map.
struct SharingConfig {
  std::vector<LayerSharing> layers;
  bool nf = false;
  std::string note;

  static SharingConfig all_standard(Index n_layers);
  /// `indices` (0-based) switched to `mode`; every other layer is standard.
  static SharingConfig with_layers(Index n_layers, const std::vector<Index>& indices, AttentionMode mode,
                                   std::optional<LisaLayerConfig> lisa = std::nullopt);

  Index size() const { return static_cast<Index>(layers.size()); }
  AttentionMode mode(Index layer) const { return layers.at(static_cast<std::size_t>(layer)).mode; }
  std::vector<Index> layers_with(AttentionMode mode) const;

  /// Layer 0 must be standard, a sharing layer needs a predecessor with
  /// scores (not avg), and LiSA layers carry a valid shape.
  void validate(const ModelConfig& model) const;

  friend bool operator==(const SharingConfig&, const SharingConfig&) = default;
};

/// Parses "5,6,17" (optionally 1-based, as in published layer tables) into
/// 0-based indices.
std::vector<Index> parse_layer_list(std::string_view text, bool one_based);
std::string format_layer_list(const std::vector<Index>& indices, bool one_based);

/// Named desk-scale model shapes: tiny-4L, tiny-6L, tiny-12L.
ModelConfig toy_preset(std::string_view name);

}  // namespace lisa

#endif  // LISA_CONFIG_HPP
