// Copyright 2026 The lisa-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "lisa/config.hpp"

#include <algorithm>
#include <charconv>
#include <set>
#include <sstream>

#include "lisa/errors.hpp"

namespace lisa {

void ModelConfig::validate() const {
  if (n_layers < 1) throw ConfigError("n_layers must be at least 1");
  if (h < 1 || h_kv < 1 || d_k < 1) throw ConfigError("head counts and widths must be positive");
  if (h % h_kv != 0) throw ConfigError("h_kv must divide h");
  if (d != h * d_k) throw ConfigError("d must equal h * d_k");
  if (d_k % 2 != 0) throw ConfigError("d_k must be even for rotary embeddings");
  if (d_ff < 1) throw ConfigError("d_ff must be positive");
  if (max_len < 2) throw ConfigError("max_len must be at least 2");
  if (vocab < 2) throw ConfigError("vocab must be at least 2");
  if (!(rope_base > 1.0)) throw ConfigError("rope_base must exceed 1");
  if (!(norm_eps > 0.0)) throw ConfigError("norm_eps must be positive");
}

std::string_view to_string(AttentionMode mode) {
  switch (mode) {
    case AttentionMode::standard: return "standard";
    case AttentionMode::ds: return "ds";
    case AttentionMode::avg: return "avg";
    case AttentionMode::lisa: return "lisa";
  }
  return "?";
}

std::string_view to_string(LisaVariant variant) {
  switch (variant) {
    case LisaVariant::dl: return "dl";
    case LisaVariant::sl: return "sl";
    case LisaVariant::plus: return "plus";
  }
  return "?";
}

AttentionMode parse_attention_mode(std::string_view s) {
  if (s == "standard") return AttentionMode::standard;
  if (s == "ds") return AttentionMode::ds;
  if (s == "avg") return AttentionMode::avg;
  if (s == "lisa") return AttentionMode::lisa;
  throw ConfigError("unknown attention mode '" + std::string(s) + "'");
}

LisaVariant parse_lisa_variant(std::string_view s) {
  if (s == "dl") return LisaVariant::dl;
  if (s == "sl") return LisaVariant::sl;
  if (s == "plus") return LisaVariant::plus;
  throw ConfigError("unknown LiSA variant '" + std::string(s) + "'");
}

void LisaLayerConfig::validate(const ModelConfig& model) const {
  if (r_q < 1 || r_q > model.d_k || r_k < 1 || r_k > model.d_k) {
    throw ConfigError("LiSA ranks must lie in [1, d_k]");
  }
  // Each low-rank score is a dot product between a query slice and a key
  // slice, so the per-head widths have to agree for every variant.
  if (r_q != r_k) throw ConfigError("LiSA requires r_q == r_k");
  if (r_q % 2 != 0) throw ConfigError("LiSA rank must be even (rotary pairs)");
  if (variant == LisaVariant::dl && ffn_hidden < 1) throw ConfigError("dl alignment needs ffn_hidden >= 1");
}

SharingConfig SharingConfig::all_standard(Index n_layers) {
  SharingConfig s;
  s.layers.resize(static_cast<std::size_t>(n_layers));
  return s;
}

SharingConfig SharingConfig::with_layers(Index n_layers, const std::vector<Index>& indices, AttentionMode mode,
                                         std::optional<LisaLayerConfig> lisa) {
  SharingConfig s = all_standard(n_layers);
  for (Index i : indices) {
    if (i < 0 || i >= n_layers) throw ConfigError("layer index " + std::to_string(i) + " out of range");
    auto& layer = s.layers[static_cast<std::size_t>(i)];
    layer.mode = mode;
    if (mode == AttentionMode::lisa) layer.lisa = lisa.value_or(LisaLayerConfig{});
  }
  return s;
}

std::vector<Index> SharingConfig::layers_with(AttentionMode m) const {
  std::vector<Index> out;
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].mode == m) out.push_back(static_cast<Index>(i));
  return out;
}

void SharingConfig::validate(const ModelConfig& model) const {
  if (size() != model.n_layers) {
    throw ConfigError("sharing config covers " + std::to_string(size()) + " layers, model has " +
                      std::to_string(model.n_layers));
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& layer = layers[i];
    const bool shares = layer.mode == AttentionMode::ds || layer.mode == AttentionMode::lisa;
    if (shares && i == 0) throw ConfigError("layer 0 cannot share scores: it has no front layer");
    if (shares && layers[i - 1].mode == AttentionMode::avg) {
      throw ConfigError("layer " + std::to_string(i) + " shares scores with an avg layer, which has none");
    }
    if (layer.mode == AttentionMode::lisa) {
      if (!layer.lisa) throw ConfigError("lisa layer " + std::to_string(i) + " has no LiSA shape");
      layer.lisa->validate(model);
    }
  }
}

std::vector<Index> parse_layer_list(std::string_view text, bool one_based) {
  std::vector<Index> out;
  std::set<Index> seen;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t comma = std::min(text.find(',', pos), text.size());
    std::string_view item = text.substr(pos, comma - pos);
    while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
    while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
    if (item.empty()) {
      if (comma == text.size() && out.empty() && text.find_first_not_of(' ') == std::string_view::npos) break;
      throw ConfigError("empty entry in layer list '" + std::string(text) + "'");
    }
    long long v = 0;
    auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc{} || ptr != item.data() + item.size()) {
      throw ConfigError("bad layer number '" + std::string(item) + "'");
    }
    const Index idx = static_cast<Index>(v) - (one_based ? 1 : 0);
    if (idx < 0) throw ConfigError("layer number below the first layer: " + std::string(item));
    if (!seen.insert(idx).second) throw ConfigError("duplicate layer " + std::string(item));
    out.push_back(idx);
    pos = comma + 1;
  }
  return out;
}

std::string format_layer_list(const std::vector<Index>& indices, bool one_based) {
  std::ostringstream os;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (i) os << ',';
    os << indices[i] + (one_based ? 1 : 0);
  }
  return os.str();
}

ModelConfig toy_preset(std::string_view name) {
  ModelConfig c;
  c.d = 64;
  c.h = 4;
  c.h_kv = 4;
  c.d_k = 16;
  c.d_ff = 172;
  c.vocab = 258;
  c.max_len = 256;
  if (name == "tiny-4L") {
    c.n_layers = 4;
  } else if (name == "tiny-6L") {
    c.n_layers = 6;
  } else if (name == "tiny-12L") {
    c.n_layers = 12;
  } else if (name == "tiny-gqa-6L") {
    c.n_layers = 6;
    c.h_kv = 2;
  } else {
    throw ConfigError("unknown model preset '" + std::string(name) + "'");
  }
  return c;
}

}  // namespace lisa
