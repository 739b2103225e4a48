// Copyright 2026 The lisa-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "lisa/cost.hpp"

namespace lisa {

void ArchShape::validate() const {
  if (n_layers < 1 || d < 1 || h < 1 || h_kv < 1 || d_k < 1 || d_ff < 1) {
    throw ConfigError("cost shape " + name + " has a non-positive dimension");
  }
  if (h % h_kv != 0) throw ConfigError("cost shape " + name + ": h_kv must divide h");
  if (ffn_matrices != 2 && ffn_matrices != 3) throw ConfigError("ffn_matrices must be 2 or 3");
}

ArchShape cost_preset(const std::string& name) {
  if (name == "opt-175b") return {name, 96, 12288, 96, 96, 128, 49152, 2, 50272};
  if (name == "llama-65b") return {name, 80, 8192, 64, 64, 128, 22016, 3, 32000};
  if (name == "llama3-70b") return {name, 80, 8192, 64, 8, 128, 28672, 3, 128256};
  if (name == "llama2-7b") return {name, 32, 4096, 32, 32, 128, 11008, 3, 32000};
  if (name == "llama3-8b") return {name, 32, 4096, 32, 8, 128, 14336, 3, 128256};
  throw ConfigError("unknown cost preset '" + name + "'");
}

std::vector<std::string> cost_preset_names() {
  return {"opt-175b", "llama-65b", "llama3-70b", "llama2-7b", "llama3-8b"};
}

ArchShape arch_shape(const ModelConfig& c, const std::string& name) {
  return {name, c.n_layers, c.d, c.h, c.h_kv, c.d_k, c.d_ff, 3, c.vocab};
}

std::vector<LayerCost> layer_costs(const SharingConfig& sharing) {
  std::vector<LayerCost> out;
  for (const auto& l : sharing.layers) {
    LayerCost c{l.mode, 0, LisaVariant::dl, 0};
    if (l.mode == AttentionMode::lisa && l.lisa) {
      c.rank = l.lisa->r_q;
      c.variant = l.lisa->variant;
      c.ffn_hidden = l.lisa->ffn_hidden;
    }
    out.push_back(c);
  }
  return out;
}

MemoryReport memory_report(const ArchShape& shape, Index length, Index batch, Index n_lisa, Index rank,
                           Index dtype_bytes) {
  if (n_lisa < 0 || n_lisa > shape.n_layers) throw ConfigError("n_lisa must lie in [0, n_layers]");
  return memory_report(shape, length, batch, std::vector<Index>(static_cast<std::size_t>(n_lisa), rank), dtype_bytes);
}

MemoryReport memory_report(const ArchShape& shape, Index length, Index batch, const std::vector<Index>& lisa_ranks,
                           Index dtype_bytes) {
  shape.validate();
  if (length < 1 || batch < 1 || dtype_bytes < 1) throw ConfigError("length, batch and dtype bytes must be positive");
  if (static_cast<Index>(lisa_ranks.size()) > shape.n_layers) throw ConfigError("more lisa layers than layers");
  const double l = static_cast<double>(length), b = static_cast<double>(batch), e = static_cast<double>(dtype_bytes);
  MemoryReport r;
  r.length = length;
  r.batch = batch;
  r.dtype_bytes = dtype_bytes;
  r.kv_bytes = 2.0 * static_cast<double>(shape.n_layers * shape.h_kv * shape.d_k) * l * b * e;
  double saved_width = 0;  // sum over lisa layers of h_kv (d_k - r)
  for (Index rank : lisa_ranks) {
    if (rank < 1 || rank > shape.d_k) throw ConfigError("rank " + std::to_string(rank) + " outside [1, d_k]");
    saved_width += static_cast<double>(shape.h_kv * (shape.d_k - rank));
  }
  r.k_savings_bytes = saved_width * l * e * b;
  if (!lisa_ranks.empty()) {
    r.prefill_score_bytes = static_cast<double>(shape.h) * l * l * e * b;
    r.decode_score_bytes = static_cast<double>(shape.h) * l * e * b;
  }
  r.prefill_net_bytes = r.k_savings_bytes - r.prefill_score_bytes;
  r.decode_net_bytes = r.k_savings_bytes - r.decode_score_bytes;
  r.lisa_kv_bytes = r.kv_bytes - r.k_savings_bytes;
  r.break_even_length = lisa_ranks.empty() ? 0.0 : saved_width / static_cast<double>(shape.h);
  return r;
}

double prefill_net_closed_form(Index h, Index length, Index n_lisa, Index d_k, Index rank, Index dtype_bytes) {
  return static_cast<double>(h * length * (n_lisa * (d_k - rank) - length) * dtype_bytes);
}

double decode_net_closed_form(Index h, Index length, Index n_lisa, Index d_k, Index rank, Index dtype_bytes) {
  return static_cast<double>(h * length * (n_lisa * (d_k - rank) - 1) * dtype_bytes);
}

namespace {

struct StageFlops {
  double attention = 0;
  double ffn = 0;
};

// One layer, one sequence: `tokens` new positions attending over `context`
// positions each (prefill: tokens = context = l).
StageFlops layer_flops(const ArchShape& s, const LayerCost& c, double tokens, double context) {
  const double d = static_cast<double>(s.d), h = static_cast<double>(s.h), hkv = static_cast<double>(s.h_kv),
               dk = static_cast<double>(s.d_k);
  double q_dim = h * dk, k_dim = hkv * dk, score_width = dk;
  const double v_dim = hkv * dk, o_dim = h * dk;
  double align = 0;
  switch (c.mode) {
    case AttentionMode::standard:
      break;
    case AttentionMode::ds:
    case AttentionMode::avg:
      q_dim = k_dim = score_width = 0;
      break;
    case AttentionMode::lisa: {
      const double r = static_cast<double>(c.rank), m = static_cast<double>(c.ffn_hidden);
      q_dim = h * r;
      k_dim = hkv * r;
      score_width = r;
      if (c.variant == LisaVariant::dl) align = 2.0 * tokens * context * (2.0 * h * m + m * h);
      if (c.variant == LisaVariant::sl) align = 2.0 * tokens * context * (2.0 * h * h);
      break;
    }
  }
  StageFlops f;
  f.attention = 2.0 * tokens * d * (q_dim + k_dim + v_dim + o_dim) + 2.0 * tokens * context * h * score_width +
                align;
  // avg replaces P V by a running mean; count it as an O(l d) update.
  f.attention += c.mode == AttentionMode::avg ? 2.0 * tokens * h * dk : 2.0 * tokens * context * h * dk;
  f.ffn = 2.0 * tokens * d * static_cast<double>(s.ffn_matrices * s.d_ff);
  return f;
}

}  // namespace

FlopsReport flops_report(const ArchShape& shape, Index l_in, Index l_out, Index batch,
                         const std::vector<LayerCost>& layers, DecodeContext context) {
  shape.validate();
  if (l_in < 1 || l_out < 0 || batch < 1) throw ConfigError("flops_report: need l_in >= 1, l_out >= 0, batch >= 1");
  if (!layers.empty() && static_cast<Index>(layers.size()) != shape.n_layers) {
    throw ConfigError("flops_report: one LayerCost per layer required");
  }
  FlopsReport r;
  r.decode_context = context == DecodeContext::input_plus_output ? l_in + l_out : l_in;
  const double b = static_cast<double>(batch);
  for (Index i = 0; i < shape.n_layers; ++i) {
    const LayerCost c = layers.empty() ? LayerCost{} : layers[static_cast<std::size_t>(i)];
    const StageFlops pre = layer_flops(shape, c, static_cast<double>(l_in), static_cast<double>(l_in));
    const StageFlops dec = layer_flops(shape, c, 1.0, static_cast<double>(r.decode_context));
    r.prefill_attention += pre.attention * b;
    r.prefill_ffn += pre.ffn * b;
    r.decode_attention += dec.attention * b;
    r.decode_ffn += dec.ffn * b;
  }
  return r;
}

}  // namespace lisa
