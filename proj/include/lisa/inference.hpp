// Copyright 2026 The lisa-lab Authors
// SPDX-License-Identifier: Apache-2.0

// KV-cached generation. Prefill runs the full graph once and fills the
// cache; decode_step then extends every layer by one position with plain
// Eigen kernels. Standard layers cache K and V, lisa layers cache the
// rotated low-rank keys K_LR and V, ds and avg layers cache only V.

#ifndef LISA_INFERENCE_HPP
#define LISA_INFERENCE_HPP

#include <span>
#include <string>
#include <vector>

#include "lisa/cost.hpp"
#include "lisa/model.hpp"

namespace lisa {

struct LayerCache {
  AttentionMode mode = AttentionMode::standard;
  MatrixD k;     ///< capacity x (h_kv d_k), standard layers
  MatrixD k_lr;  ///< capacity x (h_kv r), lisa layers
  MatrixD v;     ///< capacity x (h_kv d_k)
  /// h x length pre-softmax score row of the latest position (empty for avg).
  MatrixD a_row;
};

struct KVCache {
  std::vector<LayerCache> layers;
  Index length = 0;
  Index capacity = 0;
  bool nf = false;

  /// Bytes of cached keys and values at the current length (8 per value).
  std::size_t bytes() const;
};

struct PrefillResult {
  KVCache cache;
  TensorD logits;  ///< l x vocab
};

/// nf = false runs the configured variants; nf = true runs standard
/// attention in every layer (the same computation as the unshared model)
/// while still writing K_LR for lisa layers. Throws ConfigError when nf is
/// requested for a lisa layer configured without nf_keep_original.
PrefillResult prefill(const Model& model, std::span<const int> tokens, bool nf = false);

/// Empty cache sized for model.config.max_len positions.
KVCache empty_cache(const Model& model);

/// Appends `token` at position cache.length and returns its logits.
/// Throws CapacityError once max_len positions are cached.
Eigen::RowVectorXd decode_step(const Model& model, KVCache& cache, int token);

/// Greedy decoding: prefill the prompt, then append n_tokens argmax tokens.
std::vector<int> generate(const Model& model, std::span<const int> prompt, Index n_tokens, bool nf = false);

/// NF prefill pays off once the prompt exceeds the analytic break-even
/// length of the model's lisa layers.
bool nf_auto(const Model& model, Index prompt_length);

struct BenchShape {
  Index input = 0;
  Index output = 0;
};

struct BenchRow {
  std::string config;
  BenchShape shape;
  Index batch = 0;
  double tokens_per_s = 0;
  double latency_s = 0;
  double decode_flops_per_token = 0;
  double kv_bytes = 0;
  std::vector<double> run_latencies;
};

struct BenchOptions {
  double memory_budget_bytes = 64.0 * 1024 * 1024;
  Index max_batch = 8;
  Index runs = 10;
  bool nf = false;
};

/// For every shape, picks the largest batch whose cache fits the budget
/// (capped by max_batch), generates greedily for that many streams and
/// averages latency over `runs`. Throughput is
/// batch (input + output) / latency.
std::vector<BenchRow> bench(const Model& model, const std::string& label, std::span<const BenchShape> grid,
                            const BenchOptions& options);

}  // namespace lisa

#endif  // LISA_INFERENCE_HPP
