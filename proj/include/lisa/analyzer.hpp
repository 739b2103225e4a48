// Copyright 2026 The lisa-lab Authors
// SPDX-License-Identifier: Apache-2.0

// Inter-layer redundancy analyses over attention traces: JS divergence
// between layers and between matched heads, sub-module cosine similarity,
// and single-layer deviation sweeps.

#ifndef LISA_ANALYZER_HPP
#define LISA_ANALYZER_HPP

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lisa/model.hpp"
#include "lisa/training.hpp"

namespace lisa {

enum class LogBase { two, e };

std::string to_string(LogBase base);
LogBase parse_log_base(std::string_view text);

/// Jensen-Shannon divergence. Both inputs are normalized to sum 1 first;
/// a sum off by more than 1e-3 from 1, a negative entry, or a length
/// mismatch throws InputError.
double js_divergence(std::span<const double> p, std::span<const double> q, LogBase base = LogBase::e);

/// l x l head-averaged attention weights of a {h, l, l} tensor.
MatrixD head_mean(const TensorD& weights);

/// Mean row-wise JS between two l x l causal weight matrices, over query
/// rows t >= 1, each compared on its prefix 0..t.
double rowwise_js(const MatrixD& a, const MatrixD& b, LogBase base);

/// Entry (a, b): mean over samples of rowwise_js between the head-averaged
/// weights of layers a and b.
MatrixD pairwise_layer_js(std::span<const AttentionTrace> samples, LogBase base = LogBase::e);

enum class MatchStrategy { direct, random, most_similar };

std::string to_string(MatchStrategy strategy);
MatchStrategy parse_match_strategy(std::string_view text);

/// Entry (i, j): mean over samples of rowwise_js between head i of weights
/// `a` and head j of weights `b` ({h, l, l} each, one per sample).
MatrixD head_js_matrix(std::span<const TensorD> a, std::span<const TensorD> b, LogBase base = LogBase::e);

/// Mean JS over matched head pairs. direct pairs head i with head i,
/// random uses a seeded permutation, most_similar pairs every head j of b
/// with its argmin over the heads of a.
double head_matched_js(const MatrixD& js, MatchStrategy strategy, std::uint64_t seed);
double head_matched_js(std::span<const TensorD> a, std::span<const TensorD> b, MatchStrategy strategy,
                       std::uint64_t seed, LogBase base = LogBase::e);

struct HeadMatchRow {
  Index layer_a = 0;
  Index layer_b = 0;
  double direct = 0.0;
  double random = 0.0;
  double most_similar = 0.0;
};

/// All three strategies for every adjacent layer pair (a, a + 1) whose
/// weights both exist.
std::vector<HeadMatchRow> adjacent_head_matching(std::span<const AttentionTrace> samples, std::uint64_t seed,
                                                 LogBase base = LogBase::e);

struct CosineCurve {
  std::string submodule;       ///< Q, K, V, A, P, PV or O
  std::vector<double> values;  ///< entry n compares layers n and n + 1; NaN if unavailable
  std::vector<Index> skipped;  ///< zero-norm tokens skipped per pair
};

/// Mean per-token cosine similarity between adjacent layers for each
/// sub-module. A and P tokens are the concatenation over heads of the
/// unmasked prefix.
std::vector<CosineCurve> submodule_cosine(std::span<const AttentionTrace> samples);

struct SimilarityReport {
  MatrixD layer_js;
  std::vector<HeadMatchRow> matching;
  std::vector<CosineCurve> cosine;
  Index samples = 0;
  LogBase base = LogBase::e;
};

SimilarityReport analyze(const Model& model, std::span<const std::vector<int>> windows, std::uint64_t seed,
                         LogBase base = LogBase::e);

struct DeviationResult {
  AttentionMode pattern = AttentionMode::ds;
  double baseline = 0.0;
  std::vector<Index> layers;      ///< targeted layer indices (0-based)
  std::vector<double> perplexity;  ///< one per targeted layer
};

/// Replaces the scores of one layer at a time (ds: the previous layer's A;
/// avg: uniform weights) and measures held-out perplexity. Without
/// `targets` every layer from 1 up is swept.
DeviationResult deviation_sweep(const Model& model, std::span<const std::vector<int>> windows,
                                AttentionMode pattern, std::optional<std::vector<Index>> targets = std::nullopt);

}  // namespace lisa

#endif  // LISA_ANALYZER_HPP
