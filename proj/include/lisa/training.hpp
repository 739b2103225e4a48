// Copyright 2026 The lisa-lab Authors
// SPDX-License-Identifier: Apache-2.0

// Losses, the byte corpus, Adam, and the two training loops: uptraining
// LiSA parameters into a frozen model (attention distillation plus language
// modeling) and joint pretraining from scratch.

#ifndef LISA_TRAINING_HPP
#define LISA_TRAINING_HPP

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "lisa/model.hpp"

namespace lisa {

// ---------------------------------------------------------------------------
// Losses

/// Mean Huber penalty over elements: 0.5 d^2 for |d| <= delta, otherwise
/// delta (|d| - 0.5 delta).
Var huber(Var a, Var b, double delta);
double huber(const TensorD& a, const TensorD& b, double delta);

enum class KdTarget { pre_softmax, post_softmax };

/// Mean over the supervised layers of the Huber loss between student and
/// teacher scores, restricted to unmasked (query, key) pairs. The teacher
/// tensors enter as constants.
Var kd_loss(std::span<const Var> student, std::span<const TensorD> teacher, Index heads, double delta);

/// Next-token cross entropy: logits row t predicts tokens[t + 1].
Var lm_loss(Var logits, std::span<const int> tokens);
double lm_loss(const TensorD& logits, std::span<const int> tokens);

/// beta * kd + (1 - beta) * lm.
Var combined_loss(Var kd, Var lm, double beta);
double combined_loss(double kd, double lm, double beta);

// ---------------------------------------------------------------------------
// Data

/// Deterministic synthetic English-like text. Records repeat a small pool of
/// invented names and facts so that copying from context lowers the loss.
std::string synthetic_text(std::size_t n_bytes, std::uint64_t seed);

enum class Split { train, heldout };

/// Byte stream split into a training prefix and a held-out suffix.
class Corpus {
 public:
  explicit Corpus(std::string bytes, double heldout_fraction = 0.1);
  static Corpus from_file(const std::string& path, double heldout_fraction = 0.1);

  std::span<const int> tokens(Split split) const;
  std::size_t size() const { return tokens_.size(); }
  std::uint64_t hash() const { return hash_; }

  /// `batch` windows of `seq_len` tokens at uniformly drawn offsets.
  std::vector<std::vector<int>> sample(Split split, Index batch, Index seq_len, std::mt19937_64& rng) const;

  /// Consecutive non-overlapping windows from the start of the split;
  /// `max_windows` = 0 takes all of them.
  std::vector<std::vector<int>> windows(Split split, Index seq_len, Index max_windows = 0) const;

  /// Entropy in nats of the byte unigram distribution of a split.
  double unigram_entropy(Split split) const;

 private:
  std::vector<int> tokens_;
  std::size_t split_;
  std::uint64_t hash_;
};

// ---------------------------------------------------------------------------
// Optimization

enum class TrainMode { uptrain, pretrain };

struct TrainConfig {
  TrainMode mode = TrainMode::uptrain;
  double beta = 0.25;
  double delta = 1.0;
  double lr = 3e-4;
  Index warmup_steps = 150;
  Index total_steps = 1000;
  Index batch_size = 16;
  Index seq_len = 256;
  double weight_decay = 0.1;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  KdTarget kd_target = KdTarget::pre_softmax;
  /// Evaluate held-out loss every this many steps (0 disables).
  Index eval_every = 0;
  Index eval_windows = 16;

  void validate() const;
};

/// Learning rate at 0-based `step`: linear warmup to lr, then constant.
double learning_rate(const TrainConfig& config, Index step);

/// Adam with optional decoupled weight decay, over caller-owned tensors.
class Adam {
 public:
  Adam(double beta1, double beta2, double eps);
  /// Applies one update; `decay[i]` scales weight decay for params[i].
  void step(std::span<TensorD* const> params, std::span<const MatrixD> grads, double lr, double weight_decay,
            const std::vector<bool>& decay);
  Index steps() const { return t_; }

 private:
  double b1_, b2_, eps_;
  Index t_ = 0;
  std::vector<MatrixD> m_, v_;
};

struct StepLog {
  Index step = 0;
  double lm = 0.0;
  double kd = 0.0;
  double combined = 0.0;
  double lr = 0.0;
};

struct EvalPoint {
  Index step = 0;
  double loss = 0.0;
};

struct TrainLog {
  std::vector<StepLog> steps;
  std::vector<EvalPoint> evals;
};

/// Called after every optimizer step; used for progress output.
using StepCallback = std::function<void(const StepLog&)>;

/// Trains only the LiSA parameters of `student` (whose sharing config must
/// contain at least one lisa layer) against the same model run with
/// standard attention everywhere. Base weights stay bit-identical; a
/// gradient reaching any of them raises InvariantError.
TrainLog uptrain(Model& student, const Corpus& corpus, const TrainConfig& config, const StepCallback& on_step = {});

/// Trains every parameter jointly with the LM loss only.
TrainLog pretrain(Model& model, const Corpus& corpus, const TrainConfig& config, const StepCallback& on_step = {});

struct PerplexityResult {
  double perplexity = 0.0;
  double mean_loss = 0.0;
  double total_nll = 0.0;
  Index predictions = 0;
};

/// exp of the mean next-token loss over `windows`.
PerplexityResult eval_perplexity(const Model& model, const SharingConfig& sharing,
                                 std::span<const std::vector<int>> windows);
PerplexityResult eval_perplexity(const Model& model, std::span<const std::vector<int>> windows);

/// Worker count from LISA_LAB_THREADS, else hardware concurrency (min 1).
unsigned worker_threads();

/// Runs fn(i) for i in [0, n) on up to worker_threads() threads.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace lisa

#endif  // LISA_TRAINING_HPP
