// Copyright 2026 The lisa-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "lisa/training.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

namespace lisa {

// ---------------------------------------------------------------------------
// Losses

Var huber(Var a, Var b, double delta) { return ad::huber_mean(a, b, delta); }

double huber(const TensorD& a, const TensorD& b, double delta) {
  Tape tape;
  return huber(tape.param(a, false), tape.param(b, false), delta).value().item();
}

Var kd_loss(std::span<const Var> student, std::span<const TensorD> teacher, Index heads, double delta) {
  if (student.empty() || student.size() != teacher.size()) {
    throw ConfigError("kd_loss: " + std::to_string(student.size()) + " student layers vs " +
                      std::to_string(teacher.size()) + " teacher layers");
  }
  Tape& tape = *student.front().tape;
  std::optional<Var> total;
  for (std::size_t n = 0; n < student.size(); ++n) {
    const Var s = student[n];
    if (s.rows() != teacher[n].rows() || s.cols() != teacher[n].cols()) {
      throw ConfigError("kd_loss: student and teacher scores differ in shape at term " + std::to_string(n));
    }
    const Index l = s.cols();
    Var t = tape.param(teacher[n], false);
    Var term = huber(ad::gather_pairs(s, heads, l), ad::gather_pairs(t, heads, l), delta);
    total = total ? ad::add(*total, term) : term;
  }
  return ad::scale(*total, 1.0 / static_cast<double>(student.size()));
}

Var lm_loss(Var logits, std::span<const int> tokens) {
  const Index l = static_cast<Index>(tokens.size());
  if (logits.rows() != l) throw ShapeError("lm_loss: one logits row per token required");
  if (l < 2) throw InputError("lm_loss needs at least two tokens");
  return ad::cross_entropy(ad::slice_rows(logits, 0, l - 1), tokens.subspan(1));
}

double lm_loss(const TensorD& logits, std::span<const int> tokens) {
  Tape tape;
  return lm_loss(tape.param(logits, false), tokens).value().item();
}

Var combined_loss(Var kd, Var lm, double beta) {
  if (beta < 0.0 || beta > 1.0) throw ConfigError("beta must lie in [0, 1]");
  return ad::add(ad::scale(kd, beta), ad::scale(lm, 1.0 - beta));
}

double combined_loss(double kd, double lm, double beta) {
  if (beta < 0.0 || beta > 1.0) throw ConfigError("beta must lie in [0, 1]");
  return beta * kd + (1.0 - beta) * lm;
}

// ---------------------------------------------------------------------------
// Data

namespace {

std::string make_word(std::mt19937_64& rng, int syllables, bool capital) {
  static constexpr std::array<const char*, 14> kOnsets = {"b", "d", "f", "g", "k", "l", "m",
                                                          "n", "p", "r", "s", "t", "v", "z"};
  static constexpr std::array<const char*, 6> kVowels = {"a", "e", "i", "o", "u", "ai"};
  std::string w;
  for (int s = 0; s < syllables; ++s) {
    w += kOnsets[rng() % kOnsets.size()];
    w += kVowels[rng() % kVowels.size()];
  }
  if (rng() % 3 == 0) w += kOnsets[rng() % kOnsets.size()];
  if (capital) w[0] = static_cast<char>(w[0] - 'a' + 'A');
  return w;
}

std::uint64_t fnv(const std::vector<int>& tokens) {
  std::uint64_t h = 1469598103934665603ULL;
  for (int t : tokens) {
    h ^= static_cast<std::uint64_t>(t);
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

std::string synthetic_text(std::size_t n_bytes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::string> names, places, things;
  for (int i = 0; i < 64; ++i) names.push_back(make_word(rng, 2, true));
  for (int i = 0; i < 24; ++i) places.push_back(make_word(rng, 3, true));
  for (int i = 0; i < 32; ++i) things.push_back(make_word(rng, 2, false));
  static constexpr std::array<const char*, 6> kVerbs = {"likes", "sells", "keeps", "paints", "finds", "wants"};
  static constexpr std::array<const char*, 5> kTimes = {"in the morning", "at night", "on market day",
                                                        "after the rain", "every week"};
  auto pick = [&rng](const auto& v) -> const auto& { return v[rng() % v.size()]; };

  std::string out;
  out.reserve(n_bytes + 256);
  while (out.size() < n_bytes) {
    const std::string& a = pick(names);
    const std::string& b = pick(names);
    const std::string& place = pick(places);
    const std::string& thing = pick(things);
    const std::string verb = pick(kVerbs);
    std::ostringstream s;
    s << a << " lives in " << place << ". " << a << " " << verb << " the " << thing << " " << pick(kTimes) << ". ";
    switch (rng() % 3) {
      case 0:
        s << b << " visits " << a << " in " << place << ". ";
        break;
      case 1:
        s << "The " << thing << " of " << a << " is from " << place << ". ";
        break;
      default:
        s << b << " asks: who " << verb << " the " << thing << "? " << a << " does. ";
        break;
    }
    s << "\n";
    out += s.str();
  }
  out.resize(n_bytes);
  return out;
}

Corpus::Corpus(std::string bytes, double heldout_fraction) {
  if (heldout_fraction <= 0.0 || heldout_fraction >= 1.0) throw ConfigError("held-out fraction must be in (0, 1)");
  tokens_ = tokenize(bytes);
  if (tokens_.size() < 4) throw InputError("corpus too small");
  split_ = tokens_.size() - static_cast<std::size_t>(std::ceil(heldout_fraction * static_cast<double>(tokens_.size())));
  hash_ = fnv(tokens_);
}

Corpus Corpus::from_file(const std::string& path, double heldout_fraction) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open corpus " + path);
  std::ostringstream s;
  s << in.rdbuf();
  return Corpus(s.str(), heldout_fraction);
}

std::span<const int> Corpus::tokens(Split split) const {
  const std::span<const int> all(tokens_);
  return split == Split::train ? all.first(split_) : all.subspan(split_);
}

std::vector<std::vector<int>> Corpus::sample(Split split, Index batch, Index seq_len, std::mt19937_64& rng) const {
  const auto src = tokens(split);
  if (seq_len < 2 || static_cast<std::size_t>(seq_len) > src.size()) {
    throw ConfigError("sequence length " + std::to_string(seq_len) + " does not fit the corpus split");
  }
  std::uniform_int_distribution<std::size_t> offset(0, src.size() - static_cast<std::size_t>(seq_len));
  std::vector<std::vector<int>> out;
  for (Index b = 0; b < batch; ++b) {
    const std::size_t o = offset(rng);
    out.emplace_back(src.begin() + static_cast<std::ptrdiff_t>(o),
                     src.begin() + static_cast<std::ptrdiff_t>(o + static_cast<std::size_t>(seq_len)));
  }
  return out;
}

std::vector<std::vector<int>> Corpus::windows(Split split, Index seq_len, Index max_windows) const {
  const auto src = tokens(split);
  if (seq_len < 2) throw ConfigError("window length must be at least 2");
  std::vector<std::vector<int>> out;
  for (std::size_t o = 0; o + static_cast<std::size_t>(seq_len) <= src.size(); o += static_cast<std::size_t>(seq_len)) {
    if (max_windows > 0 && static_cast<Index>(out.size()) >= max_windows) break;
    out.emplace_back(src.begin() + static_cast<std::ptrdiff_t>(o),
                     src.begin() + static_cast<std::ptrdiff_t>(o + static_cast<std::size_t>(seq_len)));
  }
  if (out.empty()) throw ConfigError("corpus split shorter than one window");
  return out;
}

double Corpus::unigram_entropy(Split split) const {
  const auto src = tokens(split);
  std::array<double, 256> counts{};
  for (int t : src) counts[static_cast<std::size_t>(t)] += 1.0;
  double h = 0.0;
  for (double c : counts) {
    if (c > 0) {
      const double p = c / static_cast<double>(src.size());
      h -= p * std::log(p);
    }
  }
  return h;
}

// ---------------------------------------------------------------------------
// Optimization

void TrainConfig::validate() const {
  if (beta < 0.0 || beta > 1.0) throw ConfigError("beta must lie in [0, 1]");
  if (!(delta > 0.0)) throw ConfigError("huber delta must be positive");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (total_steps < 0 || warmup_steps < 0) throw ConfigError("step counts must be non-negative");
  if (warmup_steps > total_steps) throw ConfigError("warmup_steps exceeds total_steps");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (seq_len < 2) throw ConfigError("seq_len must be at least 2");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
}

double learning_rate(const TrainConfig& config, Index step) {
  if (config.warmup_steps > 0 && step < config.warmup_steps) {
    return config.lr * static_cast<double>(step + 1) / static_cast<double>(config.warmup_steps);
  }
  return config.lr;
}

Adam::Adam(double beta1, double beta2, double eps) : b1_(beta1), b2_(beta2), eps_(eps) {}

void Adam::step(std::span<TensorD* const> params, std::span<const MatrixD> grads, double lr, double weight_decay,
                const std::vector<bool>& decay) {
  if (params.size() != grads.size() || params.size() != decay.size()) {
    throw ContractError("Adam::step: parameter and gradient counts differ");
  }
  if (m_.empty()) {
    for (const TensorD* p : params) {
      m_.push_back(MatrixD::Zero(p->rows(), p->cols()));
      v_.push_back(MatrixD::Zero(p->rows(), p->cols()));
    }
  }
  if (m_.size() != params.size()) throw ContractError("Adam::step: parameter set changed");
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    MatrixD& w = params[i]->mat();
    const MatrixD& g = grads[i];
    m_[i] = b1_ * m_[i] + (1.0 - b1_) * g;
    v_[i] = b2_ * v_[i] + (1.0 - b2_) * g.cwiseProduct(g);
    if (decay[i] && weight_decay > 0.0) w *= 1.0 - lr * weight_decay;
    w.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
    if (!params[i]->all_finite()) throw NumericError("Adam produced a non-finite parameter");
  }
}

unsigned worker_threads() {
  if (const char* env = std::getenv("LISA_LAB_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return static_cast<unsigned>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(worker_threads(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

namespace {

struct Trainable {
  std::vector<TensorD*> tensors;
  std::vector<bool> decay;
};

/// Parameters in a fixed order, with the matching tape variables.
Trainable trainable_tensors(Model& model, bool base, bool lisa) {
  Trainable t;
  if (base) {
    for (auto& [name, ptr] : model.weights.named()) {
      t.tensors.push_back(ptr);
      t.decay.push_back(ptr->rank() == 2);
    }
  }
  if (lisa) {
    for (auto& p : model.lisa) {
      if (!p) continue;
      for (auto& [name, ptr] : p->named()) {
        t.tensors.push_back(ptr);
        t.decay.push_back(true);
      }
    }
  }
  return t;
}

std::vector<Var> trainable_vars(const ModelVars& v, bool base, bool lisa) {
  std::vector<Var> out;
  if (base) {
    out.push_back(v.embed);
    for (const auto& l : v.layers) {
      out.insert(out.end(), {l.wq, l.wk, l.wv, l.wo, l.attn_norm, l.w_gate, l.w_up, l.w_down, l.ffn_norm});
    }
    out.push_back(v.final_norm);
    out.push_back(v.lm_head);
  }
  if (lisa) {
    for (const auto& p : v.lisa) {
      if (!p) continue;
      out.push_back(p->wq_lr);
      out.push_back(p->wk_lr);
      for (const auto& opt : {p->align_w1, p->align_w2, p->align_w})
        if (opt) out.push_back(*opt);
    }
  }
  return out;
}

std::vector<Var> frozen_vars(const ModelVars& v) { return trainable_vars(v, true, false); }

struct ItemResult {
  std::vector<MatrixD> grads;
  double lm = 0.0;
  double kd = 0.0;
  double combined = 0.0;
};

ItemResult uptrain_item(const Model& model, const SharingConfig& teacher_sharing, const std::vector<int>& tokens,
                        const TrainConfig& config, const std::vector<Index>& lisa_layers) {
  const ForwardResult teacher = model_forward(model, teacher_sharing, tokens, true);
  std::vector<TensorD> targets;
  for (Index n : lisa_layers) {
    const LayerTrace& lt = teacher.trace->layers[static_cast<std::size_t>(n)];
    targets.push_back(config.kd_target == KdTarget::pre_softmax ? lt.A : lt.P);
  }

  Tape tape;
  const ModelVars vars = bind_model(tape, model, false, true);
  const ForwardGraph g = forward_graph(vars, model.config, model.sharing, tokens);
  std::vector<Var> student;
  for (Index n : lisa_layers) {
    const AttentionResult& a = g.layers[static_cast<std::size_t>(n)].attn;
    student.push_back(config.kd_target == KdTarget::pre_softmax ? *a.scores : a.weights);
  }
  Var kd = kd_loss(student, targets, model.config.h, config.delta);
  Var lm = lm_loss(g.logits, tokens);
  Var loss = combined_loss(kd, lm, config.beta);
  tape.backward(loss);
  for (const Var& f : frozen_vars(vars)) {
    if (tape.has_grad(f)) throw InvariantError("uptrain: a gradient reached a frozen base weight");
  }
  ItemResult r;
  for (const Var& v : trainable_vars(vars, false, true)) r.grads.push_back(tape.grad(v).mat());
  r.lm = lm.value().item();
  r.kd = kd.value().item();
  r.combined = loss.value().item();
  return r;
}

ItemResult pretrain_item(const Model& model, const std::vector<int>& tokens) {
  Tape tape;
  const ModelVars vars = bind_model(tape, model, true, true);
  const ForwardGraph g = forward_graph(vars, model.config, model.sharing, tokens);
  Var lm = lm_loss(g.logits, tokens);
  tape.backward(lm);
  ItemResult r;
  for (const Var& v : trainable_vars(vars, true, true)) r.grads.push_back(tape.grad(v).mat());
  r.lm = lm.value().item();
  r.combined = r.lm;
  return r;
}

TrainLog run_training(Model& model, const Corpus& corpus, const TrainConfig& config, const StepCallback& on_step,
                      bool pretraining) {
  config.validate();
  model.validate();
  const std::vector<Index> lisa_layers = model.sharing.layers_with(AttentionMode::lisa);
  if (!pretraining && lisa_layers.empty()) throw ConfigError("uptrain needs at least one lisa layer");
  const SharingConfig teacher_sharing = SharingConfig::all_standard(model.config.n_layers);

  Trainable params = trainable_tensors(model, pretraining, true);
  Adam adam(config.adam_beta1, config.adam_beta2, config.adam_eps);
  const double decay = pretraining ? config.weight_decay : 0.0;
  std::mt19937_64 rng(config.seed);
  std::vector<std::vector<int>> eval_set;
  if (config.eval_every > 0) eval_set = corpus.windows(Split::heldout, config.seq_len, config.eval_windows);

  TrainLog log;
  auto evaluate = [&](Index step) {
    log.evals.push_back(EvalPoint{step, eval_perplexity(model, eval_set).mean_loss});
  };
  if (config.eval_every > 0) evaluate(0);
  for (Index step = 0; step < config.total_steps; ++step) {
    const auto batch = corpus.sample(Split::train, config.batch_size, config.seq_len, rng);
    std::vector<ItemResult> items(batch.size());
    parallel_for(batch.size(), [&](std::size_t i) {
      items[i] = pretraining ? pretrain_item(model, batch[i])
                             : uptrain_item(model, teacher_sharing, batch[i], config, lisa_layers);
    });
    // Reduce in item order so the result does not depend on scheduling.
    std::vector<MatrixD> grads = std::move(items[0].grads);
    StepLog s{step, items[0].lm, items[0].kd, items[0].combined, learning_rate(config, step)};
    for (std::size_t i = 1; i < items.size(); ++i) {
      for (std::size_t k = 0; k < grads.size(); ++k) grads[k] += items[i].grads[k];
      s.lm += items[i].lm;
      s.kd += items[i].kd;
      s.combined += items[i].combined;
    }
    const double inv = 1.0 / static_cast<double>(items.size());
    for (auto& g : grads) g *= inv;
    s.lm *= inv;
    s.kd *= inv;
    s.combined *= inv;
    adam.step(params.tensors, grads, s.lr, decay, params.decay);
    log.steps.push_back(s);
    if (on_step) on_step(s);
    if (config.eval_every > 0 && ((step + 1) % config.eval_every == 0 || step + 1 == config.total_steps)) {
      evaluate(step + 1);
    }
  }
  return log;
}

}  // namespace

TrainLog uptrain(Model& student, const Corpus& corpus, const TrainConfig& config, const StepCallback& on_step) {
  const std::uint64_t before = student.base_checksum();
  TrainLog log = run_training(student, corpus, config, on_step, false);
  if (student.base_checksum() != before) throw InvariantError("uptrain modified the frozen base weights");
  return log;
}

TrainLog pretrain(Model& model, const Corpus& corpus, const TrainConfig& config, const StepCallback& on_step) {
  return run_training(model, corpus, config, on_step, true);
}

PerplexityResult eval_perplexity(const Model& model, const SharingConfig& sharing,
                                 std::span<const std::vector<int>> windows) {
  if (windows.empty()) throw InputError("eval_perplexity: no windows");
  std::vector<double> nll(windows.size());
  std::vector<Index> count(windows.size());
  parallel_for(windows.size(), [&](std::size_t i) {
    const auto& w = windows[i];
    const ForwardResult r = model_forward(model, sharing, w);
    count[i] = static_cast<Index>(w.size()) - 1;
    nll[i] = lm_loss(r.logits, w) * static_cast<double>(count[i]);
  });
  PerplexityResult out;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    out.total_nll += nll[i];
    out.predictions += count[i];
  }
  out.mean_loss = out.total_nll / static_cast<double>(out.predictions);
  out.perplexity = std::exp(out.mean_loss);
  return out;
}

PerplexityResult eval_perplexity(const Model& model, std::span<const std::vector<int>> windows) {
  return eval_perplexity(model, model.sharing, windows);
}

}  // namespace lisa
