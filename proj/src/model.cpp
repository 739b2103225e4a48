// Copyright 2026 The lisa-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "lisa/model.hpp"

#include <cmath>
#include <random>

namespace lisa {

namespace {

TensorD gaussian(Index rows, Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  MatrixD m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return TensorD::from_matrix(std::move(m));
}

TensorD ones(Index n) {
  TensorD t(Shape{n});
  t.mat().setOnes();
  return t;
}

void expect(const TensorD& t, const Shape& shape, const std::string& name) {
  if (t.shape() != shape) {
    throw ConfigError("weight " + name + " has shape " + shape_str(t.shape()) + ", expected " + shape_str(shape));
  }
}

}  // namespace

std::vector<std::pair<std::string, TensorD*>> ModelWeights::named() {
  std::vector<std::pair<std::string, TensorD*>> out{{"embed", &embed}};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    auto& l = layers[i];
    out.insert(out.end(), {{p + "wq", &l.wq},
                           {p + "wk", &l.wk},
                           {p + "wv", &l.wv},
                           {p + "wo", &l.wo},
                           {p + "attn_norm", &l.attn_norm},
                           {p + "w_gate", &l.w_gate},
                           {p + "w_up", &l.w_up},
                           {p + "w_down", &l.w_down},
                           {p + "ffn_norm", &l.ffn_norm}});
  }
  out.emplace_back("final_norm", &final_norm);
  out.emplace_back("lm_head", &lm_head);
  return out;
}

std::vector<std::pair<std::string, const TensorD*>> ModelWeights::named() const {
  std::vector<std::pair<std::string, const TensorD*>> out;
  for (auto& [name, ptr] : const_cast<ModelWeights*>(this)->named()) out.emplace_back(name, ptr);
  return out;
}

void ModelWeights::validate(const ModelConfig& c) const {
  if (static_cast<Index>(layers.size()) != c.n_layers) throw ConfigError("layer count mismatch in weights");
  expect(embed, {c.vocab, c.d}, "embed");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    expect(l.wq, {c.d, c.h * c.d_k}, p + "wq");
    expect(l.wk, {c.d, c.h_kv * c.d_k}, p + "wk");
    expect(l.wv, {c.d, c.h_kv * c.d_k}, p + "wv");
    expect(l.wo, {c.h * c.d_k, c.d}, p + "wo");
    expect(l.attn_norm, {c.d}, p + "attn_norm");
    expect(l.w_gate, {c.d, c.d_ff}, p + "w_gate");
    expect(l.w_up, {c.d, c.d_ff}, p + "w_up");
    expect(l.w_down, {c.d_ff, c.d}, p + "w_down");
    expect(l.ffn_norm, {c.d}, p + "ffn_norm");
  }
  expect(final_norm, {c.d}, "final_norm");
  expect(lm_head, {c.d, c.vocab}, "lm_head");
}

ModelWeights init_weights(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  std::mt19937_64 rng(seed);
  const double std = 0.02;
  const double out_std = std / std::sqrt(2.0 * static_cast<double>(c.n_layers));
  ModelWeights w;
  w.embed = gaussian(c.vocab, c.d, std, rng);
  for (Index i = 0; i < c.n_layers; ++i) {
    LayerWeights l;
    l.wq = gaussian(c.d, c.h * c.d_k, std, rng);
    l.wk = gaussian(c.d, c.h_kv * c.d_k, std, rng);
    l.wv = gaussian(c.d, c.h_kv * c.d_k, std, rng);
    l.wo = gaussian(c.h * c.d_k, c.d, out_std, rng);
    l.attn_norm = ones(c.d);
    l.w_gate = gaussian(c.d, c.d_ff, std, rng);
    l.w_up = gaussian(c.d, c.d_ff, std, rng);
    l.w_down = gaussian(c.d_ff, c.d, out_std, rng);
    l.ffn_norm = ones(c.d);
    w.layers.push_back(std::move(l));
  }
  w.final_norm = ones(c.d);
  w.lm_head = gaussian(c.d, c.vocab, std, rng);
  return w;
}

Model Model::create(const ModelConfig& config, std::uint64_t seed) {
  Model m;
  m.config = config;
  m.weights = init_weights(config, seed);
  m.sharing = SharingConfig::all_standard(config.n_layers);
  m.lisa.resize(static_cast<std::size_t>(config.n_layers));
  return m;
}

void Model::install_sharing(const SharingConfig& s, std::uint64_t seed) {
  s.validate(config);
  std::mt19937_64 rng(seed);
  lisa.resize(static_cast<std::size_t>(config.n_layers));
  for (std::size_t i = 0; i < s.layers.size(); ++i) {
    const auto& layer = s.layers[i];
    if (layer.mode != AttentionMode::lisa) {
      lisa[i].reset();
      continue;
    }
    if (lisa[i] && lisa[i]->config == *layer.lisa) continue;
    lisa[i] = init_lisa_params(config, *layer.lisa, rng);
  }
  sharing = s;
}

const LisaParams* Model::lisa_params(Index layer) const {
  const auto& p = lisa.at(static_cast<std::size_t>(layer));
  return p ? &*p : nullptr;
}

void Model::validate() const {
  config.validate();
  weights.validate(config);
  sharing.validate(config);
  if (static_cast<Index>(lisa.size()) != config.n_layers) throw ConfigError("LiSA parameter slots != n_layers");
  for (Index i = 0; i < config.n_layers; ++i) {
    const bool wants = sharing.mode(i) == AttentionMode::lisa;
    const LisaParams* p = lisa_params(i);
    if (wants && !p) throw ConfigError("lisa layer " + std::to_string(i) + " has no parameters");
    if (p) {
      if (!wants) throw ConfigError("layer " + std::to_string(i) + " carries LiSA parameters but is not lisa");
      if (!(p->config == *sharing.layers[static_cast<std::size_t>(i)].lisa)) {
        throw ConfigError("layer " + std::to_string(i) + " LiSA parameters do not match its sharing entry");
      }
      p->validate(config);
    }
  }
}

std::uint64_t Model::base_checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& [name, t] : weights.named()) h = checksum(*t, h);
  return h;
}

ModelVars bind_model(Tape& tape, const Model& model, bool base_trainable, bool lisa_trainable) {
  const auto& w = model.weights;
  ModelVars v;
  v.embed = tape.param(w.embed, base_trainable);
  for (const auto& l : w.layers) {
    v.layers.push_back(LayerVars{tape.param(l.wq, base_trainable), tape.param(l.wk, base_trainable),
                                 tape.param(l.wv, base_trainable), tape.param(l.wo, base_trainable),
                                 tape.param(l.attn_norm, base_trainable), tape.param(l.w_gate, base_trainable),
                                 tape.param(l.w_up, base_trainable), tape.param(l.w_down, base_trainable),
                                 tape.param(l.ffn_norm, base_trainable)});
  }
  v.final_norm = tape.param(w.final_norm, base_trainable);
  v.lm_head = tape.param(w.lm_head, base_trainable);
  for (const auto& p : model.lisa) {
    if (p) {
      v.lisa.emplace_back(bind_lisa(tape, *p, lisa_trainable));
    } else {
      v.lisa.emplace_back(std::nullopt);
    }
  }
  return v;
}

AttentionResult attention_forward(Var normed, const LayerVars& w, const LayerSharing& sharing, const LisaVars* lisa,
                                  std::optional<Var> prev_scores, const ModelConfig& c) {
  Tape& tape = *normed.tape;
  const Index l = normed.rows();
  AttentionResult r{normed, std::nullopt, normed, std::nullopt, std::nullopt, ad::matmul(normed, w.wv),
                    normed, std::nullopt, std::nullopt};
  switch (sharing.mode) {
    case AttentionMode::standard: {
      r.q = ad::rope(ad::matmul(normed, w.wq), c.h, c.d_k, c.rope_base);
      r.k = ad::rope(ad::matmul(normed, w.wk), c.h_kv, c.d_k, c.rope_base);
      r.scores = multihead_scores(*r.q, *r.k, c.h, c.h_kv, c.d_k, 1.0 / std::sqrt(static_cast<double>(c.d_k)));
      break;
    }
    case AttentionMode::ds:
      r.scores = ds_scores(prev_scores);
      break;
    case AttentionMode::lisa: {
      if (!lisa || !sharing.lisa) throw ConfigError("lisa layer without LiSA parameters");
      if (!prev_scores) throw ConfigError("lisa layer needs the previous layer's scores");
      DeltaTerms d = compute_delta(normed, *lisa, *sharing.lisa, c);
      r.q_lr = d.q_lr;
      r.k_lr = d.k_lr;
      r.scores = align_and_integrate(*prev_scores, d.delta, *lisa, *sharing.lisa, c.h);
      break;
    }
    case AttentionMode::avg:
      break;
  }
  if (sharing.mode == AttentionMode::avg) {
    r.weights = tape.constant(uniform_causal_weights<double>(c.h, l));
    // Running prefix mean of V, evaluated directly rather than as P V.
    Var means = ad::prefix_mean(r.v);
    std::vector<Var> heads;
    for (Index i = 0; i < c.h; ++i) heads.push_back(ad::slice_cols(means, kv_head_of(i, c.h, c.h_kv) * c.d_k, c.d_k));
    r.mixed = c.h == c.h_kv ? means : ad::concat_cols<double>(heads);
  } else {
    r.weights = ad::softmax_causal(*r.scores, l);
    r.mixed = multihead_mix(r.weights, r.v, c.h, c.h_kv, c.d_k);
  }
  r.out = ad::matmul(r.mixed, w.wo);
  return r;
}

ForwardGraph forward_graph(const ModelVars& vars, const ModelConfig& c, const SharingConfig& sharing,
                           std::span<const int> tokens) {
  if (tokens.empty()) throw InputError("forward needs at least one token");
  if (static_cast<Index>(tokens.size()) > c.max_len) {
    throw InputError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_len " +
                     std::to_string(c.max_len));
  }
  sharing.validate(c);
  const double eps = c.norm_eps;
  ForwardGraph g{vars.embed, {}};
  Var x = ad::embedding(vars.embed, tokens);
  std::optional<Var> prev_scores;
  for (Index i = 0; i < c.n_layers; ++i) {
    const auto& w = vars.layers[static_cast<std::size_t>(i)];
    const auto& s = sharing.layers[static_cast<std::size_t>(i)];
    const auto& lisa_slot = vars.lisa.size() > static_cast<std::size_t>(i) ? vars.lisa[static_cast<std::size_t>(i)]
                                                                           : std::optional<LisaVars>{};
    Var normed = ad::rmsnorm(x, w.attn_norm, eps);
    AttentionResult attn = attention_forward(normed, w, s, lisa_slot ? &*lisa_slot : nullptr, prev_scores, c);
    x = ad::add(x, attn.out);
    Var h2 = ad::rmsnorm(x, w.ffn_norm, eps);
    Var hidden = ad::hadamard(ad::silu(ad::matmul(h2, w.w_gate)), ad::matmul(h2, w.w_up));
    x = ad::add(x, ad::matmul(hidden, w.w_down));
    prev_scores = attn.scores;
    g.layers.push_back(LayerNodes{normed, attn, x});
  }
  g.logits = ad::matmul(ad::rmsnorm(x, vars.final_norm, eps), vars.lm_head);
  return g;
}

ForwardResult model_forward(const Model& model, std::span<const int> tokens, bool trace) {
  return model_forward(model, model.sharing, tokens, trace);
}

ForwardResult model_forward(const Model& model, const SharingConfig& sharing, std::span<const int> tokens,
                            bool trace) {
  Tape tape;
  const ModelVars vars = bind_model(tape, model, false, false);
  const ForwardGraph g = forward_graph(vars, model.config, sharing, tokens);
  ForwardResult out{g.logits.value(), std::nullopt};
  if (trace) {
    AttentionTrace t;
    t.length = static_cast<Index>(tokens.size());
    for (const auto& layer : g.layers) {
      const auto& a = layer.attn;
      LayerTrace lt;
      if (a.scores) lt.A = a.scores->value();
      lt.P = a.weights.value();
      if (a.q) lt.Q = a.q->value();
      if (a.k) lt.K = a.k->value();
      lt.V = a.v.value();
      lt.PV = a.mixed.value();
      lt.attn_out = a.out.value();
      t.layers.push_back(std::move(lt));
    }
    out.trace = std::move(t);
  }
  return out;
}

std::vector<int> tokenize(std::string_view text) {
  std::vector<int> out;
  out.reserve(text.size());
  for (unsigned char ch : text) out.push_back(ch);
  return out;
}

std::string detokenize(std::span<const int> tokens) {
  std::string s;
  for (int t : tokens)
    if (t >= 0 && t < 256) s.push_back(static_cast<char>(t));
  return s;
}

}  // namespace lisa
