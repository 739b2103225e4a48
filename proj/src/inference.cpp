// Copyright 2026 The lisa-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "lisa/inference.hpp"

#include <chrono>
#include <cmath>

namespace lisa {

std::size_t KVCache::bytes() const {
  std::size_t values = 0;
  for (const auto& l : layers) {
    if (l.k.size() > 0) values += static_cast<std::size_t>(length * l.k.cols());
    if (l.k_lr.size() > 0) values += static_cast<std::size_t>(length * l.k_lr.cols());
    values += static_cast<std::size_t>(length * l.v.cols());
  }
  return values * sizeof(double);
}

KVCache empty_cache(const Model& model) {
  model.validate();
  const ModelConfig& c = model.config;
  KVCache cache;
  cache.capacity = c.max_len;
  for (Index i = 0; i < c.n_layers; ++i) {
    LayerCache lc;
    lc.mode = model.sharing.mode(i);
    lc.v = MatrixD::Zero(c.max_len, c.h_kv * c.d_k);
    if (lc.mode == AttentionMode::standard) lc.k = MatrixD::Zero(c.max_len, c.h_kv * c.d_k);
    if (lc.mode == AttentionMode::lisa) lc.k_lr = MatrixD::Zero(c.max_len, c.h_kv * model.lisa_params(i)->config.r_k);
    cache.layers.push_back(std::move(lc));
  }
  return cache;
}

namespace {

MatrixD last_rows(const TensorD& scores, Index h, Index l) {
  MatrixD row(h, l);
  for (Index i = 0; i < h; ++i) row.row(i) = scores.mat().row(i * l + l - 1);
  return row;
}

}  // namespace

PrefillResult prefill(const Model& model, std::span<const int> tokens, bool nf) {
  const ModelConfig& c = model.config;
  KVCache cache = empty_cache(model);
  cache.nf = nf;
  if (nf) {
    for (Index i = 0; i < c.n_layers; ++i) {
      const LisaParams* p = model.lisa_params(i);
      if (p && !p->config.nf_keep_original) {
        throw ConfigError("NF prefill needs the original projections of lisa layer " + std::to_string(i));
      }
    }
  }
  const SharingConfig run = nf ? SharingConfig::all_standard(c.n_layers) : model.sharing;

  Tape tape;
  const ModelVars vars = bind_model(tape, model, false, false);
  const ForwardGraph g = forward_graph(vars, c, run, tokens);
  const Index l = static_cast<Index>(tokens.size());
  for (Index i = 0; i < c.n_layers; ++i) {
    LayerCache& lc = cache.layers[static_cast<std::size_t>(i)];
    const LayerNodes& node = g.layers[static_cast<std::size_t>(i)];
    lc.v.topRows(l) = node.attn.v.mat();
    if (lc.mode == AttentionMode::standard) lc.k.topRows(l) = node.attn.k->mat();
    if (lc.mode == AttentionMode::lisa) {
      if (nf) {
        const LisaVars& lv = *vars.lisa[static_cast<std::size_t>(i)];
        const Index r = model.lisa_params(i)->config.r_k;
        lc.k_lr.topRows(l) = ad::rope(ad::matmul(node.normed, lv.wk_lr), c.h_kv, r, c.rope_base).mat();
      } else {
        lc.k_lr.topRows(l) = node.attn.k_lr->mat();
      }
    }
    if (node.attn.scores) lc.a_row = last_rows(node.attn.scores->value(), c.h, l);
  }
  cache.length = l;
  return PrefillResult{std::move(cache), g.logits.value()};
}

Eigen::RowVectorXd decode_step(const Model& model, KVCache& cache, int token) {
  const ModelConfig& c = model.config;
  if (static_cast<Index>(cache.layers.size()) != c.n_layers) throw ContractError("cache does not match the model");
  if (cache.length >= cache.capacity) {
    throw CapacityError("decode would exceed max_len " + std::to_string(cache.capacity));
  }
  if (token < 0 || token >= c.vocab) throw InputError("token " + std::to_string(token) + " out of range");
  const Index t = cache.length;
  const Index n = t + 1;
  const Index group = c.group_size();
  const ModelWeights& w = model.weights;

  MatrixD x = w.embed.mat().row(token);
  const MatrixD* prev_row = nullptr;
  for (Index li = 0; li < c.n_layers; ++li) {
    const LayerWeights& lw = w.layers[static_cast<std::size_t>(li)];
    LayerCache& lc = cache.layers[static_cast<std::size_t>(li)];
    const MatrixD normed = kernels::rmsnorm<double>(x, lw.attn_norm.mat().row(0), c.norm_eps);
    lc.v.row(t) = normed * lw.wv.mat();

    MatrixD mixed(1, c.h * c.d_k);
    if (lc.mode == AttentionMode::avg) {
      const Eigen::RowVectorXd mean = lc.v.topRows(n).colwise().sum() / static_cast<double>(n);
      for (Index i = 0; i < c.h; ++i) {
        mixed.block(0, i * c.d_k, 1, c.d_k) = mean.segment((i / group) * c.d_k, c.d_k);
      }
      lc.a_row.resize(0, 0);
    } else {
      MatrixD a(c.h, n);
      switch (lc.mode) {
        case AttentionMode::standard: {
          MatrixD q = normed * lw.wq.mat();
          MatrixD k = normed * lw.wk.mat();
          kernels::rope_inplace(q, c.h, c.d_k, c.rope_base, t);
          kernels::rope_inplace(k, c.h_kv, c.d_k, c.rope_base, t);
          lc.k.row(t) = k;
          const double scale = 1.0 / std::sqrt(static_cast<double>(c.d_k));
          for (Index i = 0; i < c.h; ++i) {
            const auto keys = lc.k.block(0, (i / group) * c.d_k, n, c.d_k);
            a.row(i) = (keys * q.block(0, i * c.d_k, 1, c.d_k).transpose()).transpose() * scale;
          }
          break;
        }
        case AttentionMode::ds:
          if (!prev_row) throw ConfigError("ds layer without a preceding score row");
          a = *prev_row;
          break;
        case AttentionMode::lisa: {
          if (!prev_row) throw ConfigError("lisa layer without a preceding score row");
          const LisaParams& p = *model.lisa_params(li);
          const Index r = p.config.r_q;
          MatrixD q = normed * p.wq_lr.mat();
          MatrixD k = normed * p.wk_lr.mat();
          kernels::rope_inplace(q, c.h, r, c.rope_base, t);
          kernels::rope_inplace(k, c.h_kv, r, c.rope_base, t);
          lc.k_lr.row(t) = k;
          const double scale = 1.0 / std::sqrt(static_cast<double>(r));
          MatrixD delta(c.h, n);
          for (Index i = 0; i < c.h; ++i) {
            const auto keys = lc.k_lr.block(0, (i / group) * r, n, r);
            delta.row(i) = (keys * q.block(0, i * r, 1, r).transpose()).transpose() * scale;
          }
          if (p.config.variant == LisaVariant::plus) {
            a = *prev_row + delta;
          } else {
            for (Index s = 0; s < n; ++s) a.col(s) = align_channels(prev_row->col(s), delta.col(s), p);
          }
          break;
        }
        case AttentionMode::avg:
          break;
      }
      lc.a_row = a;
      for (Index i = 0; i < c.h; ++i) {
        Eigen::RowVectorXd prob = a.row(i);
        kernels::softmax_prefix_inplace(prob.leftCols(n), n);
        mixed.block(0, i * c.d_k, 1, c.d_k) = prob * lc.v.block(0, (i / group) * c.d_k, n, c.d_k);
      }
    }
    x += mixed * lw.wo.mat();
    const MatrixD h2 = kernels::rmsnorm<double>(x, lw.ffn_norm.mat().row(0), c.norm_eps);
    x += kernels::gated_ffn<double>(h2, lw.w_gate.mat(), lw.w_up.mat(), lw.w_down.mat());
    prev_row = lc.a_row.size() > 0 ? &lc.a_row : nullptr;
  }
  cache.length = n;
  const MatrixD out = kernels::rmsnorm<double>(x, w.final_norm.mat().row(0), c.norm_eps) * w.lm_head.mat();
  return out.row(0);
}

std::vector<int> generate(const Model& model, std::span<const int> prompt, Index n_tokens, bool nf) {
  if (prompt.empty()) throw InputError("generate needs a non-empty prompt");
  if (n_tokens < 0) throw ConfigError("n_tokens must be non-negative");
  std::vector<int> out(prompt.begin(), prompt.end());
  if (n_tokens == 0) return out;
  if (static_cast<Index>(prompt.size()) + n_tokens > model.config.max_len + 1) {
    throw CapacityError("prompt plus generated tokens exceed max_len");
  }
  PrefillResult pre = prefill(model, prompt, nf);
  Eigen::Index best = 0;
  pre.logits.mat().row(pre.logits.rows() - 1).maxCoeff(&best);
  out.push_back(static_cast<int>(best));
  for (Index i = 1; i < n_tokens; ++i) {
    const Eigen::RowVectorXd logits = decode_step(model, pre.cache, out.back());
    logits.maxCoeff(&best);
    out.push_back(static_cast<int>(best));
  }
  return out;
}

namespace {

std::vector<Index> lisa_ranks(const Model& model) {
  std::vector<Index> ranks;
  for (Index i = 0; i < model.config.n_layers; ++i)
    if (const LisaParams* p = model.lisa_params(i)) ranks.push_back(p->config.r_k);
  return ranks;
}

}  // namespace

bool nf_auto(const Model& model, Index prompt_length) {
  const auto ranks = lisa_ranks(model);
  if (ranks.empty()) return false;
  for (Index i = 0; i < model.config.n_layers; ++i) {
    const LisaParams* p = model.lisa_params(i);
    if (p && !p->config.nf_keep_original) return false;
  }
  const MemoryReport m = memory_report(arch_shape(model.config), prompt_length, 1, ranks);
  return static_cast<double>(prompt_length) > m.break_even_length;
}

std::vector<BenchRow> bench(const Model& model, const std::string& label, std::span<const BenchShape> grid,
                            const BenchOptions& options) {
  model.validate();
  if (options.runs < 1 || options.max_batch < 1) throw ConfigError("bench needs runs >= 1 and max_batch >= 1");
  const ArchShape shape = arch_shape(model.config, label);
  const auto ranks = lisa_ranks(model);
  const auto costs = layer_costs(model.sharing);
  std::vector<BenchRow> rows;
  for (const BenchShape& s : grid) {
    if (s.input < 1 || s.output < 1 || s.input + s.output > model.config.max_len) {
      throw ConfigError("bench shape [" + std::to_string(s.input) + ", " + std::to_string(s.output) +
                        "] does not fit max_len " + std::to_string(model.config.max_len));
    }
    const MemoryReport per_stream = memory_report(shape, s.input + s.output, 1, ranks, sizeof(double));
    const double stream_bytes = per_stream.lisa_kv_bytes + per_stream.decode_score_bytes;
    const Index fit = static_cast<Index>(options.memory_budget_bytes / stream_bytes);
    if (fit < 1) throw ConfigError("memory budget holds no stream for this shape");
    BenchRow row;
    row.config = label;
    row.shape = s;
    row.batch = std::min(fit, options.max_batch);
    row.kv_bytes = stream_bytes * static_cast<double>(row.batch);
    row.decode_flops_per_token =
        flops_report(shape, s.input, s.output, row.batch, costs).decode_per_token(row.batch);
    std::vector<std::vector<int>> prompts;
    for (Index b = 0; b < row.batch; ++b) {
      std::vector<int> p;
      for (Index i = 0; i < s.input; ++i) p.push_back(static_cast<int>(97 + (b * 7 + i * 13) % 26));
      prompts.push_back(std::move(p));
    }
    for (Index run = 0; run < options.runs; ++run) {
      const auto t0 = std::chrono::steady_clock::now();
      for (const auto& p : prompts) generate(model, p, s.output, options.nf);
      row.run_latencies.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    double total = 0;
    for (double x : row.run_latencies) total += x;
    row.latency_s = total / static_cast<double>(options.runs);
    row.tokens_per_s = static_cast<double>(row.batch * (s.input + s.output)) / row.latency_s;
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace lisa
