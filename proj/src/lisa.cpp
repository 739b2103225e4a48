// Copyright 2026 The lisa-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "lisa/lisa.hpp"

#include <cmath>

namespace lisa {

namespace {

void expect_shape(const TensorD& t, Index rows, Index cols, const char* name) {
  if (t.rank() != 2 || t.rows() != rows || t.cols() != cols) {
    throw ConfigError(std::string("LiSA tensor ") + name + " has shape " + shape_str(t.shape()) +
                      ", expected [" + std::to_string(rows) + "x" + std::to_string(cols) + "]");
  }
}

TensorD normal(Index rows, Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  MatrixD m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return TensorD::from_matrix(std::move(m));
}

}  // namespace

std::vector<std::pair<std::string, TensorD*>> LisaParams::named() {
  std::vector<std::pair<std::string, TensorD*>> out{{"wq_lr", &wq_lr}, {"wk_lr", &wk_lr}};
  if (config.variant == LisaVariant::dl) {
    out.emplace_back("align_w1", &align_w1);
    out.emplace_back("align_w2", &align_w2);
  } else if (config.variant == LisaVariant::sl) {
    out.emplace_back("align_w", &align_w);
  }
  return out;
}

std::vector<std::pair<std::string, const TensorD*>> LisaParams::named() const {
  std::vector<std::pair<std::string, const TensorD*>> out;
  for (auto& [name, ptr] : const_cast<LisaParams*>(this)->named()) out.emplace_back(name, ptr);
  return out;
}

void LisaParams::validate(const ModelConfig& model) const {
  config.validate(model);
  expect_shape(wq_lr, model.d, model.h * config.r_q, "wq_lr");
  expect_shape(wk_lr, model.d, model.h_kv * config.r_k, "wk_lr");
  if (config.variant == LisaVariant::dl) {
    expect_shape(align_w1, 2 * model.h, config.ffn_hidden, "align_w1");
    expect_shape(align_w2, config.ffn_hidden, model.h, "align_w2");
  } else if (config.variant == LisaVariant::sl) {
    expect_shape(align_w, 2 * model.h, model.h, "align_w");
  }
}

LisaParams init_lisa_params(const ModelConfig& model, const LisaLayerConfig& config, std::mt19937_64& rng) {
  config.validate(model);
  LisaParams p;
  p.config = config;
  p.wq_lr = normal(model.d, model.h * config.r_q, 0.02, rng);
  p.wk_lr = normal(model.d, model.h_kv * config.r_k, 0.02, rng);
  const Index h = model.h;
  if (config.variant == LisaVariant::sl) {
    MatrixD w = MatrixD::Zero(2 * h, h);
    for (Index k = 0; k < h; ++k) {
      w(k, k) = 1.0;
      w(h + k, k) = 1.0;
    }
    p.align_w = TensorD::from_matrix(std::move(w));
  } else if (config.variant == LisaVariant::dl) {
    const Index m = config.ffn_hidden;
    MatrixD w1 = normal(2 * h, m, 0.02, rng).mat();
    MatrixD w2 = MatrixD::Zero(m, h);
    if (m >= 2 * h) {
      w1.leftCols(2 * h).setZero();
      for (Index k = 0; k < h; ++k) {
        // hidden k carries +(prev_k + delta_k), hidden h+k carries its negation
        w1(k, k) = 1.0;
        w1(h + k, k) = 1.0;
        w1(k, h + k) = -1.0;
        w1(h + k, h + k) = -1.0;
        w2(k, k) = 1.0;
        w2(h + k, k) = -1.0;
      }
    } else {
      w2 = normal(m, h, 0.02, rng).mat();
    }
    p.align_w1 = TensorD::from_matrix(std::move(w1));
    p.align_w2 = TensorD::from_matrix(std::move(w2));
  }
  return p;
}

LisaVars bind_lisa(Tape& tape, const LisaParams& params, bool trainable) {
  LisaVars v{tape.param(params.wq_lr, trainable), tape.param(params.wk_lr, trainable), {}, {}, {}};
  if (params.config.variant == LisaVariant::dl) {
    v.align_w1 = tape.param(params.align_w1, trainable);
    v.align_w2 = tape.param(params.align_w2, trainable);
  } else if (params.config.variant == LisaVariant::sl) {
    v.align_w = tape.param(params.align_w, trainable);
  }
  return v;
}

DeltaTerms compute_delta(Var hidden, const LisaVars& params, const LisaLayerConfig& config,
                         const ModelConfig& model) {
  const Index r = config.r_q;
  Var q_lr = ad::rope(ad::matmul(hidden, params.wq_lr), model.h, r, model.rope_base);
  Var k_lr = ad::rope(ad::matmul(hidden, params.wk_lr), model.h_kv, r, model.rope_base);
  Var delta = multihead_scores(q_lr, k_lr, model.h, model.h_kv, r, 1.0 / std::sqrt(static_cast<double>(r)));
  return {delta, q_lr, k_lr};
}

Var align_and_integrate(Var prev_scores, Var delta, const LisaVars& params, const LisaLayerConfig& config,
                        Index heads) {
  if (prev_scores.rows() != delta.rows() || prev_scores.cols() != delta.cols()) {
    throw ShapeError("align_and_integrate: previous scores and delta differ in shape");
  }
  const Index l = prev_scores.cols();
  if (config.variant == LisaVariant::plus) return ad::add(prev_scores, delta);

  const Var parts[] = {ad::gather_pairs(prev_scores, heads, l), ad::gather_pairs(delta, heads, l)};
  Var channels = ad::concat_cols<double>(parts);
  Var aligned = config.variant == LisaVariant::sl
                    ? ad::matmul(channels, *params.align_w)
                    : ad::matmul(ad::relu(ad::matmul(channels, *params.align_w1)), *params.align_w2);
  return ad::scatter_pairs(aligned, heads, l);
}

Var lisa_scores(Var hidden, Var prev_scores, const LisaVars& params, const LisaLayerConfig& config,
                const ModelConfig& model) {
  return align_and_integrate(prev_scores, compute_delta(hidden, params, config, model).delta, params, config,
                             model.h);
}

Var ds_scores(std::optional<Var> prev_scores) {
  if (!prev_scores) throw ConfigError("direct sharing needs the previous layer's scores");
  return *prev_scores;
}

TensorD compute_delta(const TensorD& hidden, const LisaParams& params, const ModelConfig& model) {
  Tape tape;
  const LisaVars v = bind_lisa(tape, params, false);
  return compute_delta(tape.param(hidden, false), v, params.config, model).delta.value();
}

TensorD align_and_integrate(const TensorD& prev_scores, const TensorD& delta, const LisaParams& params) {
  if (prev_scores.rank() != 3) throw ShapeError("align_and_integrate: scores must be {h, l, l}");
  Tape tape;
  const LisaVars v = bind_lisa(tape, params, false);
  return align_and_integrate(tape.param(prev_scores, false), tape.param(delta, false), v, params.config,
                             prev_scores.dim(0))
      .value();
}

TensorD lisa_scores(const TensorD& hidden, const TensorD& prev_scores, const LisaParams& params,
                    const ModelConfig& model) {
  Tape tape;
  const LisaVars v = bind_lisa(tape, params, false);
  return lisa_scores(tape.param(hidden, false), tape.param(prev_scores, false), v, params.config, model).value();
}

TensorD ds_scores(const TensorD& prev_scores) { return prev_scores; }

TensorD avg_scores(Index heads, Index l) { return uniform_causal_weights<double>(heads, l); }

Eigen::VectorXd align_channels(const Eigen::VectorXd& prev, const Eigen::VectorXd& delta,
                               const LisaParams& params) {
  switch (params.config.variant) {
    case LisaVariant::plus:
      return prev + delta;
    case LisaVariant::sl: {
      Eigen::RowVectorXd in(prev.size() * 2);
      in << prev.transpose(), delta.transpose();
      return (in * params.align_w.mat()).transpose();
    }
    case LisaVariant::dl: {
      Eigen::RowVectorXd in(prev.size() * 2);
      in << prev.transpose(), delta.transpose();
      const Eigen::RowVectorXd hidden = (in * params.align_w1.mat()).cwiseMax(0.0);
      return (hidden * params.align_w2.mat()).transpose();
    }
  }
  throw ConfigError("unknown LiSA variant");
}

}  // namespace lisa
