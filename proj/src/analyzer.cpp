// Copyright 2026 The lisa-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "lisa/analyzer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace lisa {

std::string to_string(LogBase base) { return base == LogBase::two ? "2" : "e"; }

LogBase parse_log_base(std::string_view text) {
  if (text == "2") return LogBase::two;
  if (text == "e") return LogBase::e;
  throw ConfigError("unknown log base '" + std::string(text) + "' (expected 2 or e)");
}

std::string to_string(MatchStrategy strategy) {
  switch (strategy) {
    case MatchStrategy::direct:
      return "direct";
    case MatchStrategy::random:
      return "random";
    case MatchStrategy::most_similar:
      return "most_similar";
  }
  return "?";
}

MatchStrategy parse_match_strategy(std::string_view text) {
  if (text == "direct") return MatchStrategy::direct;
  if (text == "random") return MatchStrategy::random;
  if (text == "most_similar") return MatchStrategy::most_similar;
  throw ConfigError("unknown matching strategy '" + std::string(text) + "'");
}

namespace {

double checked_sum(std::span<const double> p) {
  double s = 0.0;
  for (double x : p) {
    if (!(x >= 0.0)) throw InputError("js_divergence: distribution has a negative or NaN entry");
    s += x;
  }
  if (std::abs(s - 1.0) > 1e-3) throw InputError("js_divergence: distribution sums to " + std::to_string(s));
  return s;
}

// Sum over the support of x of x log(x / m).
double kl_term(double x, double m) { return x > 0.0 ? x * std::log(x / m) : 0.0; }

double js_unchecked(const double* p, double sp, const double* q, double sq, Index n) {
  double kp = 0.0, kq = 0.0;
  for (Index i = 0; i < n; ++i) {
    const double a = p[i] / sp, b = q[i] / sq;
    const double m = 0.5 * (a + b);
    kp += kl_term(a, m);
    kq += kl_term(b, m);
  }
  return std::max(0.0, 0.5 * kp + 0.5 * kq);
}

double convert(double nats, LogBase base) { return base == LogBase::two ? nats / std::log(2.0) : nats; }

// JS over query rows 1..l-1 on the causal prefix, averaged over rows.
double rowwise_js_raw(const double* a, const double* b, Index l, Index stride) {
  if (l < 2) return 0.0;
  double total = 0.0;
  for (Index t = 1; t < l; ++t) {
    const double* pa = a + t * stride;
    const double* pb = b + t * stride;
    double sa = 0.0, sb = 0.0;
    for (Index s = 0; s <= t; ++s) {
      sa += pa[s];
      sb += pb[s];
    }
    total += js_unchecked(pa, sa, pb, sb, t + 1);
  }
  return total / static_cast<double>(l - 1);
}

const TensorD& weights_of(const AttentionTrace& trace, std::size_t layer) { return trace.layers.at(layer).P; }

void check_samples(std::span<const AttentionTrace> samples) {
  if (samples.empty()) throw InputError("analysis needs at least one trace");
  const std::size_t layers = samples[0].layers.size();
  for (const auto& s : samples) {
    if (s.layers.size() != layers) throw InputError("traces differ in layer count");
    for (const auto& lt : s.layers) {
      if (lt.P.rank() != 3 || lt.P.shape() != s.layers[0].P.shape()) {
        throw InputError("traces differ in attention weight shape");
      }
    }
  }
}

}  // namespace

double js_divergence(std::span<const double> p, std::span<const double> q, LogBase base) {
  if (p.size() != q.size()) throw InputError("js_divergence: length mismatch");
  if (p.empty()) throw InputError("js_divergence: empty distribution");
  const double sp = checked_sum(p), sq = checked_sum(q);
  return convert(js_unchecked(p.data(), sp, q.data(), sq, static_cast<Index>(p.size())), base);
}

MatrixD head_mean(const TensorD& weights) {
  if (weights.rank() != 3 || weights.dim(1) != weights.dim(2)) throw ShapeError("head_mean: expected {h, l, l}");
  const Index h = weights.dim(0), l = weights.dim(1);
  MatrixD out = MatrixD::Zero(l, l);
  for (Index i = 0; i < h; ++i) out += weights.mat().middleRows(i * l, l);
  return out / static_cast<double>(h);
}

double rowwise_js(const MatrixD& a, const MatrixD& b, LogBase base) {
  if (a.rows() != b.rows() || a.cols() != b.cols() || a.rows() != a.cols()) {
    throw InputError("rowwise_js: expected equal square matrices");
  }
  return convert(rowwise_js_raw(a.data(), b.data(), a.rows(), a.cols()), base);
}

MatrixD pairwise_layer_js(std::span<const AttentionTrace> samples, LogBase base) {
  check_samples(samples);
  const Index n = static_cast<Index>(samples[0].layers.size());
  MatrixD out = MatrixD::Zero(n, n);
  for (const auto& s : samples) {
    std::vector<MatrixD> means;
    for (std::size_t k = 0; k < s.layers.size(); ++k) means.push_back(head_mean(weights_of(s, k)));
    for (Index a = 0; a < n; ++a) {
      for (Index b = a + 1; b < n; ++b) {
        out(a, b) += rowwise_js(means[static_cast<std::size_t>(a)], means[static_cast<std::size_t>(b)], base);
      }
    }
  }
  out /= static_cast<double>(samples.size());
  for (Index a = 0; a < n; ++a)
    for (Index b = 0; b < a; ++b) out(a, b) = out(b, a);
  return out;
}

MatrixD head_js_matrix(std::span<const TensorD> a, std::span<const TensorD> b, LogBase base) {
  if (a.empty() || a.size() != b.size()) throw InputError("head_js_matrix: sample counts differ");
  const Index h = a[0].dim(0);
  MatrixD out = MatrixD::Zero(h, h);
  for (std::size_t s = 0; s < a.size(); ++s) {
    if (a[s].rank() != 3 || b[s].rank() != 3) throw InputError("head_js_matrix: expected {h, l, l} weights");
    if (a[s].dim(0) != h || b[s].dim(0) != h) throw InputError("head_js_matrix: head counts differ");
    if (a[s].shape() != b[s].shape()) throw InputError("head_js_matrix: weight shapes differ");
    const Index l = a[s].dim(1);
    for (Index i = 0; i < h; ++i) {
      for (Index j = 0; j < h; ++j) {
        out(i, j) += rowwise_js_raw(a[s].data() + i * l * l, b[s].data() + j * l * l, l, l);
      }
    }
  }
  return convert(1.0, base) * out / static_cast<double>(a.size());
}

double head_matched_js(const MatrixD& js, MatchStrategy strategy, std::uint64_t seed) {
  const Index h = js.rows();
  if (h == 0 || js.cols() != h) throw InputError("head_matched_js: expected a square head matrix");
  std::vector<Index> match(static_cast<std::size_t>(h));
  std::iota(match.begin(), match.end(), Index{0});
  if (strategy == MatchStrategy::random) {
    std::mt19937_64 rng(seed);
    std::shuffle(match.begin(), match.end(), rng);
  }
  double total = 0.0;
  for (Index j = 0; j < h; ++j) {
    total += strategy == MatchStrategy::most_similar ? js.col(j).minCoeff() : js(match[static_cast<std::size_t>(j)], j);
  }
  return total / static_cast<double>(h);
}

double head_matched_js(std::span<const TensorD> a, std::span<const TensorD> b, MatchStrategy strategy,
                       std::uint64_t seed, LogBase base) {
  return head_matched_js(head_js_matrix(a, b, base), strategy, seed);
}

std::vector<HeadMatchRow> adjacent_head_matching(std::span<const AttentionTrace> samples, std::uint64_t seed,
                                                 LogBase base) {
  check_samples(samples);
  std::vector<HeadMatchRow> rows;
  const std::size_t n = samples[0].layers.size();
  for (std::size_t k = 0; k + 1 < n; ++k) {
    std::vector<TensorD> a, b;
    for (const auto& s : samples) {
      a.push_back(weights_of(s, k));
      b.push_back(weights_of(s, k + 1));
    }
    const MatrixD js = head_js_matrix(a, b, base);
    const std::uint64_t pair_seed = seed ^ (0x9E3779B97F4A7C15ULL * (k + 1));
    rows.push_back(HeadMatchRow{static_cast<Index>(k), static_cast<Index>(k + 1),
                                head_matched_js(js, MatchStrategy::direct, pair_seed),
                                head_matched_js(js, MatchStrategy::random, pair_seed),
                                head_matched_js(js, MatchStrategy::most_similar, pair_seed)});
  }
  return rows;
}

namespace {

// Token t of a {h, l, l} score stack: the unmasked prefix of every head.
Eigen::VectorXd prefix_token(const TensorD& s, Index t) {
  const Index h = s.dim(0), l = s.dim(1);
  Eigen::VectorXd v(h * (t + 1));
  for (Index i = 0; i < h; ++i) v.segment(i * (t + 1), t + 1) = s.mat().row(i * l + t).head(t + 1).transpose();
  return v;
}

const TensorD& field(const LayerTrace& lt, int which) {
  switch (which) {
    case 0:
      return lt.Q;
    case 1:
      return lt.K;
    case 2:
      return lt.V;
    case 3:
      return lt.A;
    case 4:
      return lt.P;
    case 5:
      return lt.PV;
    default:
      return lt.attn_out;
  }
}

bool present(const TensorD& t) { return t.numel() > 0; }

}  // namespace

std::vector<CosineCurve> submodule_cosine(std::span<const AttentionTrace> samples) {
  check_samples(samples);
  static constexpr const char* kNames[] = {"Q", "K", "V", "A", "P", "PV", "O"};
  const std::size_t n = samples[0].layers.size();
  std::vector<CosineCurve> curves;
  for (int which = 0; which < 7; ++which) {
    CosineCurve c{kNames[which], {}, {}};
    const bool scores = which == 3 || which == 4;
    for (std::size_t k = 0; k + 1 < n; ++k) {
      double total = 0.0;
      Index counted = 0, skipped = 0;
      bool available = true;
      for (const auto& s : samples) {
        const TensorD& x = field(s.layers[k], which);
        const TensorD& y = field(s.layers[k + 1], which);
        if (!present(x) || !present(y) || x.shape() != y.shape()) {
          available = false;
          break;
        }
        const Index tokens = scores ? x.dim(1) : x.rows();
        for (Index t = 0; t < tokens; ++t) {
          Eigen::VectorXd u, v;
          if (scores) {
            u = prefix_token(x, t);
            v = prefix_token(y, t);
          } else {
            u = x.mat().row(t).transpose();
            v = y.mat().row(t).transpose();
          }
          const double nu = u.norm(), nv = v.norm();
          if (nu == 0.0 || nv == 0.0) {
            ++skipped;
            continue;
          }
          total += u.dot(v) / (nu * nv);
          ++counted;
        }
      }
      c.values.push_back(available && counted > 0 ? total / static_cast<double>(counted)
                                                  : std::numeric_limits<double>::quiet_NaN());
      c.skipped.push_back(skipped);
    }
    curves.push_back(std::move(c));
  }
  return curves;
}

SimilarityReport analyze(const Model& model, std::span<const std::vector<int>> windows, std::uint64_t seed,
                         LogBase base) {
  if (windows.empty()) throw InputError("analyze: no windows");
  std::vector<AttentionTrace> traces(windows.size());
  parallel_for(windows.size(), [&](std::size_t i) { traces[i] = *model_forward(model, windows[i], true).trace; });
  SimilarityReport r;
  r.layer_js = pairwise_layer_js(traces, base);
  r.matching = adjacent_head_matching(traces, seed, base);
  r.cosine = submodule_cosine(traces);
  r.samples = static_cast<Index>(traces.size());
  r.base = base;
  return r;
}

DeviationResult deviation_sweep(const Model& model, std::span<const std::vector<int>> windows,
                                AttentionMode pattern, std::optional<std::vector<Index>> targets) {
  if (pattern != AttentionMode::ds && pattern != AttentionMode::avg) {
    throw ConfigError("deviation pattern must be ds or avg");
  }
  if (model.config.n_layers < 2) throw ConfigError("deviation sweep needs at least two layers");
  if (!targets) {
    targets.emplace();
    for (Index n = 1; n < model.config.n_layers; ++n) targets->push_back(n);
  }
  DeviationResult r;
  r.pattern = pattern;
  r.baseline = eval_perplexity(model, windows).perplexity;
  for (Index n : *targets) {
    if (n < 1 || n >= model.config.n_layers) throw ConfigError("deviation target " + std::to_string(n) + " invalid");
    SharingConfig s = model.sharing;
    s.layers[static_cast<std::size_t>(n)] = LayerSharing{pattern, std::nullopt};
    r.layers.push_back(n);
    r.perplexity.push_back(eval_perplexity(model, s, windows).perplexity);
  }
  return r;
}

}  // namespace lisa
