// Copyright 2026 The lisa-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "lisa/inference.hpp"
#include "test_support.hpp"

namespace lisa {
namespace {

// standard, ds, lisa dl, avg, standard, lisa plus, lisa sl
Model mixed_model(std::uint64_t seed, Index h = 4, Index h_kv = 2) {
  ModelConfig c = testing::micro_config(7, h, h_kv);
  c.max_len = 24;
  Model m = testing::micro_model(c, seed);
  SharingConfig s = SharingConfig::all_standard(7);
  s.layers[1].mode = AttentionMode::ds;
  s.layers[2] = LayerSharing{AttentionMode::lisa, testing::small_lisa(LisaVariant::dl, 2, 12)};
  s.layers[3].mode = AttentionMode::avg;
  s.layers[5] = LayerSharing{AttentionMode::lisa, testing::small_lisa(LisaVariant::plus, 4)};
  s.layers[6] = LayerSharing{AttentionMode::lisa, testing::small_lisa(LisaVariant::sl, 2)};
  m.install_sharing(s, seed + 1);
  // push the LiSA parameters well away from their identity-like start
  std::mt19937_64 rng(seed + 2);
  for (auto& p : m.lisa) {
    if (!p) continue;
    for (auto& [name, t] : p->named()) t->mat() += testing::random_matrix(t->rows(), t->cols(), rng, 0.3);
  }
  return m;
}

double max_abs(const Eigen::MatrixXd& a) { return a.cwiseAbs().maxCoeff(); }

TEST(Decode, StepByStepMatchesFullForward) {
  for (Index h_kv : {4, 2, 1}) {
    const Model m = mixed_model(31 + h_kv, 4, h_kv);
    std::mt19937_64 rng(5);
    const std::vector<int> tokens = testing::random_tokens(20, rng);
    const TensorD full = model_forward(m, tokens).logits;
    KVCache cache = empty_cache(m);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      const Eigen::RowVectorXd row = decode_step(m, cache, tokens[t]);
      EXPECT_LT(max_abs(row - full.mat().row(static_cast<Index>(t))), 1e-9) << "h_kv " << h_kv << " t " << t;
    }
    EXPECT_EQ(cache.length, 20);
  }
}

TEST(Decode, PrefillThenDecodeMatchesFullForward) {
  const Model m = mixed_model(8);
  std::mt19937_64 rng(6);
  const std::vector<int> tokens = testing::random_tokens(18, rng);
  const TensorD full = model_forward(m, tokens).logits;
  for (Index split : {1, 7, 17}) {
    PrefillResult p = prefill(m, std::span<const int>(tokens).first(static_cast<std::size_t>(split)));
    EXPECT_LT(max_abs(p.logits.mat() - full.mat().topRows(split)), 1e-9);
    for (Index t = split; t < 18; ++t) {
      const Eigen::RowVectorXd row = decode_step(m, p.cache, tokens[static_cast<std::size_t>(t)]);
      EXPECT_LT(max_abs(row - full.mat().row(t)), 1e-9) << "split " << split << " t " << t;
    }
  }
}

TEST(Decode, SingleTokenPrefillEqualsEmptyCacheStep) {
  const Model m = mixed_model(12);
  const std::vector<int> one{42};
  PrefillResult p = prefill(m, one);
  KVCache cache = empty_cache(m);
  const Eigen::RowVectorXd row = decode_step(m, cache, 42);
  EXPECT_LT(max_abs(row - p.logits.mat().row(0)), 1e-12);
  EXPECT_EQ(p.cache.length, cache.length);
  for (std::size_t i = 0; i < cache.layers.size(); ++i) {
    EXPECT_LT(max_abs(p.cache.layers[i].v.topRows(1) - cache.layers[i].v.topRows(1)), 1e-12);
  }
}

TEST(Decode, CacheLayoutPerMode) {
  const Model m = mixed_model(3);
  std::mt19937_64 rng(1);
  const PrefillResult p = prefill(m, testing::random_tokens(6, rng));
  const auto& L = p.cache.layers;
  EXPECT_GT(L[0].k.size(), 0);
  EXPECT_EQ(L[1].k.size(), 0);
  EXPECT_EQ(L[2].k.size(), 0);
  EXPECT_EQ(L[2].k_lr.cols(), 2 * 2);  // h_kv * r
  EXPECT_EQ(L[5].k_lr.cols(), 2 * 4);
  EXPECT_EQ(L[3].a_row.size(), 0);     // avg keeps no scores
  // ds reuses the row of the layer in front
  EXPECT_EQ(L[1].a_row, L[0].a_row);
  EXPECT_EQ(L[1].a_row.cols(), 6);
  // lisa cache carries fewer key bytes than a standard layer
  EXPECT_LT(L[2].k_lr.size(), L[0].k.size());
  const std::size_t before = p.cache.bytes();
  KVCache c = p.cache;
  decode_step(m, c, 9);
  EXPECT_GT(c.bytes(), before);
}

TEST(Decode, LisaScoreRowMatchesFullRecompute) {
  const Model m = mixed_model(19);
  std::mt19937_64 rng(2);
  const std::vector<int> tokens = testing::random_tokens(10, rng);
  const AttentionTrace tr = *model_forward(m, tokens, true).trace;
  KVCache cache = empty_cache(m);
  for (int t : tokens) decode_step(m, cache, t);
  for (Index layer : {2, 5, 6}) {
    const TensorD& A = tr.layers[static_cast<std::size_t>(layer)].A;
    const MatrixD& row = cache.layers[static_cast<std::size_t>(layer)].a_row;
    for (Index i = 0; i < 4; ++i)
      for (Index s = 0; s < 10; ++s) EXPECT_NEAR(row(i, s), A.at3(i, 9, s), 1e-9) << layer;
  }
}

TEST(Prefill, NfEqualsTeacherBitwise) {
  const Model m = mixed_model(23);
  std::mt19937_64 rng(3);
  const std::vector<int> tokens = testing::random_tokens(15, rng);
  const PrefillResult nf = prefill(m, tokens, true);
  const TensorD teacher = model_forward(m, SharingConfig::all_standard(7), tokens).logits;
  EXPECT_EQ(nf.logits.mat(), teacher.mat());
  EXPECT_TRUE(nf.cache.nf);
  EXPECT_GT(nf.cache.layers[2].k_lr.size(), 0);

  Model strict = m;
  strict.sharing.layers[2].lisa->nf_keep_original = false;
  strict.lisa[2]->config.nf_keep_original = false;
  EXPECT_THROW(prefill(strict, tokens, true), ConfigError);
}

TEST(Decode, Errors) {
  const Model m = mixed_model(4);
  KVCache cache = empty_cache(m);
  EXPECT_THROW(decode_step(m, cache, 258), InputError);
  EXPECT_THROW(decode_step(m, cache, -1), InputError);
  for (Index t = 0; t < m.config.max_len; ++t) decode_step(m, cache, 1);
  EXPECT_THROW(decode_step(m, cache, 1), CapacityError);
  KVCache other = empty_cache(Model::create(testing::micro_config(2), 1));
  EXPECT_THROW(decode_step(m, other, 1), ContractError);
}

TEST(Generate, GreedyAndDeterministic) {
  const Model m = mixed_model(29);
  const std::vector<int> prompt{5, 6, 7};
  EXPECT_EQ(generate(m, prompt, 0), prompt);
  const std::vector<int> a = generate(m, prompt, 6);
  EXPECT_EQ(a, generate(m, prompt, 6));
  ASSERT_EQ(a.size(), 9u);
  EXPECT_TRUE(std::equal(prompt.begin(), prompt.end(), a.begin()));
  // each appended token is the argmax of the full forward over its prefix
  for (std::size_t t = 3; t < a.size(); ++t) {
    const TensorD logits = model_forward(m, std::span<const int>(a).first(t)).logits;
    Index best = 0;
    logits.mat().row(static_cast<Index>(t) - 1).maxCoeff(&best);
    EXPECT_EQ(a[t], static_cast<int>(best));
  }
  EXPECT_THROW(generate(m, {}, 2), InputError);
  EXPECT_THROW(generate(m, prompt, 30), CapacityError);
}

TEST(Generate, NfAutoFollowsBreakEven) {
  const Model m = mixed_model(2);
  // layers 2, 5, 6 save h_kv (d_k - r) = 2*2 + 2*0 + 2*2 = 8 key columns
  // per position against h = 4 score columns: break-even l = 2
  EXPECT_FALSE(nf_auto(m, 1));
  EXPECT_FALSE(nf_auto(m, 2));
  EXPECT_TRUE(nf_auto(m, 3));
  EXPECT_FALSE(nf_auto(Model::create(testing::micro_config(3), 1), 20));
}

TEST(Bench, RowsAreConsistent) {
  const Model m = mixed_model(7);
  const std::vector<BenchShape> grid{{4, 4}, {8, 8}};
  BenchOptions o;
  o.runs = 2;
  o.max_batch = 3;
  const auto rows = bench(m, "mixed", grid, o);
  ASSERT_EQ(rows.size(), 2u);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    EXPECT_EQ(r.config, "mixed");
    EXPECT_EQ(r.batch, 3);
    EXPECT_EQ(r.run_latencies.size(), 2u);
    EXPECT_GT(r.latency_s, 0.0);
    EXPECT_NEAR(r.tokens_per_s, 3.0 * (grid[i].input + grid[i].output) / r.latency_s, 1e-6 * r.tokens_per_s);
    const auto costs = layer_costs(m.sharing);
    const FlopsReport f = flops_report(arch_shape(m.config), grid[i].input, grid[i].output, 1, costs);
    EXPECT_EQ(r.decode_flops_per_token, f.decode_per_token(1));
  }
  o.memory_budget_bytes = 8.0;
  EXPECT_THROW(bench(m, "x", grid, o), ConfigError);
  const std::vector<BenchShape> too_long{{20, 20}};
  EXPECT_THROW(bench(m, "x", too_long, BenchOptions{}), ConfigError);
}

}  // namespace
}  // namespace lisa
