// Copyright 2026 The proberoute Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "proberoute/backbone.hpp"
#include "proberoute/training.hpp"

namespace proberoute {
namespace {

BackboneConfig small_config(std::uint64_t seed = 1) {
  BackboneConfig c;
  c.hidden_dim = 16;
  c.num_heads = 4;
  c.init_seed = seed;
  return c;
}

LoraAdapter<double> random_adapter(const BackboneConfig& c, double b_scale, std::uint64_t seed,
                                   std::vector<LoraTarget> targets = {LoraTarget::kQuery, LoraTarget::kValue}) {
  Rng rng(seed);
  auto ad = init_lora<double>(c, 4, 8.0, targets, rng);
  for (auto& p : ad.pairs) p.b.value = gaussian_matrix<double>(p.b.value.rows(), p.b.value.cols(), b_scale, rng);
  return ad;
}

TEST(Backbone, InitIsDeterministic) {
  const auto a = init_backbone<float>(small_config(5));
  const auto b = init_backbone<float>(small_config(5));
  const auto c = init_backbone<float>(small_config(6));
  ASSERT_EQ(a.layers.size(), b.layers.size());
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    EXPECT_TRUE(a.layers[i].wq.value == b.layers[i].wq.value);
    EXPECT_TRUE(a.layers[i].w2.value == b.layers[i].w2.value);
    EXPECT_FALSE(a.layers[i].wq.value == c.layers[i].wq.value);
  }
}

TEST(Backbone, DefaultShapes) {
  auto w = init_backbone<float>(BackboneConfig{});
  ASSERT_EQ(w.layers.size(), 4u);
  for (auto& l : w.layers) {
    for (const auto* p : {&l.wq, &l.wk, &l.wv, &l.wo}) {
      EXPECT_EQ(p->value.rows(), 64u);
      EXPECT_EQ(p->value.cols(), 64u);
    }
  }
  for (auto* p : w.params()) EXPECT_FALSE(p->trainable) << p->name;
}

TEST(Backbone, ConfigErrors) {
  BackboneConfig c;
  c.num_heads = 5;
  EXPECT_THROW(init_backbone<float>(c), std::invalid_argument);
  c = BackboneConfig{};
  c.probe_layer = 5;
  EXPECT_THROW(init_backbone<float>(c), std::invalid_argument);
  c.probe_layer = 0;
  EXPECT_THROW(init_backbone<float>(c), std::invalid_argument);
}

TEST(Backbone, TokenDimMismatch) {
  const auto w = init_backbone<float>(small_config());
  EXPECT_THROW(forward(Matrix(3, 8), w), std::invalid_argument);
  EXPECT_THROW(forward(Matrix(0, 16), w), std::invalid_argument);
}

TEST(Backbone, SingleToken) {
  const auto w = init_backbone<float>(small_config());
  Rng r(2);
  const auto hs = forward(gaussian_matrix<float>(1, 16, 1.0, r), w);
  EXPECT_EQ(hs.prev.rows(), 1u);
  EXPECT_EQ(hs.layer.rows(), 1u);
  EXPECT_EQ(hs.layer.cols(), 16u);
}

TEST(Backbone, ZeroBAdapterIsIdentity) {
  const auto c = small_config();
  const auto w = init_backbone<float>(c);
  Rng r(3);
  const auto tokens = gaussian_matrix<float>(9, 16, 1.0, r);
  auto ad = init_lora<float>(c, 4, 8.0, {kAllLoraTargets.begin(), kAllLoraTargets.end()}, r);
  const auto frozen = forward(tokens, w);
  const auto adapted = forward(tokens, w, &ad);
  EXPECT_TRUE(frozen.layer == adapted.layer);
  EXPECT_TRUE(frozen.prev == adapted.prev);
  // With B = 0 the value of A is irrelevant.
  for (auto& p : ad.pairs) p.a.value.flat()[0] += 5.0f;
  EXPECT_TRUE(forward(tokens, w, &ad).layer == frozen.layer);
}

TEST(Backbone, AdapterContinuity) {
  const auto c = small_config();
  const auto w = init_backbone<double>(c);
  Rng r(4);
  const auto tokens = gaussian_matrix<double>(7, 16, 1.0, r);
  auto ad = random_adapter(c, 1.0, 5);
  const auto frozen = forward(tokens, w).layer;
  auto fro = [&](const BasicMatrix<double>& m) {
    double s = 0;
    for (std::size_t i = 0; i < m.size(); ++i) s += (m.flat()[i] - frozen.flat()[i]) * (m.flat()[i] - frozen.flat()[i]);
    return std::sqrt(s);
  };
  const double full = fro(forward(tokens, w, &ad).layer);
  EXPECT_GT(full, 0.0);
  for (auto& p : ad.pairs) {
    for (auto& v : p.b.value.flat()) v *= 1e-3;
  }
  double norm = 0;
  for (double v : frozen.flat()) norm += v * v;
  EXPECT_LT(fro(forward(tokens, w, &ad).layer) / std::sqrt(norm), 1e-2);
}

TEST(Backbone, Causality) {
  const auto w = init_backbone<float>(small_config());
  Rng r(6);
  auto tokens = gaussian_matrix<float>(10, 16, 1.0, r);
  const auto before = forward_all_layers(tokens, w);
  const std::size_t j = 6;
  for (auto& v : tokens.row(j)) v += 3.0f;
  const auto after = forward_all_layers(tokens, w);
  ASSERT_EQ(before.size(), 5u);
  for (std::size_t l = 0; l < before.size(); ++l) {
    for (std::size_t i = 0; i < j; ++i) {
      for (std::size_t c = 0; c < 16; ++c) ASSERT_EQ(before[l](i, c), after[l](i, c)) << l << " " << i;
    }
    bool changed = false;
    for (std::size_t c = 0; c < 16; ++c) changed |= before[l](j, c) != after[l](j, c);
    EXPECT_TRUE(changed);
  }
}

TEST(Backbone, ForwardMatchesAllLayers) {
  const auto w = init_backbone<float>(small_config());
  Rng r(7);
  const auto tokens = gaussian_matrix<float>(5, 16, 1.0, r);
  const auto hs = forward(tokens, w);
  const auto all = forward_all_layers(tokens, w);
  EXPECT_TRUE(hs.prev == all[2]);
  EXPECT_TRUE(hs.layer == all[3]);
}

TEST(Backbone, LastRowCacheMatchesFullForward) {
  const auto c = small_config();
  const auto wf = init_backbone<float>(c);
  Rng r(8);
  const auto tokens = gaussian_matrix<float>(11, 16, 1.0, r);
  const auto cache = build_layer_cache(tokens, wf);
  const auto full = forward(tokens, wf);
  EXPECT_TRUE(cache.prev == full.prev);
  EXPECT_EQ(cache.frozen_last, last_token_feature(full.layer));

  // Adapted path, every target, nonzero B.
  const auto wd = init_backbone<double>(c);
  const auto td = tokens.cast<double>();
  auto ad = random_adapter(c, 0.5, 9, {kAllLoraTargets.begin(), kAllLoraTargets.end()});
  const auto cd = build_layer_cache(td, wd);
  const auto row = adapted_last_row(cd, wd.layers[c.probe_layer - 1], c.num_heads, &ad);
  EXPECT_EQ(row, last_token_feature(forward(td, wd, &ad).layer));
}

TEST(Lora, ZeroB) {
  Rng r(10);
  const auto a = gaussian_matrix<double>(2, 4, 1.0, r);
  const BasicMatrix<double> b(4, 2);
  for (double v : lora_delta<double>(std::vector<double>{1, 2, 3, 4}, a, b, 16.0, 2)) EXPECT_EQ(v, 0.0);
}

TEST(Lora, IdentityConstruction) {
  // A = [I_r | 0], B = [I_r ; 0], alpha = r.
  const std::size_t r = 2, d = 4;
  BasicMatrix<double> a(r, d), b(d, r);
  for (std::size_t i = 0; i < r; ++i) a(i, i) = b(i, i) = 1.0;
  std::vector<double> e1(d, 0.0);
  e1[0] = 1.0;
  EXPECT_EQ(lora_delta<double>(e1, a, b, static_cast<double>(r), r), e1);
}

TEST(Lora, MatchesDenseProduct) {
  Rng rng(11);
  const std::size_t r = 2, d = 4;
  const auto a = gaussian_matrix<double>(r, d, 1.0, rng);
  const auto b = gaussian_matrix<double>(d, r, 1.0, rng);
  std::vector<double> x(d);
  for (auto& v : x) v = rng.normal();
  const double alpha = 5.0;
  // (alpha/r) (B A) x with B A formed explicitly.
  BasicMatrix<double> ba(d, d);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      for (std::size_t k = 0; k < r; ++k) ba(i, j) += b(i, k) * a(k, j);
    }
  }
  const auto got = lora_delta<double>(x, a, b, alpha, r);
  for (std::size_t i = 0; i < d; ++i) {
    double acc = 0;
    for (std::size_t j = 0; j < d; ++j) acc += ba(i, j) * x[j];
    EXPECT_NEAR(got[i], alpha / r * acc, 1e-6);
  }
}

TEST(Lora, Errors) {
  const BasicMatrix<double> a(2, 4), b(4, 2);
  EXPECT_THROW(lora_delta<double>(std::vector<double>(4), a, b, 1.0, 0), std::invalid_argument);
  EXPECT_THROW(lora_delta<double>(std::vector<double>(3), a, b, 1.0, 2), std::invalid_argument);
  Rng r(1);
  EXPECT_THROW(init_lora<float>(small_config(), 0, 1.0, {LoraTarget::kQuery}, r), std::invalid_argument);
  EXPECT_THROW(init_lora<float>(small_config(), 2, 1.0, {}, r), std::invalid_argument);
  EXPECT_THROW(init_lora<float>(small_config(), 2, 1.0, {LoraTarget::kQuery, LoraTarget::kQuery}, r),
               std::invalid_argument);
}

TEST(Lora, TargetNamesRoundTrip) {
  for (auto t : kAllLoraTargets) EXPECT_EQ(lora_target_from_string(to_string(t)), t);
  EXPECT_THROW(lora_target_from_string("z"), std::invalid_argument);
}

TEST(Backbone, BackwardLeavesFrozenWeightsAlone) {
  const auto c = small_config();
  auto bb = init_backbone<double>(c);
  ModelConfig mc;
  mc.lora_rank = 4;
  mc.lora_targets.assign(kAllLoraTargets.begin(), kAllLoraTargets.end());
  auto model = make_probe_model<double>(Method::kRelope, c, mc, 3);
  Rng r(12);
  for (auto& p : model.adapter.pairs) p.b.value = gaussian_matrix<double>(p.b.value.rows(), p.b.value.cols(), 0.3, r);
  const auto cache = build_layer_cache(gaussian_matrix<double>(6, 16, 1.0, r), bb);
  std::vector<double> eps(model.heads.bottleneck_dim(), 0.5);
  sample_loss(model, bb, cache, 1, std::span<const double>(eps), 0.5, 1.0, true);
  for (auto* p : bb.params()) {
    for (double g : p->grad.flat()) ASSERT_EQ(g, 0.0) << p->name;
  }
  double adapter_grad = 0;
  for (auto* p : model.adapter.params()) {
    for (double g : p->grad.flat()) adapter_grad += std::abs(g);
  }
  EXPECT_GT(adapter_grad, 0.0);
}

}  // namespace
}  // namespace proberoute
