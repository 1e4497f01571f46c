// Copyright 2026 The proberoute Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "proberoute/probes.hpp"
#include "proberoute/training.hpp"

namespace proberoute {
namespace {

TEST(LastToken, PicksFinalRow) {
  BasicMatrix<double> one(1, 3, std::vector<double>{1, 2, 3});
  EXPECT_EQ(last_token_feature(one), (std::vector<double>{1, 2, 3}));
  BasicMatrix<double> eye(5, 5);
  for (int i = 0; i < 5; ++i) eye(i, i) = 1.0;
  EXPECT_EQ(last_token_feature(eye), (std::vector<double>{0, 0, 0, 0, 1}));
  EXPECT_THROW(last_token_feature(BasicMatrix<double>(0, 3)), std::invalid_argument);
}

TEST(Attention, ZeroQueryIsMeanPooling) {
  Rng r(1);
  const auto states = gaussian_matrix<double>(7, 6, 1.0, r);
  AttentionQuery<double> q{BasicParam<double>("q", BasicMatrix<double>(1, 6))};
  std::vector<double> w;
  const auto out = attention_aggregate(states, q, &w);
  for (std::size_t j = 0; j < 6; ++j) {
    double mean = 0;
    for (std::size_t i = 0; i < 7; ++i) mean += states(i, j);
    EXPECT_NEAR(out[j], mean / 7, 1e-12);
  }
  for (double b : w) EXPECT_NEAR(b, 1.0 / 7, 1e-15);
}

TEST(Attention, SingleRow) {
  Rng r(2);
  const auto states = gaussian_matrix<float>(1, 4, 1.0, r);
  const auto q = make_attention_query<float>(4, r);
  const auto out = attention_aggregate(states, q);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(out[j], states(0, j));
}

TEST(Attention, TwoRowExample) {
  BasicMatrix<double> states(2, 2, std::vector<double>{1, 0, 0, 1});
  AttentionQuery<double> q{BasicParam<double>("q", BasicMatrix<double>(1, 2, std::vector<double>{10 * std::sqrt(2.0), 0}))};
  std::vector<double> w;
  const auto out = attention_aggregate(states, q, &w);
  // softmax([10, 0]) evaluated directly.
  const double hi = 1.0 / (1.0 + std::exp(-10.0));
  EXPECT_NEAR(w[0], hi, 1e-12);
  EXPECT_NEAR(w[0], 0.99995, 1e-5);
  EXPECT_NEAR(out[0], 0.99995, 1e-5);
  EXPECT_NEAR(out[1], 0.00005, 1e-5);
}

TEST(Attention, WeightsFormSimplexAndOutputInHull) {
  Rng r(3);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 1 + r.uniform_int(0, 20);
    const auto states = gaussian_matrix<double>(n, 8, 2.0, r);
    const auto q = make_attention_query<double>(8, r);
    std::vector<double> w;
    const auto out = attention_aggregate(states, q, &w);
    EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-6);
    for (std::size_t j = 0; j < 8; ++j) {
      double lo = 1e300, hi = -1e300;
      for (std::size_t i = 0; i < n; ++i) {
        lo = std::min(lo, states(i, j));
        hi = std::max(hi, states(i, j));
      }
      EXPECT_GE(out[j], lo - 1e-12);
      EXPECT_LE(out[j], hi + 1e-12);
    }
  }
}

TEST(Attention, EqualProjectionsGiveMean) {
  // Rows differ only orthogonally to q, so every score is equal.
  BasicMatrix<double> states(3, 2, std::vector<double>{1, 5, 1, -2, 1, 0.5});
  AttentionQuery<double> q{BasicParam<double>("q", BasicMatrix<double>(1, 2, std::vector<double>{3, 0}))};
  const auto out = attention_aggregate(states, q);
  EXPECT_NEAR(out[0], 1.0, 1e-12);
  EXPECT_NEAR(out[1], 3.5 / 3, 1e-12);
}

TEST(Attention, DimMismatch) {
  Rng r(4);
  const auto q = make_attention_query<float>(4, r);
  EXPECT_THROW(attention_aggregate(Matrix(3, 5), q), std::invalid_argument);
  EXPECT_THROW(attention_aggregate(Matrix(0, 4), q), std::invalid_argument);
}

TEST(Mlp, Widths) {
  EXPECT_EQ(probe_widths(64, 64), (std::vector<std::size_t>{64, 64, 32, 16, 8, 1}));
  EXPECT_EQ(probe_widths(16, 64), (std::vector<std::size_t>{16, 64, 32, 16, 8, 1}));
  Rng r(5);
  const auto p = make_mlp_probe<float>(64, 64, r);
  EXPECT_EQ(p.weights.size(), kProbeLayers);
}

TEST(Mlp, ZeroInitPredictsHalf) {
  Rng r(6);
  const auto p = make_mlp_probe<float>(8, 8, r, true);
  std::vector<float> x(8);
  for (auto& v : x) v = static_cast<float>(r.normal());
  const auto pr = mlp_predict(p, std::span<const float>(x));
  EXPECT_EQ(pr.logit, 0.0f);
  EXPECT_EQ(pr.prob, 0.5f);
}

TEST(Mlp, SaturatedLogit) {
  Rng r(7);
  auto p = make_mlp_probe<double>(4, 8, r, true);
  p.biases.back().value(0, 0) = -38.0;
  const auto pr = mlp_predict(p, std::span<const double>(std::vector<double>(4, 1.0)));
  EXPECT_EQ(pr.logit, -38.0);
  EXPECT_LT(pr.prob, 1e-16);
}

TEST(Mlp, DimMismatch) {
  Rng r(8);
  const auto p = make_mlp_probe<float>(8, 8, r);
  EXPECT_THROW(mlp_predict(p, std::span<const float>(std::vector<float>(7))), std::invalid_argument);
}

TEST(Mlp, LearnsSeparableFeatures) {
  Rng r(9);
  const std::size_t d = 16, m = 400;
  std::vector<double> w(d);
  for (auto& v : w) v = r.normal();
  std::vector<std::vector<float>> xs;
  std::vector<int> ys;
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<float> x(d);
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) {
      x[j] = static_cast<float>(r.normal());
      s += w[j] * x[j];
    }
    if (std::abs(s) < 0.5) continue;  // margin
    xs.push_back(x);
    ys.push_back(s > 0 ? 1 : 0);
  }
  auto probe = make_mlp_probe<float>(d, d, r);
  auto params = probe.params();
  AdamWState<float> st(params);
  const AdamWConfig cfg{3e-3, 0.0};
  for (int epoch = 0; epoch < 40; ++epoch) {
    for (std::size_t b = 0; b < xs.size(); b += 32) {
      const std::size_t e = std::min(xs.size(), b + 32);
      for (std::size_t i = b; i < e; ++i) {
        MlpTape<float> tape;
        const float z = mlp_logit(probe, std::span<const float>(xs[i]), &tape);
        const auto l = bce_logit_loss(z, ys[i]);
        mlp_backward(probe, tape, l.dlogit / static_cast<float>(e - b), std::span<float>());
      }
      adamw_step(std::span<BasicParam<float>* const>(params), st, cfg);
    }
  }
  std::size_t right = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    right += (mlp_predict(probe, std::span<const float>(xs[i])).prob >= 0.5f) == (ys[i] == 1);
  }
  EXPECT_GE(static_cast<double>(right) / static_cast<double>(xs.size()), 0.95);
}

TEST(Vib, ZeroNoiseAndMeanModeReturnMu) {
  Rng r(10);
  auto h = make_vib_heads<double>(8, 3, r);
  h.logvar_w.value = gaussian_matrix<double>(3, 8, 1.0, r);
  std::vector<double> z(8);
  for (auto& v : z) v = r.normal();
  const auto a = vib_forward(std::span<const double>(z), h, VibMode::kSample, std::span<const double>(std::vector<double>(3, 0.0)));
  EXPECT_EQ(a.sample, a.mu);
  const auto b = vib_forward(std::span<const double>(z), h, VibMode::kMean);
  EXPECT_EQ(b.sample, b.mu);
  EXPECT_EQ(a.mu, b.mu);
}

TEST(Vib, AffineHeads) {
  Rng r(11);
  auto h = make_vib_heads<double>(4, 2, r);
  h.logvar_w.value = gaussian_matrix<double>(2, 4, 1.0, r);
  h.mu_b.value(0, 1) = 0.25;
  h.logvar_b.value(0, 0) = -0.5;
  const std::vector<double> z{1, -1, 2, 0.5};
  const auto o = vib_forward(std::span<const double>(z), h, VibMode::kMean);
  for (std::size_t j = 0; j < 2; ++j) {
    double mu = h.mu_b.value(0, j), lv = h.logvar_b.value(0, j);
    for (std::size_t i = 0; i < 4; ++i) {
      mu += h.mu_w.value(j, i) * z[i];
      lv += h.logvar_w.value(j, i) * z[i];
    }
    EXPECT_NEAR(o.mu[j], mu, 1e-12);
    EXPECT_NEAR(o.logvar[j], std::clamp(lv, -kLogVarClamp, kLogVarClamp), 1e-12);
  }
}

TEST(Vib, LogVarClamped) {
  Rng r(12);
  auto h = make_vib_heads<double>(2, 2, r);
  h.logvar_b.value(0, 0) = 50.0;
  h.logvar_b.value(0, 1) = -50.0;
  const auto o = vib_forward(std::span<const double>(std::vector<double>{0, 0}), h, VibMode::kMean);
  EXPECT_EQ(o.logvar[0], 10.0);
  EXPECT_EQ(o.logvar[1], -10.0);
  EXPECT_TRUE(o.clamped[0]);
  EXPECT_TRUE(o.clamped[1]);
}

TEST(Vib, SampleStatistics) {
  Rng r(13);
  auto h = make_vib_heads<double>(6, 3, r);
  h.logvar_w.value = gaussian_matrix<double>(3, 6, 0.5, r);
  std::vector<double> z(6);
  for (auto& v : z) v = r.normal();
  const auto ref = vib_forward(std::span<const double>(z), h, VibMode::kMean);
  const int n = 100000;
  std::vector<double> s(3, 0), s2(3, 0), eps(3);
  for (int t = 0; t < n; ++t) {
    for (auto& e : eps) e = r.normal();
    const auto o = vib_forward(std::span<const double>(z), h, VibMode::kSample, std::span<const double>(eps));
    for (int j = 0; j < 3; ++j) {
      s[j] += o.sample[j];
      s2[j] += o.sample[j] * o.sample[j];
    }
  }
  for (int j = 0; j < 3; ++j) {
    const double var = std::exp(ref.logvar[j]);
    const double mean = s[j] / n;
    EXPECT_NEAR(mean, ref.mu[j], 3 * std::sqrt(var) / std::sqrt(double(n)));
    EXPECT_NEAR(s2[j] / n - mean * mean, var, 0.05 * var);
  }
}

TEST(Vib, Errors) {
  Rng r(14);
  const auto h = make_vib_heads<float>(4, 2, r);
  EXPECT_THROW(vib_forward(std::span<const float>(std::vector<float>(3)), h, VibMode::kMean), std::invalid_argument);
  EXPECT_THROW(vib_forward(std::span<const float>(std::vector<float>(4)), h, VibMode::kSample), std::invalid_argument);
}

TEST(Vib, StartsAtThePrior) {
  Rng r(15);
  const auto h = make_vib_heads<float>(64, 16, r);
  for (float v : h.logvar_w.value.flat()) EXPECT_EQ(v, 0.0f);
}

}  // namespace
}  // namespace proberoute
