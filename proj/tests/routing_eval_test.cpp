// Copyright 2026 The proberoute Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "proberoute/routing_eval.hpp"

namespace proberoute {
namespace {

// O(m^2) Mann-Whitney: positive-over-negative pairs, ties count one half.
double pairwise_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double num = 0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      ++pairs;
      num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return num / static_cast<double>(pairs);
}

std::vector<RoutingSample> make_samples(const std::vector<double>& s, const std::vector<int>& small,
                                        const std::vector<int>& large) {
  std::vector<RoutingSample> out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    out.push_back({s[i], static_cast<std::uint8_t>(small[i]), static_cast<std::uint8_t>(large[i]),
                   Modality::kTextOnly, ""});
  }
  return out;
}

TEST(RouteDecision, Examples) {
  EXPECT_EQ(route_decision(0.7, 0.5), 1);
  EXPECT_EQ(route_decision(0.5, 0.5), 1);
  EXPECT_EQ(route_decision(0.2, 0.5), 0);
}

TEST(Auc, Examples) {
  EXPECT_EQ(auc(std::vector<double>{0.9, 0.8, 0.3, 0.2}, std::vector<int>{1, 1, 0, 0}), 1.0);
  EXPECT_EQ(auc(std::vector<double>{0.9, 0.2, 0.8, 0.3}, std::vector<int>{1, 1, 0, 0}), 0.5);
  EXPECT_EQ(auc(std::vector<double>(6, 0.4), std::vector<int>{1, 0, 1, 0, 0, 1}), 0.5);
}

TEST(Auc, Errors) {
  try {
    auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1});
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("AUC undefined"), std::string::npos);
  }
  EXPECT_THROW(auc(std::vector<double>{0.1}, std::vector<int>{1, 0}), std::invalid_argument);
  EXPECT_THROW(auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 2}), std::invalid_argument);
}

TEST(Auc, MatchesPairwiseOracleWithTies) {
  Rng r(1);
  for (int t = 0; t < 200; ++t) {
    const std::size_t m = 2 + r.uniform_int(0, 48);
    std::vector<double> s(m);
    std::vector<int> y(m);
    for (std::size_t i = 0; i < m; ++i) {
      s[i] = static_cast<double>(r.uniform_int(0, 9)) / 10.0;  // coarse grid forces ties
      y[i] = static_cast<int>(r.uniform_int(0, 1));
    }
    y[0] = 1;
    y[1] = 0;
    EXPECT_EQ(auc(s, y), pairwise_auc(s, y));
  }
}

TEST(Auc, InvariantUnderMonotoneTransform) {
  Rng r(2);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> s(40), g;
    std::vector<int> y(40);
    for (std::size_t i = 0; i < 40; ++i) {
      s[i] = r.normal();
      y[i] = static_cast<int>(i % 2);
    }
    for (double v : s) g.push_back(std::exp(3 * v) + 7);
    EXPECT_NEAR(auc(s, y), auc(g, y), 1e-9);
  }
}

TEST(Sweep, HandExample) {
  const auto samples = make_samples({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}, {1, 1, 1, 1});
  const std::vector<double> ratios{0.5};
  const auto res = sweep(samples, ratios);
  EXPECT_EQ(res[0].count_routed, 2u);
  EXPECT_EQ(res[0].system_accuracy, 1.0);
}

TEST(Sweep, Endpoints) {
  Rng r(3);
  for (int t = 0; t < 100; ++t) {
    const std::size_t m = 1 + r.uniform_int(0, 60);
    std::vector<double> s(m);
    std::vector<int> a(m), b(m);
    double ms = 0, ml = 0;
    for (std::size_t i = 0; i < m; ++i) {
      s[i] = r.uniform();
      a[i] = static_cast<int>(r.uniform_int(0, 1));
      b[i] = static_cast<int>(r.uniform_int(0, 1));
      ms += a[i];
      ml += b[i];
    }
    ms /= static_cast<double>(m);
    ml /= static_cast<double>(m);
    const std::vector<double> ratios{0.0, 0.5, 1.0};
    const auto res = sweep(make_samples(s, a, b), ratios);
    EXPECT_EQ(res[0].system_accuracy, ms);
    EXPECT_EQ(res[2].system_accuracy, ml);
    EXPECT_EQ(res[0].count_routed, 0u);
    EXPECT_EQ(res[2].count_routed, m);
    EXPECT_EQ(res[2].system_accuracy - res[0].system_accuracy, ml - ms);
  }
}

TEST(Sweep, MatchesDirectRouting) {
  Rng r(4);
  const std::size_t m = 37;
  std::vector<double> s(m);
  std::vector<int> a(m), b(m);
  for (std::size_t i = 0; i < m; ++i) {
    s[i] = static_cast<double>(r.uniform_int(0, 5));  // ties
    a[i] = static_cast<int>(r.uniform_int(0, 1));
    b[i] = static_cast<int>(r.uniform_int(0, 1));
  }
  const auto samples = make_samples(s, a, b);
  std::vector<double> ratios;
  for (int k = 0; k <= 20; ++k) ratios.push_back(k / 20.0);
  const auto res = sweep(samples, ratios);
  for (const auto& p : res) {
    // Route the k lowest, ties by input order, counted directly.
    const auto k = static_cast<std::size_t>(std::floor(p.ratio * m + 1e-9));
    std::vector<std::size_t> idx(m);
    for (std::size_t i = 0; i < m; ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](auto x, auto y) { return s[x] < s[y]; });
    std::size_t correct = 0;
    for (std::size_t j = 0; j < m; ++j) correct += j < k ? b[idx[j]] : a[idx[j]];
    EXPECT_EQ(p.count_routed, k);
    EXPECT_EQ(p.system_accuracy, static_cast<double>(correct) / m);
  }
}

TEST(Sweep, RouteDecisionAgrees) {
  // With distinct scores, thresholding at the (k+1)-th lowest score defers
  // exactly the sweep's routed set at h = k/m.
  Rng r(5);
  const std::size_t m = 20;
  std::vector<double> s(m);
  std::vector<int> a(m), b(m);
  for (std::size_t i = 0; i < m; ++i) {
    s[i] = r.uniform();
    a[i] = static_cast<int>(r.uniform_int(0, 1));
    b[i] = static_cast<int>(r.uniform_int(0, 1));
  }
  auto sorted = s;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t k = 0; k < m; ++k) {
    const double tau = sorted[k];
    std::size_t correct = 0, deferred = 0;
    for (std::size_t i = 0; i < m; ++i) {
      const bool small = route_decision(s[i], tau) == 1;
      deferred += !small;
      correct += small ? a[i] : b[i];
    }
    ASSERT_EQ(deferred, k);
    const std::vector<double> ratios{static_cast<double>(k) / m};
    EXPECT_EQ(sweep(make_samples(s, a, b), ratios)[0].system_accuracy, static_cast<double>(correct) / m);
  }
}

TEST(Sweep, RoutedCountTolerance) {
  EXPECT_EQ(routed_count(0.29, 100), 29u);
  EXPECT_EQ(routed_count(0.5, 5), 2u);
  EXPECT_EQ(routed_count(1.0, 7), 7u);
}

TEST(Sweep, Errors) {
  const std::vector<double> ok{0.5};
  EXPECT_THROW(sweep({}, ok), std::invalid_argument);
  const auto s = make_samples({0.1}, {1}, {1});
  EXPECT_THROW(sweep(s, std::vector<double>{1.5}), std::invalid_argument);
  EXPECT_THROW(sweep(s, std::vector<double>{0.5, 0.2}), std::invalid_argument);
}

TEST(DeltaAuc, ReferenceRows) {
  EXPECT_NEAR(delta_auc(82.03, std::vector<double>{77.31, 76.84, 76.05}), 5.30, 0.005);
  EXPECT_NEAR(delta_auc(86.17, std::vector<double>{86.05, 84.21, 83.92}), 1.44, 0.01);
  EXPECT_EQ(delta_auc(0.8, std::vector<double>{0.8, 0.8, 0.8}), 0.0);
  EXPECT_THROW(delta_auc(0.8, std::vector<double>{}), std::invalid_argument);
}

TEST(DeltaAuc, Linearity) {
  Rng r(6);
  for (int t = 0; t < 100; ++t) {
    const double c = r.uniform(), p = r.uniform(), q = r.uniform();
    EXPECT_NEAR(delta_auc(c, std::vector<double>{p}) + delta_auc(c, std::vector<double>{q}),
                2 * delta_auc(c, std::vector<double>{p, q}), 1e-9);
  }
}

// Exhaustive scan: every distinct score plus +inf, smallest best wins.
double scan_threshold(const std::vector<RoutingSample>& v) {
  std::set<double> cands;
  for (const auto& s : v) cands.insert(s.score);
  cands.insert(std::numeric_limits<double>::infinity());
  double best_tau = 0;
  std::size_t best = 0;
  bool first = true;
  for (double tau : cands) {
    std::size_t correct = 0;
    for (const auto& s : v) correct += route_decision(s.score, tau) == s.small_correct;
    if (first || correct > best) {
      best = correct;
      best_tau = tau;
      first = false;
    }
  }
  return best_tau;
}

TEST(Calibrate, SeparatedScores) {
  const auto v = make_samples({0.9, 0.8, 0.85, 0.3, 0.1, 0.2}, {1, 1, 1, 0, 0, 0}, {1, 1, 1, 1, 1, 1});
  const auto c = calibrate_threshold(v);
  EXPECT_EQ(c.threshold, 0.8);
  EXPECT_EQ(c.accuracy, 1.0);
}

TEST(Calibrate, SingleClassRejected) {
  EXPECT_THROW(calibrate_threshold(make_samples({0.1, 0.2}, {1, 1}, {1, 1})), std::invalid_argument);
}

TEST(Calibrate, MatchesExhaustiveScan) {
  Rng r(7);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> s(100);
    std::vector<int> y(100), z(100, 0);
    for (std::size_t i = 0; i < 100; ++i) {
      s[i] = static_cast<double>(r.uniform_int(0, 30)) / 30.0;
      y[i] = static_cast<int>(r.uniform_int(0, 1));
    }
    y[0] = 1;
    y[1] = 0;
    const auto v = make_samples(s, y, z);
    EXPECT_EQ(calibrate_threshold(v).threshold, scan_threshold(v));
  }
}

TEST(Calibrate, MostlyNegativeDefersEverything) {
  const auto v = make_samples({0.9, 0.1, 0.2, 0.3}, {0, 1, 0, 0}, {1, 1, 1, 1});
  EXPECT_EQ(calibrate_threshold(v).threshold, std::numeric_limits<double>::infinity());
  EXPECT_EQ(calibrate_threshold(v).accuracy, 0.75);
}

Dataset noise_dataset(std::size_t m) {
  Rng r(8);
  Dataset ds;
  ds.dim = 5;
  for (std::size_t i = 0; i < m; ++i) {
    Sample s;
    s.small_correct = static_cast<std::uint8_t>(i % 2);
    s.tokens = Matrix(6, 5);
    for (auto& v : s.tokens.flat()) v = static_cast<float>(r.normal());
    ds.samples.push_back(s);
  }
  return ds;
}

TEST(Perturb, ZeroMagnitudeIsIdentity) {
  const Dataset ds = noise_dataset(10);
  Rng r(9);
  for (auto k : {PerturbKind::kGaussianNoise, PerturbKind::kQuantize, PerturbKind::kSmooth}) {
    EXPECT_TRUE(perturb_features(ds, k, 0.0, r) == ds);
  }
}

TEST(Perturb, Quantize) {
  Dataset ds;
  ds.dim = 3;
  Sample s;
  s.tokens = Matrix(1, 3, std::vector<float>{0.4f, 0.6f, -1.7f});
  ds.samples.push_back(s);
  Rng r(1);
  const auto out = perturb_features(ds, PerturbKind::kQuantize, 1.0, r);
  EXPECT_EQ(out.samples[0].tokens(0, 0), 0.0f);
  EXPECT_EQ(out.samples[0].tokens(0, 1), 1.0f);
  EXPECT_EQ(out.samples[0].tokens(0, 2), -2.0f);
}

TEST(Perturb, GaussianNoiseStd) {
  Dataset ds;
  ds.dim = 100;
  Sample s;
  s.tokens = Matrix(100, 100);
  ds.samples.push_back(s);
  Rng r(10);
  const auto out = perturb_features(ds, PerturbKind::kGaussianNoise, 0.1, r);
  double s2 = 0;
  for (float v : out.samples[0].tokens.flat()) s2 += v * v;
  EXPECT_NEAR(std::sqrt(s2 / 1e4), 0.1, 0.005);
}

TEST(Perturb, SmoothAveragesNeighbours) {
  Dataset ds;
  ds.dim = 1;
  Sample s;
  s.tokens = Matrix(5, 1, std::vector<float>{0, 0, 1, 0, 0});
  ds.samples.push_back(s);
  Rng r(1);
  const auto out = perturb_features(ds, PerturbKind::kSmooth, 1.0, r).samples[0].tokens;
  // Interior token: kernel exp(-o^2/2) for |o| <= 3, normalized.
  double norm = 0;
  for (int o = -2; o <= 2; ++o) norm += std::exp(-0.5 * o * o);
  EXPECT_NEAR(out(2, 0), 1.0 / norm, 1e-6);
  EXPECT_NEAR(out(1, 0), out(3, 0), 1e-7);
  EXPECT_GT(out(1, 0), out(0, 0));
  // Constant rows stay constant.
  Sample c;
  c.tokens = Matrix(4, 1, 2.5f);
  ds.samples = {c};
  const auto flat = perturb_features(ds, PerturbKind::kSmooth, 2.0, r);
  for (float v : flat.samples[0].tokens.flat()) EXPECT_NEAR(v, 2.5f, 1e-6);
}

TEST(Perturb, LabelsUntouchedAndKindNames) {
  const Dataset ds = noise_dataset(8);
  Rng r(11);
  const auto out = perturb_features(ds, PerturbKind::kGaussianNoise, 1.0, r);
  for (std::size_t i = 0; i < ds.size(); ++i) EXPECT_EQ(out.samples[i].small_correct, ds.samples[i].small_correct);
  for (auto k : {PerturbKind::kGaussianNoise, PerturbKind::kQuantize, PerturbKind::kSmooth}) {
    EXPECT_EQ(perturb_kind_from_string(to_string(k)), k);
  }
  EXPECT_THROW(perturb_kind_from_string("jpeg"), std::invalid_argument);
  EXPECT_THROW(perturb_features(ds, PerturbKind::kQuantize, -1.0, r), std::invalid_argument);
  EXPECT_EQ(default_perturbations().size(), 3u);
}

}  // namespace
}  // namespace proberoute
