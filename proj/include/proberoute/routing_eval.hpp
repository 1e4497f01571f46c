// Copyright 2026 The proberoute Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "proberoute/core_math.hpp"
#include "proberoute/dataio.hpp"

namespace proberoute {

struct RoutingSample {
  double score = 0.0;  ///< predicted probability that the small model is correct
  std::uint8_t small_correct = 0;
  std::uint8_t large_correct = 0;
  Modality modality = Modality::kTextOnly;
  std::string tag;
};

/// 1 keeps the query on the small model, 0 defers it. Ties stay small.
inline int route_decision(double score, double threshold) { return score >= threshold ? 1 : 0; }

// ---------------------------------------------------------------------------
// AUC
// ---------------------------------------------------------------------------

/// Mann-Whitney AUC through mid-ranks: tied scores share the average rank,
/// which counts each tied (positive, negative) pair as one half. Ranks are
/// kept doubled so the statistic stays an exact integer.
inline double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auc: length mismatch");
  const std::size_t m = scores.size();
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::uint64_t pos = 0;
  std::uint64_t doubled_rank_sum = 0;
  std::size_t i = 0;
  while (i < m) {
    std::size_t j = i;
    while (j < m && scores[order[j]] == scores[order[i]]) ++j;
    // 1-based ranks i+1..j share the mid-rank (i+1+j)/2.
    const std::uint64_t doubled_mid = i + 1 + j;
    for (std::size_t t = i; t < j; ++t) {
      if (labels[order[t]] == 1) {
        ++pos;
        doubled_rank_sum += doubled_mid;
      } else if (labels[order[t]] != 0) {
        throw std::invalid_argument("auc: labels must be 0 or 1");
      }
    }
    i = j;
  }
  const std::uint64_t neg = m - pos;
  if (pos == 0 || neg == 0) throw std::invalid_argument("AUC undefined: single-class labels");
  const std::uint64_t doubled_u = doubled_rank_sum - pos * (pos + 1);
  return static_cast<double>(doubled_u) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

inline double auc(const std::vector<RoutingSample>& samples) {
  std::vector<double> s;
  std::vector<int> y;
  s.reserve(samples.size());
  y.reserve(samples.size());
  for (const auto& r : samples) {
    s.push_back(r.score);
    y.push_back(r.small_correct);
  }
  return auc(s, y);
}

// ---------------------------------------------------------------------------
// Routing-ratio sweep
// ---------------------------------------------------------------------------

struct SweepPoint {
  double ratio;
  double system_accuracy;
  std::size_t count_routed;
};

using SweepResult = std::vector<SweepPoint>;

/// Number of queries routed at ratio h: floor(h * m), with a small
/// tolerance so that e.g. 0.29 * 100 routes 29 rather than 28.
inline std::size_t routed_count(double ratio, std::size_t m) {
  const double x = ratio * static_cast<double>(m);
  return std::min(m, static_cast<std::size_t>(std::floor(x + 1e-9)));
}

/// For each ratio h, the floor(h*m) lowest-scoring samples go to the large
/// model (ties by input order); accuracy is the mean correctness of the model
/// each sample ends up on.
inline SweepResult sweep(const std::vector<RoutingSample>& samples, std::span<const double> ratios) {
  if (samples.empty()) throw std::invalid_argument("sweep: no samples");
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    if (!(ratios[i] >= 0.0 && ratios[i] <= 1.0)) throw std::invalid_argument("sweep: ratio outside [0, 1]");
    if (i > 0 && !(ratios[i] > ratios[i - 1])) {
      throw std::invalid_argument("sweep: ratios must be strictly increasing");
    }
  }
  const std::size_t m = samples.size();
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return samples[a].score < samples[b].score;
  });
  // prefix_large[k] - prefix_small[k]: gain from routing the k hardest.
  std::vector<std::int64_t> gain(m + 1, 0);
  std::int64_t small_total = 0;
  for (std::size_t k = 0; k < m; ++k) {
    const auto& s = samples[order[k]];
    gain[k + 1] = gain[k] + static_cast<std::int64_t>(s.large_correct) -
                  static_cast<std::int64_t>(s.small_correct);
    small_total += s.small_correct;
  }
  SweepResult out;
  out.reserve(ratios.size());
  for (double h : ratios) {
    const std::size_t k = routed_count(h, m);
    const std::int64_t correct = small_total + gain[k];
    out.push_back({h, static_cast<double>(correct) / static_cast<double>(m), k});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Threshold calibration
// ---------------------------------------------------------------------------

struct Calibration {
  double threshold;
  double accuracy;  ///< fraction where route_decision agrees with small_correct
};

/// Threshold maximizing agreement between route_decision and small_correct.
/// Candidates are every distinct score plus +inf (route everything); ties
/// between equally good candidates go to the smallest.
inline Calibration calibrate_threshold(const std::vector<RoutingSample>& validation) {
  const std::size_t m = validation.size();
  std::size_t pos_total = 0;
  for (const auto& s : validation) pos_total += s.small_correct;
  if (pos_total == 0 || pos_total == m) {
    throw std::invalid_argument("calibrate_threshold: validation set has a single class");
  }
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return validation[a].score < validation[b].score;
  });
  // Sweeping tau upward over distinct scores: everything below tau is deferred.
  std::size_t neg_below = 0, pos_below = 0;
  std::size_t best_correct = 0;
  double best_tau = std::numeric_limits<double>::infinity();
  bool have_best = false;
  std::size_t i = 0;
  while (i < m) {
    const double tau = validation[order[i]].score;
    const std::size_t correct = neg_below + (pos_total - pos_below);
    if (!have_best || correct > best_correct) {
      best_correct = correct;
      best_tau = tau;
      have_best = true;
    }
    while (i < m && validation[order[i]].score == tau) {
      (validation[order[i]].small_correct ? pos_below : neg_below)++;
      ++i;
    }
  }
  const std::size_t all_deferred = m - pos_total;
  if (all_deferred > best_correct) {
    best_correct = all_deferred;
    best_tau = std::numeric_limits<double>::infinity();
  }
  return {best_tau, static_cast<double>(best_correct) / static_cast<double>(m)};
}

// ---------------------------------------------------------------------------
// Robustness
// ---------------------------------------------------------------------------

/// clean - mean(perturbed). Negative means the perturbations helped.
inline double delta_auc(double clean_auc, std::span<const double> perturbed_aucs) {
  if (perturbed_aucs.empty()) throw std::invalid_argument("delta_auc: no perturbed AUCs");
  // Mean of the per-kind drops; equal AUCs give exactly 0.
  double sum = 0.0;
  for (double a : perturbed_aucs) sum += clean_auc - a;
  return sum / static_cast<double>(perturbed_aucs.size());
}

enum class PerturbKind { kGaussianNoise, kQuantize, kSmooth };

inline const char* to_string(PerturbKind k) {
  switch (k) {
    case PerturbKind::kGaussianNoise: return "gaussian_noise";
    case PerturbKind::kQuantize: return "quantize";
    case PerturbKind::kSmooth: return "smooth";
  }
  return "?";
}

inline PerturbKind perturb_kind_from_string(const std::string& s) {
  for (auto k : {PerturbKind::kGaussianNoise, PerturbKind::kQuantize, PerturbKind::kSmooth}) {
    if (s == to_string(k)) return k;
  }
  throw std::invalid_argument("unknown perturbation kind '" + s + "'");
}

struct PerturbSpec {
  PerturbKind kind;
  double magnitude;
};

/// Default magnitudes, one per perturbation kind.
inline std::vector<PerturbSpec> default_perturbations() {
  return {{PerturbKind::kGaussianNoise, 0.5}, {PerturbKind::kQuantize, 1.0}, {PerturbKind::kSmooth, 1.0}};
}

/// Feature-space perturbations; labels and metadata are untouched.
///  - gaussian_noise: x += N(0, magnitude^2)
///  - quantize:       x = round(x / magnitude) * magnitude
///  - smooth:         Gaussian-weighted average over neighbouring tokens with
///                    std `magnitude` (in tokens), truncated at 3 std.
inline Dataset perturb_features(const Dataset& ds, PerturbKind kind, double magnitude, Rng& rng) {
  if (!(magnitude >= 0.0)) throw std::invalid_argument("perturb: magnitude must be >= 0");
  Dataset out = ds;
  if (magnitude == 0.0) return out;
  for (auto& s : out.samples) {
    auto flat = s.tokens.flat();
    switch (kind) {
      case PerturbKind::kGaussianNoise:
        for (auto& v : flat) v = static_cast<float>(v + magnitude * rng.normal());
        break;
      case PerturbKind::kQuantize:
        for (auto& v : flat) v = static_cast<float>(std::round(v / magnitude) * magnitude);
        break;
      case PerturbKind::kSmooth: {
        const std::size_t n = s.tokens.rows(), d = s.tokens.cols();
        const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * magnitude));
        std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
        for (std::ptrdiff_t o = -radius; o <= radius; ++o) {
          kernel[static_cast<std::size_t>(o + radius)] =
              std::exp(-0.5 * static_cast<double>(o * o) / (magnitude * magnitude));
        }
        const Matrix src = s.tokens;
        for (std::size_t i = 0; i < n; ++i) {
          double wsum = 0.0;
          std::vector<double> acc(d, 0.0);
          for (std::ptrdiff_t o = -radius; o <= radius; ++o) {
            const std::ptrdiff_t j = static_cast<std::ptrdiff_t>(i) + o;
            if (j < 0 || j >= static_cast<std::ptrdiff_t>(n)) continue;
            const double kw = kernel[static_cast<std::size_t>(o + radius)];
            wsum += kw;
            const auto r = src.row(static_cast<std::size_t>(j));
            for (std::size_t c = 0; c < d; ++c) acc[c] += kw * r[c];
          }
          auto dst = s.tokens.row(i);
          for (std::size_t c = 0; c < d; ++c) dst[c] = static_cast<float>(acc[c] / wsum);
        }
        break;
      }
    }
  }
  return out;
}

}  // namespace proberoute
