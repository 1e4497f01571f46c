// Copyright 2026 The proberoute Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "proberoute/dataio.hpp"

namespace proberoute {

/// Synthetic token features whose correctness signal is concentrated on the
/// last token for text-only samples and partly spread over earlier tokens,
/// under orthogonal clutter, for multimodal samples.
struct SyntheticConfig {
  std::size_t num_samples = 4000;
  std::size_t dim = 64;
  std::size_t min_tokens = 8;
  std::size_t max_tokens = 32;
  double signal_strength = 2.0;
  double multimodal_fraction = 0.5;
  double dilution = 0.6;  ///< fraction of the signal moved off the last token (multimodal)
  double distractor_std = 1.5;
  double large_margin = 1.5;
  std::string tag = "synthetic";
  std::uint64_t seed = 0;

  void validate() const {
    if (dim < 4) throw std::invalid_argument("synthetic: dim must be >= 4");
    if (min_tokens < 2 || min_tokens > max_tokens) {
      throw std::invalid_argument("synthetic: need 2 <= min_tokens <= max_tokens");
    }
    if (multimodal_fraction < 0.0 || multimodal_fraction > 1.0) {
      throw std::invalid_argument("synthetic: multimodal_fraction must lie in [0, 1]");
    }
    if (dilution < 0.0 || dilution > 1.0) {
      throw std::invalid_argument("synthetic: dilution must lie in [0, 1]");
    }
    if (signal_strength < 0.0 || distractor_std < 0.0) {
      throw std::invalid_argument("synthetic: strengths must be >= 0");
    }
  }
};

inline constexpr double kLabelNoiseStd = 0.5;

/// Magnitude of the salience marker added to every signal-carrying token.
inline constexpr double kSalience = 12.0;

namespace detail {

inline std::vector<double> unit_direction(std::size_t dim, std::uint64_t seed,
                                          const std::vector<double>* orthogonal_to) {
  Rng rng(seed);
  std::vector<double> v(dim);
  for (auto& x : v) x = rng.normal();
  if (orthogonal_to != nullptr) {
    double proj = 0.0;
    for (std::size_t j = 0; j < dim; ++j) proj += v[j] * (*orthogonal_to)[j];
    for (std::size_t j = 0; j < dim; ++j) v[j] -= proj * (*orthogonal_to)[j];
  }
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return v;
}

}  // namespace detail

/// Fixed unit direction carrying the correctness signal. It does not depend
/// on the dataset seed, so differently seeded datasets share it.
inline std::vector<double> signal_direction(std::size_t dim) {
  return detail::unit_direction(dim, 0x5167'4e41'4cd1'4ec7ULL, nullptr);
}

/// Fixed unit direction orthogonal to signal_direction that marks the tokens
/// carrying signal. It says where the signal is, not what it is.
inline std::vector<double> salience_direction(std::size_t dim) {
  const auto w = signal_direction(dim);
  return detail::unit_direction(dim, 0x9e37'79b9'7f4a'7c15ULL, &w);
}

/// Latent difficulty u ~ N(0,1) drives both labels:
///   small_correct = [u + N(0, 0.5^2) > 0],  large_correct = [u + margin + N(0, 0.5^2) > 0].
/// Features are N(0, I) noise plus u * strength * w. Text-only samples carry
/// the whole signal on the last token. Multimodal samples keep (1 - dilution)
/// of it there, move the rest to one random earlier token, and get N(0, distractor_std^2) clutter orthogonal to w on every token.
inline Dataset generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  Rng rng = Rng::stream(cfg.seed, RngStream::kData);
  const std::size_t d = cfg.dim;
  const auto w = signal_direction(d);
  const auto e = salience_direction(d);
  Dataset ds;
  ds.dim = static_cast<std::uint32_t>(d);
  ds.samples.reserve(cfg.num_samples);

  auto add_signal = [&](std::span<float> row, double amount) {
    for (std::size_t j = 0; j < d; ++j) {
      row[j] = static_cast<float>(row[j] + amount * w[j] + kSalience * e[j]);
    }
  };

  for (std::size_t i = 0; i < cfg.num_samples; ++i) {
    Sample s;
    s.tag = cfg.tag;
    const std::size_t n = rng.uniform_int(cfg.min_tokens, cfg.max_tokens);
    const bool multimodal = rng.uniform() < cfg.multimodal_fraction;
    s.modality = multimodal ? Modality::kMultimodal : Modality::kTextOnly;
    const double u = rng.normal();
    s.small_correct = (u + kLabelNoiseStd * rng.normal()) > 0.0 ? 1 : 0;
    s.large_correct = (u + cfg.large_margin + kLabelNoiseStd * rng.normal()) > 0.0 ? 1 : 0;

    std::vector<float> data(n * d);
    for (auto& v : data) v = static_cast<float>(rng.normal());
    Matrix tokens(n, d, std::move(data));
    const double signal = u * cfg.signal_strength;

    if (!multimodal) {
      add_signal(tokens.row(n - 1), signal);
    } else {
      add_signal(tokens.row(n - 1), (1.0 - cfg.dilution) * signal);
      // The diluted part moves to one random earlier token.
      const std::size_t carrier = rng.uniform_int(0, n - 2);
      add_signal(tokens.row(carrier), cfg.dilution * signal);
      if (cfg.distractor_std > 0.0) {
        std::vector<double> noise(d);
        for (std::size_t t = 0; t < n; ++t) {
          double pw = 0.0, pe = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            noise[j] = cfg.distractor_std * rng.normal();
            pw += noise[j] * w[j];
            pe += noise[j] * e[j];
          }
          auto row = tokens.row(t);
          for (std::size_t j = 0; j < d; ++j) {
            row[j] = static_cast<float>(row[j] + noise[j] - pw * w[j] - pe * e[j]);
          }
        }
      }
    }
    s.tokens = std::move(tokens);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace proberoute
