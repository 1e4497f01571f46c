// Copyright 2026 The proberoute Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "proberoute/backbone.hpp"
#include "proberoute/core_math.hpp"

namespace proberoute {

// ---------------------------------------------------------------------------
// Last-token feature
// ---------------------------------------------------------------------------

/// Final row of a hidden-state matrix.
template <typename T>
std::vector<T> last_token_feature(const BasicMatrix<T>& states) {
  if (states.rows() == 0) throw std::invalid_argument("last_token_feature: empty states");
  const auto r = states.row(states.rows() - 1);
  return {r.begin(), r.end()};
}

// ---------------------------------------------------------------------------
// MLP probe: five affine layers, ReLU between them, one output logit.
// Widths: input -> d -> d/2 -> d/4 -> d/8 -> 1.
// ---------------------------------------------------------------------------

inline constexpr std::size_t kProbeLayers = 5;

template <typename T>
struct MlpProbe {
  std::vector<BasicParam<T>> weights;  ///< out x in
  std::vector<BasicParam<T>> biases;   ///< 1 x out

  std::size_t input_dim() const { return weights.front().value.cols(); }

  std::vector<BasicParam<T>*> params() {
    std::vector<BasicParam<T>*> out;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      out.push_back(&weights[i]);
      out.push_back(&biases[i]);
    }
    return out;
  }
};

inline std::vector<std::size_t> probe_widths(std::size_t input_dim, std::size_t hidden_dim) {
  std::vector<std::size_t> w = {input_dim};
  for (std::size_t div : {1, 2, 4, 8}) w.push_back(std::max<std::size_t>(1, hidden_dim / div));
  w.push_back(1);
  return w;
}

// Small positive hidden bias: keeps ReLUs off their kink when a whole
// upstream layer is inactive.
template <typename T>
inline constexpr T kHiddenBiasInit = T(0.01);

/// He-normal hidden layers, 1/sqrt(fan_in) output layer, zero output bias.
/// `zero_init` gives an all-zero probe (logit 0 everywhere).
template <typename T>
MlpProbe<T> make_mlp_probe(std::size_t input_dim, std::size_t hidden_dim, Rng& rng,
                           bool zero_init = false) {
  if (input_dim == 0 || hidden_dim == 0) throw std::invalid_argument("probe: zero dimension");
  const auto widths = probe_widths(input_dim, hidden_dim);
  MlpProbe<T> p;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const std::size_t in = widths[i], out = widths[i + 1];
    const bool last = i + 2 == widths.size();
    const double scale = std::sqrt((last ? 1.0 : 2.0) / static_cast<double>(in));
    const std::string pre = "probe." + std::to_string(i) + ".";
    p.weights.emplace_back(pre + "w", zero_init ? BasicMatrix<T>(out, in)
                                                : gaussian_matrix<T>(out, in, scale, rng));
    p.biases.emplace_back(pre + "b", BasicMatrix<T>(1, out, (last || zero_init) ? T{0} : kHiddenBiasInit<T>));
  }
  return p;
}

template <typename T>
struct MlpTape {
  std::vector<std::vector<T>> inputs;  ///< input of each affine layer (post-ReLU)
  std::vector<std::vector<T>> pre;     ///< pre-activation of each affine layer
};

template <typename T>
struct Prediction {
  T logit;
  T prob;
};

template <typename T>
T mlp_logit(const MlpProbe<T>& probe, std::span<const T> feature, MlpTape<T>* tape = nullptr) {
  if (feature.size() != probe.input_dim()) {
    throw std::invalid_argument("probe: feature dim " + std::to_string(feature.size()) +
                                " != " + std::to_string(probe.input_dim()));
  }
  std::vector<T> x(feature.begin(), feature.end());
  if (tape != nullptr) {
    tape->inputs.clear();
    tape->pre.clear();
  }
  for (std::size_t li = 0; li < probe.weights.size(); ++li) {
    const auto& w = probe.weights[li].value;
    std::vector<T> y(w.rows());
    matvec(w, std::span<const T>(x), std::span<T>(y));
    for (std::size_t j = 0; j < y.size(); ++j) y[j] += probe.biases[li].value(0, j);
    if (tape != nullptr) {
      tape->inputs.push_back(x);
      tape->pre.push_back(y);
    }
    if (li + 1 < probe.weights.size()) {
      for (auto& v : y) v = std::max(v, T{0});
    }
    x = std::move(y);
  }
  return x[0];
}

template <typename T>
Prediction<T> mlp_predict(const MlpProbe<T>& probe, std::span<const T> feature) {
  const T logit = mlp_logit(probe, feature);
  return {logit, sigmoid(logit)};
}

/// Accumulates probe grads; adds d logit / d feature into `dfeature` if non-empty.
template <typename T>
void mlp_backward(MlpProbe<T>& probe, const MlpTape<T>& tape, T dlogit, std::span<T> dfeature) {
  std::vector<T> dy = {dlogit};
  for (std::size_t li = probe.weights.size(); li-- > 0;) {
    auto& w = probe.weights[li];
    auto& b = probe.biases[li];
    if (li + 1 < probe.weights.size()) {
      const auto& pre = tape.pre[li];
      for (std::size_t j = 0; j < dy.size(); ++j) {
        if (pre[j] <= T{0}) dy[j] = T{0};
      }
    }
    if (b.trainable) {
      for (std::size_t j = 0; j < dy.size(); ++j) b.grad(0, j) += dy[j];
    }
    const bool need_dx = li > 0 || !dfeature.empty();
    std::vector<T> dx(need_dx ? w.value.cols() : 0, T{0});
    matvec_backward(w.value, std::span<const T>(tape.inputs[li]), std::span<const T>(dy),
                    w.trainable ? &w.grad : nullptr, std::span<T>(dx));
    if (li == 0) {
      for (std::size_t j = 0; j < dfeature.size(); ++j) dfeature[j] += dx[j];
    }
    dy = std::move(dx);
  }
}

// ---------------------------------------------------------------------------
// Attention pooling with one learned query over layer l-1 states.
// ---------------------------------------------------------------------------

template <typename T>
struct AttentionQuery {
  BasicParam<T> q;  ///< 1 x d

  std::size_t dim() const { return q.value.cols(); }
};

template <typename T>
AttentionQuery<T> make_attention_query(std::size_t d, Rng& rng) {
  return {BasicParam<T>("q", gaussian_matrix<T>(1, d, 1.0 / std::sqrt(static_cast<double>(d)), rng))};
}

/// Weighted mean of the rows with weights softmax(q . z_i / sqrt(d)).
/// `weights_out`, when given, receives the pooling weights.
template <typename T>
std::vector<T> attention_aggregate(const BasicMatrix<T>& states, const AttentionQuery<T>& query,
                                   std::vector<T>* weights_out = nullptr) {
  const std::size_t n = states.rows(), d = states.cols();
  if (n == 0) throw std::invalid_argument("attention_aggregate: empty states");
  if (query.dim() != d) {
    throw std::invalid_argument("attention_aggregate: query dim " + std::to_string(query.dim()) +
                                " != state dim " + std::to_string(d));
  }
  const T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
  std::vector<T> scores(n);
  for (std::size_t i = 0; i < n; ++i) {
    scores[i] = dot(std::span<const T>(query.q.value.row(0)), states.row(i)) * inv;
  }
  auto beta = softmax(std::span<const T>(scores));
  std::vector<T> out(d, T{0});
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = states.row(i);
    for (std::size_t j = 0; j < d; ++j) out[j] += beta[i] * r[j];
  }
  if (weights_out != nullptr) *weights_out = std::move(beta);
  return out;
}

/// dq += sum_i ds_i z_i / sqrt(d), with ds the softmax backward of
/// dbeta_i = dz . z_i. The states are frozen.
template <typename T>
void attention_aggregate_backward(const BasicMatrix<T>& states, AttentionQuery<T>& query,
                                  std::span<const T> weights, std::span<const T> dpooled) {
  if (!query.q.trainable) return;
  const std::size_t n = states.rows(), d = states.cols();
  const T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
  std::vector<T> dbeta(n), ds(n);
  for (std::size_t i = 0; i < n; ++i) dbeta[i] = dot(dpooled, states.row(i));
  softmax_backward(weights, std::span<const T>(dbeta), std::span<T>(ds));
  for (std::size_t i = 0; i < n; ++i) {
    const T g = ds[i] * inv;
    const auto r = states.row(i);
    for (std::size_t j = 0; j < d; ++j) query.q.grad(0, j) += g * r[j];
  }
}

// ---------------------------------------------------------------------------
// Variational bottleneck heads
// ---------------------------------------------------------------------------

inline constexpr double kLogVarClamp = 10.0;

template <typename T>
struct VibHeads {
  BasicParam<T> mu_w, mu_b;          ///< k x d, 1 x k
  BasicParam<T> logvar_w, logvar_b;  ///< k x d, 1 x k

  std::size_t input_dim() const { return mu_w.value.cols(); }
  std::size_t bottleneck_dim() const { return mu_w.value.rows(); }

  std::vector<BasicParam<T>*> params() { return {&mu_w, &mu_b, &logvar_w, &logvar_b}; }
};


template <typename T>
VibHeads<T> make_vib_heads(std::size_t d, std::size_t k, Rng& rng) {
  if (d == 0 || k == 0) throw std::invalid_argument("vib: zero dimension");
  // mu starts small and logvar at exactly 0, so the posterior begins next to
  // the prior instead of paying a large KL on step one.
  const double s = 0.25 / std::sqrt(static_cast<double>(d));
  VibHeads<T> h;
  h.mu_w = BasicParam<T>("vib.mu.w", gaussian_matrix<T>(k, d, s, rng));
  h.mu_b = BasicParam<T>("vib.mu.b", BasicMatrix<T>(1, k));
  h.logvar_w = BasicParam<T>("vib.logvar.w", BasicMatrix<T>(k, d));
  h.logvar_b = BasicParam<T>("vib.logvar.b", BasicMatrix<T>(1, k));
  return h;
}

enum class VibMode { kSample, kMean };

template <typename T>
struct VibOutput {
  std::vector<T> mu;
  std::vector<T> logvar;  ///< clamped to [-10, 10]
  std::vector<T> sample;  ///< z' = mu + exp(logvar / 2) * eps, or mu in mean mode
  std::vector<bool> clamped;
};

template <typename T>
VibOutput<T> vib_forward(std::span<const T> z, const VibHeads<T>& heads, VibMode mode,
                         std::span<const T> eps = {}) {
  const std::size_t k = heads.bottleneck_dim();
  if (z.size() != heads.input_dim()) throw std::invalid_argument("vib: input dim mismatch");
  if (mode == VibMode::kSample && eps.size() != k) {
    throw std::invalid_argument("vib: sample mode needs " + std::to_string(k) + " noise values");
  }
  VibOutput<T> out;
  out.mu.resize(k);
  out.logvar.resize(k);
  out.clamped.assign(k, false);
  matvec(heads.mu_w.value, z, std::span<T>(out.mu));
  matvec(heads.logvar_w.value, z, std::span<T>(out.logvar));
  const T lim = static_cast<T>(kLogVarClamp);
  for (std::size_t j = 0; j < k; ++j) {
    out.mu[j] += heads.mu_b.value(0, j);
    const T raw = out.logvar[j] + heads.logvar_b.value(0, j);
    out.clamped[j] = raw < -lim || raw > lim;
    out.logvar[j] = std::clamp(raw, -lim, lim);
  }
  out.sample = out.mu;
  if (mode == VibMode::kSample) {
    for (std::size_t j = 0; j < k; ++j) {
      out.sample[j] = out.mu[j] + std::exp(T{0.5} * out.logvar[j]) * eps[j];
    }
  }
  return out;
}

/// Backward through the heads for the objective  f(z') + kl_weight * KL(mu, logvar).
/// Empty `eps` means the forward ran in mean mode. Adds dz into `dz` if non-empty.
template <typename T>
void vib_backward(std::span<const T> z, VibHeads<T>& heads, const VibOutput<T>& out,
                  std::span<const T> eps, std::span<const T> dsample, T kl_weight,
                  std::span<T> dz) {
  const std::size_t k = heads.bottleneck_dim();
  std::vector<T> dmu(dsample.begin(), dsample.end());
  std::vector<T> dlogvar(k, T{0});
  if (!eps.empty()) {
    for (std::size_t j = 0; j < k; ++j) {
      dlogvar[j] = dsample[j] * eps[j] * T{0.5} * std::exp(T{0.5} * out.logvar[j]);
    }
  }
  if (kl_weight != T{0}) {
    kl_diag_gaussian_backward(std::span<const T>(out.mu), std::span<const T>(out.logvar),
                              kl_weight, std::span<T>(dmu), std::span<T>(dlogvar));
  }
  for (std::size_t j = 0; j < k; ++j) {
    if (out.clamped[j]) dlogvar[j] = T{0};
  }
  if (heads.mu_b.trainable) {
    for (std::size_t j = 0; j < k; ++j) heads.mu_b.grad(0, j) += dmu[j];
  }
  if (heads.logvar_b.trainable) {
    for (std::size_t j = 0; j < k; ++j) heads.logvar_b.grad(0, j) += dlogvar[j];
  }
  matvec_backward(heads.mu_w.value, z, std::span<const T>(dmu),
                  heads.mu_w.trainable ? &heads.mu_w.grad : nullptr, dz);
  matvec_backward(heads.logvar_w.value, z, std::span<const T>(dlogvar),
                  heads.logvar_w.trainable ? &heads.logvar_w.grad : nullptr, dz);
}

}  // namespace proberoute
