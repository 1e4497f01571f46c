// Copyright 2026 The proberoute Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "proberoute/core_math.hpp"

namespace proberoute {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct BackboneConfig {
  std::size_t num_layers = 4;
  std::size_t hidden_dim = 64;
  std::size_t num_heads = 4;
  std::size_t ffn_dim = 0;  ///< 0 means 4 * hidden_dim
  std::size_t probe_layer = 3;  ///< 1-based index of the probed layer l
  std::uint64_t init_seed = 0;

  std::size_t ffn() const { return ffn_dim == 0 ? 4 * hidden_dim : ffn_dim; }

  void validate() const {
    if (hidden_dim == 0 || num_heads == 0) throw std::invalid_argument("backbone: zero dimension");
    if (hidden_dim % num_heads != 0) {
      throw std::invalid_argument("backbone: hidden_dim " + std::to_string(hidden_dim) +
                                  " not divisible by num_heads " + std::to_string(num_heads));
    }
    if (num_layers == 0) throw std::invalid_argument("backbone: num_layers must be >= 1");
    if (probe_layer < 1 || probe_layer > num_layers) {
      throw std::invalid_argument("backbone: probe_layer must lie in [1, num_layers]");
    }
  }
};

/// Projections an adapter may attach to inside the probed layer.
enum class LoraTarget : std::uint8_t { kQuery, kKey, kValue, kOutput, kFfnIn, kFfnOut };

inline constexpr std::array<LoraTarget, 6> kAllLoraTargets = {
    LoraTarget::kQuery, LoraTarget::kKey,   LoraTarget::kValue,
    LoraTarget::kOutput, LoraTarget::kFfnIn, LoraTarget::kFfnOut};

inline std::string to_string(LoraTarget t) {
  switch (t) {
    case LoraTarget::kQuery: return "q";
    case LoraTarget::kKey: return "k";
    case LoraTarget::kValue: return "v";
    case LoraTarget::kOutput: return "o";
    case LoraTarget::kFfnIn: return "ffn_in";
    case LoraTarget::kFfnOut: return "ffn_out";
  }
  return "?";
}

inline LoraTarget lora_target_from_string(const std::string& s) {
  for (auto t : kAllLoraTargets) {
    if (to_string(t) == s) return t;
  }
  throw std::invalid_argument("unknown LoRA target '" + s + "'");
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

template <typename T>
struct LayerWeights {
  BasicParam<T> ln1_scale, ln1_offset;
  BasicParam<T> wq, wk, wv, wo;
  BasicParam<T> ln2_scale, ln2_offset;
  BasicParam<T> w1, w2;

  std::vector<BasicParam<T>*> params() {
    return {&ln1_scale, &ln1_offset, &wq, &wk, &wv, &wo, &ln2_scale, &ln2_offset, &w1, &w2};
  }
};

template <typename T>
struct BackboneWeights {
  BackboneConfig config;
  std::vector<LayerWeights<T>> layers;

  std::vector<BasicParam<T>*> params() {
    std::vector<BasicParam<T>*> out;
    for (auto& l : layers) {
      for (auto* p : l.params()) out.push_back(p);
    }
    return out;
  }
};

/// Deterministic frozen weights. Projections reading a d-vector use scale
/// 1/sqrt(d); the FFN down-projection reads ffn_dim inputs and uses
/// 1/sqrt(ffn_dim). The two residual writers (wo, w2) are further scaled by
/// 1/sqrt(2L) so the stream does not blow up with depth.
template <typename T>
BackboneWeights<T> init_backbone(const BackboneConfig& config) {
  config.validate();
  Rng rng = Rng::stream(config.init_seed, RngStream::kInit);
  const std::size_t d = config.hidden_dim, f = config.ffn();
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  const double sf = 1.0 / std::sqrt(static_cast<double>(f));
  const double res = 1.0 / std::sqrt(2.0 * static_cast<double>(config.num_layers));
  BackboneWeights<T> w{config, {}};
  for (std::size_t i = 0; i < config.num_layers; ++i) {
    const std::string pre = "backbone." + std::to_string(i + 1) + ".";
    LayerWeights<T> lw;
    lw.ln1_scale = BasicParam<T>(pre + "ln1_scale", BasicMatrix<T>(1, d, T{1}), false);
    lw.ln1_offset = BasicParam<T>(pre + "ln1_offset", BasicMatrix<T>(1, d), false);
    lw.wq = BasicParam<T>(pre + "wq", gaussian_matrix<T>(d, d, s, rng), false);
    lw.wk = BasicParam<T>(pre + "wk", gaussian_matrix<T>(d, d, s, rng), false);
    lw.wv = BasicParam<T>(pre + "wv", gaussian_matrix<T>(d, d, s, rng), false);
    lw.wo = BasicParam<T>(pre + "wo", gaussian_matrix<T>(d, d, s * res, rng), false);
    lw.ln2_scale = BasicParam<T>(pre + "ln2_scale", BasicMatrix<T>(1, d, T{1}), false);
    lw.ln2_offset = BasicParam<T>(pre + "ln2_offset", BasicMatrix<T>(1, d), false);
    lw.w1 = BasicParam<T>(pre + "w1", gaussian_matrix<T>(f, d, s, rng), false);
    lw.w2 = BasicParam<T>(pre + "w2", gaussian_matrix<T>(d, f, sf * res, rng), false);
    w.layers.push_back(std::move(lw));
  }
  return w;
}

// ---------------------------------------------------------------------------
// LoRA
// ---------------------------------------------------------------------------

template <typename T>
struct LoraPair {
  LoraTarget target;
  BasicParam<T> a;  ///< r x in
  BasicParam<T> b;  ///< out x r
};

/// Low-rank additive corrections (alpha/r) B A on projections of the probed layer.
template <typename T>
struct LoraAdapter {
  std::size_t rank = 8;
  double alpha = 16.0;
  std::vector<LoraPair<T>> pairs;

  T scaling() const { return static_cast<T>(alpha / static_cast<double>(rank)); }

  const LoraPair<T>* find(LoraTarget t) const {
    for (const auto& p : pairs) {
      if (p.target == t) return &p;
    }
    return nullptr;
  }
  LoraPair<T>* find(LoraTarget t) {
    for (auto& p : pairs) {
      if (p.target == t) return &p;
    }
    return nullptr;
  }

  std::vector<BasicParam<T>*> params() {
    std::vector<BasicParam<T>*> out;
    for (auto& p : pairs) {
      out.push_back(&p.a);
      out.push_back(&p.b);
    }
    return out;
  }
};

/// A ~ N(0, 1/r), B = 0, so the adapted layer starts as the frozen one.
template <typename T>
LoraAdapter<T> init_lora(const BackboneConfig& config, std::size_t rank, double alpha,
                         const std::vector<LoraTarget>& targets, Rng& rng) {
  if (rank == 0) throw std::invalid_argument("lora: rank must be >= 1");
  if (targets.empty()) throw std::invalid_argument("lora: no targets");
  const std::size_t d = config.hidden_dim, f = config.ffn();
  const double s = 1.0 / std::sqrt(static_cast<double>(rank));
  LoraAdapter<T> ad;
  ad.rank = rank;
  ad.alpha = alpha;
  for (auto t : targets) {
    if (ad.find(t) != nullptr) throw std::invalid_argument("lora: duplicate target");
    const std::size_t in = t == LoraTarget::kFfnOut ? f : d;
    const std::size_t out = t == LoraTarget::kFfnIn ? f : d;
    const std::string pre = "lora." + to_string(t) + ".";
    ad.pairs.push_back({t, BasicParam<T>(pre + "a", gaussian_matrix<T>(rank, in, s, rng)),
                        BasicParam<T>(pre + "b", BasicMatrix<T>(out, rank))});
  }
  return ad;
}

/// (alpha/r) B (A x).
template <typename T>
std::vector<T> lora_delta(std::span<const T> x, const BasicMatrix<T>& a, const BasicMatrix<T>& b,
                          double alpha, std::size_t rank) {
  if (rank == 0) throw std::invalid_argument("lora: rank must be >= 1");
  if (a.rows() != rank || b.cols() != rank || a.cols() != x.size()) {
    throw std::invalid_argument("lora: shape mismatch");
  }
  const T s = static_cast<T>(alpha / static_cast<double>(rank));
  std::vector<T> t(rank), out(b.rows());
  matvec(a, x, std::span<T>(t));
  matvec(b, std::span<const T>(t), std::span<T>(out));
  for (auto& v : out) v *= s;
  return out;
}

/// Accumulates dA, dB for delta = s B A x. Input gradient is not produced
/// because adapter inputs come from frozen layers.
template <typename T>
void lora_delta_backward(std::span<const T> x, LoraPair<T>& pair, T scaling,
                         std::span<const T> ddelta) {
  const std::size_t r = pair.a.value.rows();
  std::vector<T> t(r), dt(r, T{0});
  matvec(pair.a.value, x, std::span<T>(t));
  std::vector<T> dd(ddelta.begin(), ddelta.end());
  for (auto& v : dd) v *= scaling;
  matvec_backward(pair.b.value, std::span<const T>(t), std::span<const T>(dd),
                  pair.b.trainable ? &pair.b.grad : nullptr, std::span<T>(dt));
  matvec_backward(pair.a.value, x, std::span<const T>(dt),
                  pair.a.trainable ? &pair.a.grad : nullptr, std::span<T>());
}

// ---------------------------------------------------------------------------
// Row kernels shared by the full forward and the last-token path
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
struct NormStats {
  T mean;
  T rstd;
};

template <typename T>
NormStats<T> layer_norm_row(std::span<const T> x, const BasicMatrix<T>& scale,
                            const BasicMatrix<T>& offset, std::span<T> out) {
  const std::size_t d = x.size();
  T mean = T{0};
  for (T v : x) mean += v;
  mean /= static_cast<T>(d);
  T var = T{0};
  for (T v : x) var += (v - mean) * (v - mean);
  var /= static_cast<T>(d);
  const T rstd = T{1} / std::sqrt(var + static_cast<T>(kLayerNormEps));
  for (std::size_t i = 0; i < d; ++i) {
    out[i] = (x[i] - mean) * rstd * scale(0, i) + offset(0, i);
  }
  return {mean, rstd};
}

/// dx += LN backward given dy, frozen scale/offset.
template <typename T>
void layer_norm_row_backward(std::span<const T> x, NormStats<T> st, const BasicMatrix<T>& scale,
                             std::span<const T> dy, std::span<T> dx) {
  const std::size_t d = x.size();
  std::vector<T> xhat(d), dxhat(d);
  T mean_dxhat = T{0}, mean_dxhat_xhat = T{0};
  for (std::size_t i = 0; i < d; ++i) {
    xhat[i] = (x[i] - st.mean) * st.rstd;
    dxhat[i] = dy[i] * scale(0, i);
    mean_dxhat += dxhat[i];
    mean_dxhat_xhat += dxhat[i] * xhat[i];
  }
  mean_dxhat /= static_cast<T>(d);
  mean_dxhat_xhat /= static_cast<T>(d);
  for (std::size_t i = 0; i < d; ++i) {
    dx[i] += st.rstd * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
  }
}

template <typename T>
T gelu(T u) {
  const T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  return T{0.5} * u * (T{1} + std::tanh(c * (u + static_cast<T>(0.044715) * u * u * u)));
}

template <typename T>
T gelu_grad(T u) {
  const T c = static_cast<T>(0.7978845608028654);
  const T k = static_cast<T>(0.044715);
  const T inner = c * (u + k * u * u * u);
  const T th = std::tanh(inner);
  const T sech2 = T{1} - th * th;
  return T{0.5} * (T{1} + th) + T{0.5} * u * sech2 * c * (T{1} + T{3} * k * u * u);
}

/// y = W x, plus the adapter correction when one is attached to this target.
template <typename T>
void project(const BasicMatrix<T>& w, const LoraAdapter<T>* adapter, LoraTarget target,
             std::span<const T> x, std::span<T> y) {
  matvec(w, x, y);
  if (adapter == nullptr) return;
  if (const auto* pair = adapter->find(target)) {
    const auto delta = lora_delta(x, pair->a.value, pair->b.value, adapter->alpha, adapter->rank);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += delta[i];
  }
}

template <typename T>
void add_adapter(const LoraAdapter<T>* adapter, LoraTarget target, std::span<const T> x,
                 std::span<T> y) {
  if (adapter == nullptr) return;
  if (const auto* pair = adapter->find(target)) {
    const auto delta = lora_delta(x, pair->a.value, pair->b.value, adapter->alpha, adapter->rank);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += delta[i];
  }
}

/// Causal multi-head attention for query row `q` over key/value rows [0, count).
/// `probs` receives count * heads weights (head-major).
template <typename T>
void attend_row(std::span<const T> q, const BasicMatrix<T>& k, const BasicMatrix<T>& v,
                std::size_t count, std::size_t heads, std::span<T> out, std::vector<T>& probs) {
  const std::size_t d = q.size(), dh = d / heads;
  const T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  probs.assign(heads * count, T{0});
  std::vector<T> scores(count);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t j = 0; j < count; ++j) {
      scores[j] = dot(q.subspan(off, dh), k.row(j).subspan(off, dh)) * inv;
    }
    const auto p = softmax(std::span<const T>(scores));
    for (std::size_t c = 0; c < dh; ++c) out[off + c] = T{0};
    for (std::size_t j = 0; j < count; ++j) {
      probs[h * count + j] = p[j];
      const auto vr = v.row(j);
      for (std::size_t c = 0; c < dh; ++c) out[off + c] += p[j] * vr[off + c];
    }
  }
}

template <typename T>
BasicMatrix<T> positional_table(std::size_t n, std::size_t d) {
  std::vector<T> data(n * d);
  for (std::size_t pos = 0; pos < n; ++pos) {
    for (std::size_t i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / d);
      const double ang = static_cast<double>(pos) * freq;
      data[pos * d + i] = static_cast<T>(i % 2 == 0 ? std::sin(ang) : std::cos(ang));
    }
  }
  return BasicMatrix<T>(n, d, std::move(data));
}

/// One pre-norm transformer block over all rows. `adapter` applies only
/// when this is the probed layer.
template <typename T>
BasicMatrix<T> block_forward(const BasicMatrix<T>& x, const LayerWeights<T>& lw, std::size_t heads,
                             const LoraAdapter<T>* adapter) {
  const std::size_t n = x.rows(), d = x.cols(), f = lw.w1.value.rows();
  BasicMatrix<T> a(n, d), q(n, d), k(n, d), v(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    layer_norm_row(x.row(i), lw.ln1_scale.value, lw.ln1_offset.value, a.row(i));
    project(lw.wq.value, adapter, LoraTarget::kQuery, std::span<const T>(a.row(i)), q.row(i));
    project(lw.wk.value, adapter, LoraTarget::kKey, std::span<const T>(a.row(i)), k.row(i));
    project(lw.wv.value, adapter, LoraTarget::kValue, std::span<const T>(a.row(i)), v.row(i));
  }
  BasicMatrix<T> out(n, d);
  std::vector<T> o(d), attn(d), h(d), c(d), u(f), g(f), ffn(d), probs;
  for (std::size_t i = 0; i < n; ++i) {
    attend_row(std::span<const T>(q.row(i)), k, v, i + 1, heads, std::span<T>(o), probs);
    project(lw.wo.value, adapter, LoraTarget::kOutput, std::span<const T>(o), std::span<T>(attn));
    for (std::size_t j = 0; j < d; ++j) h[j] = x(i, j) + attn[j];
    layer_norm_row(std::span<const T>(h), lw.ln2_scale.value, lw.ln2_offset.value,
                   std::span<T>(c));
    project(lw.w1.value, adapter, LoraTarget::kFfnIn, std::span<const T>(c), std::span<T>(u));
    for (std::size_t j = 0; j < f; ++j) g[j] = gelu(u[j]);
    project(lw.w2.value, adapter, LoraTarget::kFfnOut, std::span<const T>(g), std::span<T>(ffn));
    for (std::size_t j = 0; j < d; ++j) out(i, j) = h[j] + ffn[j];
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

/// Hidden states around the probed layer l.
template <typename T>
struct HiddenStates {
  BasicMatrix<T> prev;   ///< output of layer l-1 (input of layer l), n x d
  BasicMatrix<T> layer;  ///< output of layer l, adapted when an adapter was given

  std::size_t tokens() const { return layer.rows(); }
};

namespace detail {

template <typename T>
BasicMatrix<T> embed(const BasicMatrix<T>& tokens, std::size_t d) {
  if (tokens.rows() == 0) throw std::invalid_argument("forward: no tokens");
  if (tokens.cols() != d) {
    throw std::invalid_argument("forward: token dim " + std::to_string(tokens.cols()) +
                                " != hidden_dim " + std::to_string(d));
  }
  BasicMatrix<T> z = positional_table<T>(tokens.rows(), d);
  for (std::size_t i = 0; i < z.size(); ++i) z.flat()[i] += tokens.flat()[i];
  return z;
}

}  // namespace detail

/// Runs layers 1..l. The adapter, when present, modifies layer l only.
template <typename T>
HiddenStates<T> forward(const BasicMatrix<T>& tokens, const BackboneWeights<T>& weights,
                        const LoraAdapter<T>* adapter = nullptr) {
  const auto& cfg = weights.config;
  BasicMatrix<T> z = detail::embed(tokens, cfg.hidden_dim);
  for (std::size_t li = 0; li + 1 < cfg.probe_layer; ++li) {
    z = detail::block_forward(z, weights.layers[li], cfg.num_heads,
                              static_cast<const LoraAdapter<T>*>(nullptr));
  }
  HiddenStates<T> hs;
  hs.prev = z;
  hs.layer = detail::block_forward(z, weights.layers[cfg.probe_layer - 1], cfg.num_heads, adapter);
  return hs;
}

/// All L+1 residual-stream states Z^(0..L) with no adapter.
template <typename T>
std::vector<BasicMatrix<T>> forward_all_layers(const BasicMatrix<T>& tokens,
                                               const BackboneWeights<T>& weights) {
  const auto& cfg = weights.config;
  std::vector<BasicMatrix<T>> out;
  out.push_back(detail::embed(tokens, cfg.hidden_dim));
  for (std::size_t li = 0; li < cfg.num_layers; ++li) {
    out.push_back(detail::block_forward(out.back(), weights.layers[li], cfg.num_heads,
                                        static_cast<const LoraAdapter<T>*>(nullptr)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Last-token path through the probed layer
//
// Only the final row of layer l feeds a last-token probe, and everything
// below layer l is frozen, so training caches the layer-l inputs once and
// recomputes just the final row with the adapter. The kernels are the ones
// used by block_forward, so results match the full forward bitwise.
// ---------------------------------------------------------------------------

template <typename T>
struct LayerInputCache {
  BasicMatrix<T> prev;  ///< Z^(l-1), n x d
  BasicMatrix<T> normed;  ///< LN1 of each row
  BasicMatrix<T> q, k, v;  ///< frozen projections of `normed`
  std::vector<T> frozen_last;  ///< last row of Z^(l) without adapter

  std::size_t tokens() const { return prev.rows(); }
};

/// Intermediates of one last-row evaluation, kept for backward.
template <typename T>
struct LastRowTape {
  std::vector<T> q;
  BasicMatrix<T> k, v;  ///< adapted keys/values (copies of the cache when unadapted)
  std::vector<T> probs;
  std::vector<T> o, h, c, u, g, out;
  detail::NormStats<T> ln2{};
};

template <typename T>
std::vector<T> adapted_last_row(const LayerInputCache<T>& cache, const LayerWeights<T>& lw,
                                std::size_t heads, const LoraAdapter<T>* adapter,
                                LastRowTape<T>* tape = nullptr) {
  using detail::add_adapter;
  const std::size_t n = cache.tokens(), d = cache.prev.cols(), f = lw.w1.value.rows();
  const std::size_t last = n - 1;
  LastRowTape<T> local;
  LastRowTape<T>& t = tape != nullptr ? *tape : local;

  t.q.assign(cache.q.row(last).begin(), cache.q.row(last).end());
  add_adapter(adapter, LoraTarget::kQuery, std::span<const T>(cache.normed.row(last)),
              std::span<T>(t.q));
  t.k = cache.k;
  t.v = cache.v;
  const bool adapt_k = adapter != nullptr && adapter->find(LoraTarget::kKey) != nullptr;
  const bool adapt_v = adapter != nullptr && adapter->find(LoraTarget::kValue) != nullptr;
  for (std::size_t j = 0; j < n; ++j) {
    if (adapt_k) add_adapter(adapter, LoraTarget::kKey, std::span<const T>(cache.normed.row(j)), t.k.row(j));
    if (adapt_v) add_adapter(adapter, LoraTarget::kValue, std::span<const T>(cache.normed.row(j)), t.v.row(j));
  }
  t.o.assign(d, T{0});
  detail::attend_row(std::span<const T>(t.q), t.k, t.v, n, heads, std::span<T>(t.o), t.probs);
  std::vector<T> attn(d);
  detail::project(lw.wo.value, adapter, LoraTarget::kOutput, std::span<const T>(t.o),
                  std::span<T>(attn));
  t.h.resize(d);
  for (std::size_t j = 0; j < d; ++j) t.h[j] = cache.prev(last, j) + attn[j];
  t.c.resize(d);
  t.ln2 = detail::layer_norm_row(std::span<const T>(t.h), lw.ln2_scale.value, lw.ln2_offset.value,
                                 std::span<T>(t.c));
  t.u.resize(f);
  detail::project(lw.w1.value, adapter, LoraTarget::kFfnIn, std::span<const T>(t.c),
                  std::span<T>(t.u));
  t.g.resize(f);
  for (std::size_t j = 0; j < f; ++j) t.g[j] = detail::gelu(t.u[j]);
  std::vector<T> ffn(d);
  detail::project(lw.w2.value, adapter, LoraTarget::kFfnOut, std::span<const T>(t.g),
                  std::span<T>(ffn));
  t.out.resize(d);
  for (std::size_t j = 0; j < d; ++j) t.out[j] = t.h[j] + ffn[j];
  return t.out;
}

/// Accumulates adapter gradients from d(last row of layer l). Backbone
/// weights are frozen and are never written.
template <typename T>
void adapted_last_row_backward(const LayerInputCache<T>& cache, const LayerWeights<T>& lw,
                               std::size_t heads, LoraAdapter<T>& adapter,
                               const LastRowTape<T>& t, std::span<const T> dout) {
  const std::size_t n = cache.tokens(), d = cache.prev.cols(), f = lw.w1.value.rows();
  const std::size_t last = n - 1, dh = d / heads;
  const T s = adapter.scaling();
  auto lora_input_grad = [&](LoraTarget target, std::span<const T> x, std::span<const T> dy,
                             std::span<T> dx) {
    auto* pair = adapter.find(target);
    if (pair == nullptr) return;
    lora_delta_backward(x, *pair, s, dy);
    if (dx.empty()) return;
    // Adapter contribution to the input gradient: s A^T B^T dy.
    const std::size_t r = adapter.rank;
    std::vector<T> tb(r, T{0});
    matvec_backward(pair->b.value, std::span<const T>(), dy, static_cast<BasicMatrix<T>*>(nullptr),
                    std::span<T>(tb));
    for (auto& vv : tb) vv *= s;
    matvec_backward(pair->a.value, std::span<const T>(), std::span<const T>(tb),
                    static_cast<BasicMatrix<T>*>(nullptr), dx);
  };

  // out = h + W2 gelu(W1 LN2(h))
  std::vector<T> dh_vec(dout.begin(), dout.end());
  std::vector<T> dg(f, T{0});
  matvec_backward(lw.w2.value, std::span<const T>(), dout, static_cast<BasicMatrix<T>*>(nullptr),
                  std::span<T>(dg));
  lora_input_grad(LoraTarget::kFfnOut, std::span<const T>(t.g), dout, std::span<T>(dg));
  std::vector<T> du(f);
  for (std::size_t j = 0; j < f; ++j) du[j] = dg[j] * detail::gelu_grad(t.u[j]);
  std::vector<T> dc(d, T{0});
  matvec_backward(lw.w1.value, std::span<const T>(), std::span<const T>(du),
                  static_cast<BasicMatrix<T>*>(nullptr), std::span<T>(dc));
  lora_input_grad(LoraTarget::kFfnIn, std::span<const T>(t.c), std::span<const T>(du),
                  std::span<T>(dc));
  detail::layer_norm_row_backward(std::span<const T>(t.h), t.ln2, lw.ln2_scale.value,
                                  std::span<const T>(dc), std::span<T>(dh_vec));

  // h = x_last + Wo o
  std::vector<T> d_o(d, T{0});
  matvec_backward(lw.wo.value, std::span<const T>(), std::span<const T>(dh_vec),
                  static_cast<BasicMatrix<T>*>(nullptr), std::span<T>(d_o));
  lora_input_grad(LoraTarget::kOutput, std::span<const T>(t.o), std::span<const T>(dh_vec),
                  std::span<T>(d_o));

  const bool need_q = adapter.find(LoraTarget::kQuery) != nullptr;
  const bool need_k = adapter.find(LoraTarget::kKey) != nullptr;
  const bool need_v = adapter.find(LoraTarget::kValue) != nullptr;
  if (!need_q && !need_k && !need_v) return;

  const T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<T> dq(d, T{0});
  BasicMatrix<T> dk(n, d), dv(n, d);
  std::vector<T> dp(n), ds(n);
  for (std::size_t hd = 0; hd < heads; ++hd) {
    const std::size_t off = hd * dh;
    const std::span<const T> p(t.probs.data() + hd * n, n);
    const std::span<const T> dov(d_o.data() + off, dh);
    for (std::size_t j = 0; j < n; ++j) {
      dp[j] = dot(dov, std::span<const T>(t.v.row(j)).subspan(off, dh));
      for (std::size_t c = 0; c < dh; ++c) dv(j, off + c) = p[j] * dov[c];
    }
    softmax_backward(p, std::span<const T>(dp), std::span<T>(ds));
    for (std::size_t j = 0; j < n; ++j) {
      const T g = ds[j] * inv;
      for (std::size_t c = 0; c < dh; ++c) {
        dq[off + c] += g * t.k(j, off + c);
        dk(j, off + c) = g * t.q[off + c];
      }
    }
  }
  if (need_q) {
    lora_input_grad(LoraTarget::kQuery, std::span<const T>(cache.normed.row(last)),
                    std::span<const T>(dq), std::span<T>());
  }
  for (std::size_t j = 0; j < n; ++j) {
    if (need_k) {
      lora_input_grad(LoraTarget::kKey, std::span<const T>(cache.normed.row(j)),
                      std::span<const T>(dk.row(j)), std::span<T>());
    }
    if (need_v) {
      lora_input_grad(LoraTarget::kValue, std::span<const T>(cache.normed.row(j)),
                      std::span<const T>(dv.row(j)), std::span<T>());
    }
  }
}

/// Frozen inputs of the probed layer for one sample. The frozen last row goes
/// through the same kernels as the full forward, so it equals
/// forward(...).layer's last row bitwise.
template <typename T>
LayerInputCache<T> build_layer_cache(const BasicMatrix<T>& tokens, const BackboneWeights<T>& weights) {
  const auto& cfg = weights.config;
  const auto& lw = weights.layers[cfg.probe_layer - 1];
  BasicMatrix<T> z = detail::embed(tokens, cfg.hidden_dim);
  for (std::size_t li = 0; li + 1 < cfg.probe_layer; ++li) {
    z = detail::block_forward(z, weights.layers[li], cfg.num_heads,
                              static_cast<const LoraAdapter<T>*>(nullptr));
  }
  const std::size_t n = z.rows(), d = z.cols();
  LayerInputCache<T> c;
  c.normed = BasicMatrix<T>(n, d);
  c.q = BasicMatrix<T>(n, d);
  c.k = BasicMatrix<T>(n, d);
  c.v = BasicMatrix<T>(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    detail::layer_norm_row(std::span<const T>(z.row(i)), lw.ln1_scale.value, lw.ln1_offset.value,
                           c.normed.row(i));
    matvec(lw.wq.value, std::span<const T>(c.normed.row(i)), c.q.row(i));
    matvec(lw.wk.value, std::span<const T>(c.normed.row(i)), c.k.row(i));
    matvec(lw.wv.value, std::span<const T>(c.normed.row(i)), c.v.row(i));
  }
  c.prev = std::move(z);
  c.frozen_last = adapted_last_row(c, lw, cfg.num_heads, static_cast<const LoraAdapter<T>*>(nullptr));
  return c;
}

}  // namespace proberoute
