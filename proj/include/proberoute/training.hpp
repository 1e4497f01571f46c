// Copyright 2026 The proberoute Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "proberoute/backbone.hpp"
#include "proberoute/core_math.hpp"
#include "proberoute/dataio.hpp"
#include "proberoute/probes.hpp"
#include "proberoute/routing_eval.hpp"

namespace proberoute {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class Method { kLastToken, kAttention, kRelope };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::kLastToken: return "last_token";
    case Method::kAttention: return "attention";
    case Method::kRelope: return "relope";
  }
  return "?";
}

inline Method method_from_string(const std::string& s) {
  for (auto m : {Method::kLastToken, Method::kAttention, Method::kRelope}) {
    if (s == to_string(m)) return m;
  }
  throw std::invalid_argument("unknown method '" + s + "' (last_token|attention|relope)");
}

/// Probe-side architecture: bottleneck and adapter shapes.
struct ModelConfig {
  std::size_t bottleneck_dim = 0;  ///< 0 means hidden_dim / 4
  std::size_t lora_rank = 8;
  double lora_alpha = 16.0;
  std::vector<LoraTarget> lora_targets = {LoraTarget::kQuery, LoraTarget::kValue};

  std::size_t bottleneck(std::size_t d) const {
    return bottleneck_dim == 0 ? std::max<std::size_t>(1, d / 4) : bottleneck_dim;
  }
};

struct TrainConfig {
  Method method = Method::kRelope;
  double learning_rate = 1e-4;
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  double vib_beta = 1.0;
  double kl_warmup_fraction = 0.1;
  double weight_decay = 0.01;
  double validation_fraction = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("train: learning_rate must be > 0");
    if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    if (kl_warmup_fraction < 0.0 || kl_warmup_fraction > 1.0) {
      throw std::invalid_argument("train: kl_warmup_fraction must lie in [0, 1]");
    }
    if (vib_beta < 0.0) throw std::invalid_argument("train: vib_beta must be >= 0");
    if (validation_fraction < 0.0 || validation_fraction >= 1.0) {
      throw std::invalid_argument("train: validation_fraction must lie in [0, 1)");
    }
  }
};

// ---------------------------------------------------------------------------
// KL weight schedule
// ---------------------------------------------------------------------------

struct KlSchedule {
  double beta = 1.0;
  double warmup_fraction = 0.1;
  std::size_t total_steps = 1;
};

/// Linear warmup: beta * min(1, t / (w S)); constant beta when w = 0.
inline double kl_weight(std::size_t step, const KlSchedule& s) {
  const double ramp = s.warmup_fraction * static_cast<double>(s.total_steps);
  if (ramp <= 0.0) return s.beta;
  return s.beta * std::min(1.0, static_cast<double>(step) / ramp);
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

struct AdamWConfig {
  double learning_rate = 1e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamWState {
  std::vector<BasicMatrix<T>> m, v;
  std::uint64_t step = 0;

  explicit AdamWState(std::span<BasicParam<T>* const> params) {
    for (auto* p : params) {
      m.emplace_back(p->value.rows(), p->value.cols());
      v.emplace_back(p->value.rows(), p->value.cols());
    }
  }
};

/// One decoupled-weight-decay Adam step over `params`, then zeroes grads.
/// Frozen params are skipped. A non-finite gradient aborts before any
/// parameter is touched.
template <typename T>
void adamw_step(std::span<BasicParam<T>* const> params, AdamWState<T>& state, const AdamWConfig& cfg) {
  for (auto* p : params) {
    if (!p->trainable) continue;
    if (!all_finite(std::span<const T>(p->grad.flat()))) {
      throw NumericalError("non-finite gradient in parameter '" + p->name + "'");
    }
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto* p = params[i];
    if (!p->trainable) continue;
    auto val = p->value.flat();
    auto g = p->grad.flat();
    auto m = state.m[i].flat();
    auto v = state.v[i].flat();
    for (std::size_t j = 0; j < val.size(); ++j) {
      const double gj = g[j];
      const double mj = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
      const double vj = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double mhat = mj / bc1;
      const double vhat = vj / bc2;
      const double pj = val[j];
      val[j] = static_cast<T>(pj - cfg.learning_rate * (mhat / (std::sqrt(vhat) + cfg.eps) +
                                                        cfg.weight_decay * pj));
    }
    p->zero_grad();
  }
}

// ---------------------------------------------------------------------------
// Probe model: the trainable pieces of all three methods
// ---------------------------------------------------------------------------

template <typename T>
struct ProbeModel {
  Method method = Method::kLastToken;
  MlpProbe<T> probe;
  AttentionQuery<T> query;
  VibHeads<T> heads;
  LoraAdapter<T> adapter;

  /// Parameters the method trains.
  std::vector<BasicParam<T>*> trainable() {
    std::vector<BasicParam<T>*> out = probe.params();
    if (method == Method::kAttention) out.push_back(&query.q);
    if (method == Method::kRelope) {
      for (auto* p : heads.params()) out.push_back(p);
      for (auto* p : adapter.params()) out.push_back(p);
    }
    return out;
  }

  /// Every parameter the model carries, used or not.
  std::vector<BasicParam<T>*> all() {
    std::vector<BasicParam<T>*> out = probe.params();
    out.push_back(&query.q);
    for (auto* p : heads.params()) out.push_back(p);
    for (auto* p : adapter.params()) out.push_back(p);
    return out;
  }
};

/// Initializes every component from the seed's init stream in a fixed order,
/// so a model is fully determined by (method, configs, seed).
template <typename T>
ProbeModel<T> make_probe_model(Method method, const BackboneConfig& bb, const ModelConfig& mc,
                               std::uint64_t seed) {
  const std::size_t d = bb.hidden_dim;
  const std::size_t k = mc.bottleneck(d);
  Rng rng = Rng::stream(seed, RngStream::kInit);
  ProbeModel<T> m;
  m.method = method;
  m.query = make_attention_query<T>(d, rng);
  m.heads = make_vib_heads<T>(d, k, rng);
  m.adapter = init_lora<T>(bb, mc.lora_rank, mc.lora_alpha, mc.lora_targets, rng);
  m.probe = make_mlp_probe<T>(method == Method::kRelope ? k : d, d, rng);
  return m;
}

// ---------------------------------------------------------------------------
// Per-sample forward / backward
// ---------------------------------------------------------------------------

template <typename T>
struct ForwardTape {
  LastRowTape<T> row;
  std::vector<T> pool_weights;
  std::vector<T> feature;
  VibOutput<T> vib;
  MlpTape<T> mlp;
};

/// Logit for one sample. ReLope samples z' with `eps` when given and uses the
/// posterior mean otherwise.
template <typename T>
T model_logit(const ProbeModel<T>& model, const BackboneWeights<T>& backbone,
              const LayerInputCache<T>& cache, std::span<const T> eps, ForwardTape<T>* tape) {
  ForwardTape<T> local;
  ForwardTape<T>& t = tape != nullptr ? *tape : local;
  switch (model.method) {
    case Method::kLastToken:
      t.feature = cache.frozen_last;
      break;
    case Method::kAttention:
      t.feature = attention_aggregate(cache.prev, model.query, &t.pool_weights);
      break;
    case Method::kRelope: {
      const auto& cfg = backbone.config;
      t.feature = adapted_last_row(cache, backbone.layers[cfg.probe_layer - 1], cfg.num_heads,
                                   &model.adapter, &t.row);
      t.vib = vib_forward(std::span<const T>(t.feature), model.heads,
                          eps.empty() ? VibMode::kMean : VibMode::kSample, eps);
      return mlp_logit(model.probe, std::span<const T>(t.vib.sample), &t.mlp);
    }
  }
  return mlp_logit(model.probe, std::span<const T>(t.feature), &t.mlp);
}

template <typename T>
struct SampleLoss {
  T bce = T{0};
  T kl = T{0};
  T prob = T{0};
};

/// Forward one sample and, when `backward` is set, accumulate
/// scale * (bce + kl_weight * kl) gradients into the model.
template <typename T>
SampleLoss<T> sample_loss(ProbeModel<T>& model, const BackboneWeights<T>& backbone,
                          const LayerInputCache<T>& cache, int label, std::span<const T> eps,
                          T kl_weight, T scale, bool backward) {
  ForwardTape<T> tape;
  const T logit = model_logit(model, backbone, cache, eps, &tape);
  if (!std::isfinite(logit)) throw NumericalError("logit is not finite");
  const auto bce = bce_logit_loss(logit, label);
  SampleLoss<T> out{bce.loss, T{0}, bce.prob};
  if (model.method == Method::kRelope) {
    out.kl = kl_diag_gaussian(std::span<const T>(tape.vib.mu), std::span<const T>(tape.vib.logvar));
  }
  if (!backward) return out;

  const bool need_dfeature = model.method != Method::kLastToken;
  std::vector<T> dfeature(need_dfeature ? model.probe.input_dim() : 0, T{0});
  mlp_backward(model.probe, tape.mlp, scale * bce.dlogit, std::span<T>(dfeature));
  switch (model.method) {
    case Method::kLastToken:
      break;
    case Method::kAttention:
      attention_aggregate_backward(cache.prev, model.query, std::span<const T>(tape.pool_weights),
                                   std::span<const T>(dfeature));
      break;
    case Method::kRelope: {
      std::vector<T> dz(tape.feature.size(), T{0});
      vib_backward(std::span<const T>(tape.feature), model.heads, tape.vib, eps,
                   std::span<const T>(dfeature), scale * kl_weight, std::span<T>(dz));
      const auto& cfg = backbone.config;
      adapted_last_row_backward(cache, backbone.layers[cfg.probe_layer - 1], cfg.num_heads,
                                model.adapter, tape.row, std::span<const T>(dz));
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature store: frozen backbone outputs, computed once per dataset
// ---------------------------------------------------------------------------

template <typename T>
struct FeatureStore {
  std::vector<LayerInputCache<T>> caches;
  std::vector<int> labels;
  std::vector<const Sample*> samples;  ///< metadata of the source dataset

  std::size_t size() const { return caches.size(); }
};

inline FeatureStore<float> build_features(const Dataset& ds, const BackboneWeights<float>& backbone) {
  if (ds.dim != backbone.config.hidden_dim) {
    throw DataError("dataset feature dim " + std::to_string(ds.dim) + " != backbone hidden_dim " +
                    std::to_string(backbone.config.hidden_dim));
  }
  FeatureStore<float> fs;
  fs.caches.reserve(ds.size());
  for (const auto& s : ds.samples) {
    fs.caches.push_back(build_layer_cache(s.tokens, backbone));
    fs.labels.push_back(s.small_correct);
    fs.samples.push_back(&s);
  }
  return fs;
}

/// Predicted probability of small-model correctness (posterior mean for ReLope).
template <typename T>
std::vector<double> predict(const ProbeModel<T>& model, const BackboneWeights<T>& backbone,
                            const FeatureStore<T>& fs, std::span<const std::size_t> indices = {}) {
  std::vector<double> out;
  auto one = [&](std::size_t i) {
    const T logit = model_logit(model, backbone, fs.caches[i], std::span<const T>(),
                                static_cast<ForwardTape<T>*>(nullptr));
    out.push_back(static_cast<double>(sigmoid(logit)));
  };
  if (indices.empty()) {
    out.reserve(fs.size());
    for (std::size_t i = 0; i < fs.size(); ++i) one(i);
  } else {
    out.reserve(indices.size());
    for (std::size_t i : indices) one(i);
  }
  return out;
}

/// Mean KL of the bottleneck posterior over the given samples (ReLope only).
template <typename T>
double mean_kl(const ProbeModel<T>& model, const BackboneWeights<T>& backbone, const FeatureStore<T>& fs) {
  if (model.method != Method::kRelope) throw std::invalid_argument("mean_kl: not a relope model");
  double acc = 0.0;
  const auto& cfg = backbone.config;
  for (const auto& c : fs.caches) {
    const auto z = adapted_last_row(c, backbone.layers[cfg.probe_layer - 1], cfg.num_heads, &model.adapter);
    const auto v = vib_forward(std::span<const T>(z), model.heads, VibMode::kMean);
    acc += kl_diag_gaussian(std::span<const T>(v.mu), std::span<const T>(v.logvar));
  }
  return fs.size() == 0 ? 0.0 : acc / static_cast<double>(fs.size());
}

inline std::vector<RoutingSample> routing_samples(const FeatureStore<float>& fs,
                                                  std::span<const double> scores) {
  std::vector<RoutingSample> out;
  out.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const Sample& s = *fs.samples[i];
    out.push_back({scores[i], s.small_correct, s.large_correct, s.modality, s.tag});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochLog {
  std::size_t epoch;
  double train_loss;
  double train_auc;
  double val_auc;  ///< NaN when the validation split has a single class
};

struct TrainResult {
  ProbeModel<float> model;
  std::vector<EpochLog> log;
  double threshold = 0.5;  ///< calibrated on the validation split
  std::optional<std::string> abort_reason;  ///< set when training diverged
};

namespace detail {

inline double safe_auc(std::span<const double> scores, std::span<const int> labels) {
  std::size_t pos = 0;
  for (int y : labels) pos += static_cast<std::size_t>(y);
  if (pos == 0 || pos == labels.size()) return std::numeric_limits<double>::quiet_NaN();
  return auc(scores, labels);
}

}  // namespace detail

/// Trains one method on `fs`. A seeded validation_fraction of the samples is
/// held out for per-epoch AUC and threshold calibration. Batches are walked
/// sample by sample with gradient accumulation, in a seed-determined order.
/// On divergence the model of the last completed epoch is returned with
/// `abort_reason` set.
inline TrainResult train(const FeatureStore<float>& fs, const BackboneWeights<float>& backbone,
                         const TrainConfig& cfg, const ModelConfig& mc) {
  using T = float;
  cfg.validate();
  {
    std::size_t pos = 0;
    for (int y : fs.labels) pos += static_cast<std::size_t>(y);
    if (pos == 0 || pos == fs.size()) throw DataError("degenerate labels");
  }
  const Split split = split_indices(fs.size(), cfg.validation_fraction, cfg.seed);
  const auto& train_idx = split.train;
  const auto& val_idx = split.test;
  if (train_idx.empty()) throw DataError("no training samples after the validation split");

  TrainResult result;
  result.model = make_probe_model<T>(cfg.method, backbone.config, mc, cfg.seed);
  auto& model = result.model;
  const auto params = model.trainable();
  AdamWState<T> opt(params);
  const AdamWConfig adam{cfg.learning_rate, cfg.weight_decay};

  const std::size_t steps_per_epoch = (train_idx.size() + cfg.batch_size - 1) / cfg.batch_size;
  const KlSchedule schedule{cfg.vib_beta, cfg.kl_warmup_fraction, cfg.epochs * steps_per_epoch};
  Rng shuffle_rng = Rng::stream(cfg.seed, RngStream::kShuffle);
  Rng noise_rng = Rng::stream(cfg.seed, RngStream::kNoise);
  const std::size_t k = model.heads.bottleneck_dim();
  const bool sampling = cfg.method == Method::kRelope;

  std::vector<int> train_labels, val_labels;
  for (auto i : train_idx) train_labels.push_back(fs.labels[i]);
  for (auto i : val_idx) val_labels.push_back(fs.labels[i]);

  ProbeModel<T> last_good = model;
  std::vector<std::size_t> order = train_idx;
  std::vector<T> eps(k);
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    std::vector<double> train_scores, val_scores;
    try {
      for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
        const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
        const T scale = T{1} / static_cast<T>(b1 - b0);
        const T klw = static_cast<T>(kl_weight(step, schedule));
        double batch_loss = 0.0;
        for (std::size_t bi = b0; bi < b1; ++bi) {
          const std::size_t i = order[bi];
          if (sampling) {
            for (auto& e : eps) e = static_cast<T>(noise_rng.normal());
          }
          const auto sl = sample_loss(model, backbone, fs.caches[i], fs.labels[i],
                                      sampling ? std::span<const T>(eps) : std::span<const T>(),
                                      klw, scale, true);
          batch_loss += static_cast<double>(sl.bce) + static_cast<double>(klw) * sl.kl;
        }
        batch_loss /= static_cast<double>(b1 - b0);
        if (!std::isfinite(batch_loss)) throw NumericalError("training loss is not finite");
        adamw_step(std::span<BasicParam<T>* const>(params), opt, adam);
        loss_sum += batch_loss;
        ++step;
      }
      train_scores = predict(model, backbone, fs, train_idx);
      if (!val_idx.empty()) val_scores = predict(model, backbone, fs, val_idx);
      if (!all_finite(std::span<const double>(train_scores)) || !all_finite(std::span<const double>(val_scores))) {
        throw NumericalError("predictions are not finite");
      }
    } catch (const NumericalError& e) {
      result.model = last_good;
      result.abort_reason = std::string(e.what()) + " (epoch " + std::to_string(epoch) + ")";
      return result;
    }
    double val = std::numeric_limits<double>::quiet_NaN();
    if (!val_idx.empty()) val = detail::safe_auc(val_scores, val_labels);
    result.log.push_back({epoch, loss_sum / static_cast<double>(steps_per_epoch),
                          detail::safe_auc(train_scores, train_labels), val});
    last_good = model;
  }

  // Threshold from the validation split, or the training split when the
  // validation split is empty or single-class.
  auto calib_idx = val_idx;
  auto calib_labels = val_labels;
  const std::size_t vpos = static_cast<std::size_t>(std::count(val_labels.begin(), val_labels.end(), 1));
  if (vpos == 0 || vpos == val_labels.size()) {
    calib_idx = train_idx;
    calib_labels = train_labels;
  }
  const auto calib_scores = predict(model, backbone, fs, calib_idx);
  std::vector<RoutingSample> calib;
  for (std::size_t i = 0; i < calib_idx.size(); ++i) {
    calib.push_back({calib_scores[i], static_cast<std::uint8_t>(calib_labels[i]), 0,
                     Modality::kTextOnly, ""});
  }
  result.threshold = calibrate_threshold(calib).threshold;
  return result;
}

}  // namespace proberoute
