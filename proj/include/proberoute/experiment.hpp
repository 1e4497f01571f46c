// Copyright 2026 The proberoute Authors
// SPDX-License-Identifier: Apache-2.0

// Run configuration and the multi-model experiment recipes shared by the
// command-line tool and the acceptance suite.

#pragma once

#include <cstdint>
#include <cstdio>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "proberoute/checkpoint.hpp"
#include "proberoute/routing_eval.hpp"
#include "proberoute/synthetic.hpp"
#include "proberoute/training.hpp"

namespace proberoute {

inline constexpr const char* kToolVersion = "0.1.0";

/// One document for every subcommand. A single `seed` drives the synthetic
/// generator, the backbone init, the held-out split and training.
struct RunConfig {
  std::uint64_t seed = 0;
  double test_fraction = 0.2;
  BackboneConfig backbone;
  ModelConfig model;
  TrainConfig train;
  SyntheticConfig synthetic;

  BackboneConfig backbone_config() const {
    BackboneConfig b = backbone;
    b.init_seed = seed;
    return b;
  }

  TrainConfig train_config(Method m) const {
    TrainConfig t = train;
    t.method = m;
    t.seed = seed;
    return t;
  }

  SyntheticConfig synthetic_config() const {
    SyntheticConfig s = synthetic;
    s.dim = backbone.hidden_dim;
    s.seed = seed;
    return s;
  }

  void validate() const {
    if (!(test_fraction >= 0.0 && test_fraction < 1.0)) {
      throw std::invalid_argument("config: test_fraction must lie in [0, 1)");
    }
    backbone_config().validate();
    train.validate();
    synthetic_config().validate();
    if (model.lora_rank < 1) throw std::invalid_argument("config: lora_rank must be >= 1");
    if (!(model.lora_alpha > 0.0)) throw std::invalid_argument("config: lora_alpha must be > 0");
  }
};

namespace detail {

using nlohmann::json;

inline void reject_unknown(const json& j, const std::string& where, std::initializer_list<const char*> known) {
  if (!j.is_object()) throw std::invalid_argument("config: '" + where + "' must be an object");
  const std::set<std::string> k(known.begin(), known.end());
  for (const auto& item : j.items()) {
    if (!k.count(item.key())) {
      throw std::invalid_argument("config: unknown key '" + (where.empty() ? "" : where + ".") + item.key() + "'");
    }
  }
}

template <typename V>
void read(const json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json targets = nlohmann::json::array();
  for (auto t : c.model.lora_targets) targets.push_back(to_string(t));
  return {
      {"seed", c.seed},
      {"test_fraction", c.test_fraction},
      {"backbone",
       {{"num_layers", c.backbone.num_layers},
        {"hidden_dim", c.backbone.hidden_dim},
        {"num_heads", c.backbone.num_heads},
        {"ffn_dim", c.backbone.ffn_dim},
        {"probe_layer", c.backbone.probe_layer}}},
      {"model",
       {{"bottleneck_dim", c.model.bottleneck_dim},
        {"lora_rank", c.model.lora_rank},
        {"lora_alpha", c.model.lora_alpha},
        {"lora_targets", targets}}},
      {"train",
       {{"method", to_string(c.train.method)},
        {"learning_rate", c.train.learning_rate},
        {"epochs", c.train.epochs},
        {"batch_size", c.train.batch_size},
        {"vib_beta", c.train.vib_beta},
        {"kl_warmup_fraction", c.train.kl_warmup_fraction},
        {"weight_decay", c.train.weight_decay},
        {"validation_fraction", c.train.validation_fraction}}},
      {"synthetic",
       {{"num_samples", c.synthetic.num_samples},
        {"min_tokens", c.synthetic.min_tokens},
        {"max_tokens", c.synthetic.max_tokens},
        {"signal_strength", c.synthetic.signal_strength},
        {"multimodal_fraction", c.synthetic.multimodal_fraction},
        {"dilution", c.synthetic.dilution},
        {"distractor_std", c.synthetic.distractor_std},
        {"large_margin", c.synthetic.large_margin},
        {"tag", c.synthetic.tag}}},
  };
}

/// Overlays `j` onto `base`. Unknown keys and wrong types are usage errors.
inline RunConfig run_config_from_json(const nlohmann::json& j, RunConfig c = {}) {
  using detail::read;
  try {
    detail::reject_unknown(j, "", {"seed", "test_fraction", "backbone", "model", "train", "synthetic"});
    read(j, "seed", c.seed);
    read(j, "test_fraction", c.test_fraction);
    if (j.contains("backbone")) {
      const auto& b = j.at("backbone");
      detail::reject_unknown(b, "backbone", {"num_layers", "hidden_dim", "num_heads", "ffn_dim", "probe_layer"});
      read(b, "num_layers", c.backbone.num_layers);
      read(b, "hidden_dim", c.backbone.hidden_dim);
      read(b, "num_heads", c.backbone.num_heads);
      read(b, "ffn_dim", c.backbone.ffn_dim);
      read(b, "probe_layer", c.backbone.probe_layer);
    }
    if (j.contains("model")) {
      const auto& m = j.at("model");
      detail::reject_unknown(m, "model", {"bottleneck_dim", "lora_rank", "lora_alpha", "lora_targets"});
      read(m, "bottleneck_dim", c.model.bottleneck_dim);
      read(m, "lora_rank", c.model.lora_rank);
      read(m, "lora_alpha", c.model.lora_alpha);
      if (m.contains("lora_targets")) {
        c.model.lora_targets.clear();
        for (const auto& t : m.at("lora_targets")) {
          c.model.lora_targets.push_back(lora_target_from_string(t.get<std::string>()));
        }
      }
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      detail::reject_unknown(t, "train", {"method", "learning_rate", "epochs", "batch_size", "vib_beta",
                                          "kl_warmup_fraction", "weight_decay", "validation_fraction"});
      if (t.contains("method")) c.train.method = method_from_string(t.at("method").get<std::string>());
      read(t, "learning_rate", c.train.learning_rate);
      read(t, "epochs", c.train.epochs);
      read(t, "batch_size", c.train.batch_size);
      read(t, "vib_beta", c.train.vib_beta);
      read(t, "kl_warmup_fraction", c.train.kl_warmup_fraction);
      read(t, "weight_decay", c.train.weight_decay);
      read(t, "validation_fraction", c.train.validation_fraction);
    }
    if (j.contains("synthetic")) {
      const auto& s = j.at("synthetic");
      detail::reject_unknown(s, "synthetic", {"num_samples", "min_tokens", "max_tokens", "signal_strength",
                                              "multimodal_fraction", "dilution", "distractor_std",
                                              "large_margin", "tag"});
      read(s, "num_samples", c.synthetic.num_samples);
      read(s, "min_tokens", c.synthetic.min_tokens);
      read(s, "max_tokens", c.synthetic.max_tokens);
      read(s, "signal_strength", c.synthetic.signal_strength);
      read(s, "multimodal_fraction", c.synthetic.multimodal_fraction);
      read(s, "dilution", c.synthetic.dilution);
      read(s, "distractor_std", c.synthetic.distractor_std);
      read(s, "large_margin", c.synthetic.large_margin);
      read(s, "tag", c.synthetic.tag);
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  return c;
}

/// FNV-1a over bytes; stable across platforms, unlike std::hash.
inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string config_hash(const RunConfig& c) {
  const std::string s = to_json(c).dump();
  return hex64(fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size())));
}

// ---------------------------------------------------------------------------
// Recipes
// ---------------------------------------------------------------------------

struct HeldOut {
  Dataset train;
  Dataset test;
};

inline HeldOut hold_out(const Dataset& ds, const RunConfig& c) {
  const Split s = split_indices(ds.size(), c.test_fraction, c.seed);
  return {subset(ds, s.train), subset(ds, s.test)};
}

inline Dataset by_modality(const Dataset& ds, Modality m) {
  return filter(ds, [m](const Sample& s) { return s.modality == m; });
}

inline double probe_auc(const ProbeModel<float>& model, const BackboneWeights<float>& bb,
                        const FeatureStore<float>& fs) {
  return auc(routing_samples(fs, predict(model, bb, fs)));
}

/// Perturbed copies of a test set at the given magnitudes, with features.
/// The datasets are owned here because feature stores point into them.
struct PerturbedSets {
  std::vector<PerturbSpec> specs;
  std::vector<Dataset> data;
  std::vector<FeatureStore<float>> features;
};

inline PerturbedSets perturbed_sets(const Dataset& test, const BackboneWeights<float>& bb,
                                    const std::vector<PerturbSpec>& specs, std::uint64_t seed) {
  PerturbedSets out;
  out.specs = specs;
  Rng rng = Rng::stream(seed, RngStream::kPerturb);
  out.data.reserve(specs.size());
  for (const auto& p : specs) out.data.push_back(perturb_features(test, p.kind, p.magnitude, rng));
  for (const auto& d : out.data) out.features.push_back(build_features(d, bb));
  return out;
}

struct DegradationRow {
  Modality modality;         ///< modality of the evaluated test subset
  std::string train_subset;  ///< "all", "text_only" or "multimodal"
  double auc;
};

/// Trains one probe per training subset (all, text-only, multimodal) and
/// scores each on both modality slices of the held-out split.
inline std::vector<DegradationRow> degradation(const Dataset& ds, const RunConfig& c, Method m) {
  const auto bb = init_backbone<float>(c.backbone_config());
  const HeldOut h = hold_out(ds, c);
  const Modality mods[2] = {Modality::kTextOnly, Modality::kMultimodal};
  Dataset test_by[2] = {by_modality(h.test, mods[0]), by_modality(h.test, mods[1])};
  const FeatureStore<float> test_fs[2] = {build_features(test_by[0], bb), build_features(test_by[1], bb)};
  std::vector<DegradationRow> rows;
  for (const std::string subset_name : {"all", "text_only", "multimodal"}) {
    const Dataset tr = subset_name == "all"         ? h.train
                       : subset_name == "text_only" ? by_modality(h.train, Modality::kTextOnly)
                                                    : by_modality(h.train, Modality::kMultimodal);
    const auto fs = build_features(tr, bb);
    const auto res = train(fs, bb, c.train_config(m), c.model);
    if (res.abort_reason) throw NumericalError(*res.abort_reason);
    for (int k = 0; k < 2; ++k) rows.push_back({mods[k], subset_name, probe_auc(res.model, bb, test_fs[k])});
  }
  return rows;
}

struct AblationPoint {
  std::string param;  ///< "lora_rank", "probe_layer" or "vib_beta"
  double value;
  std::uint64_t seed;
};

struct AblationResult {
  AblationPoint point;
  double auc;
  double mean_kl;  ///< posterior KL on the held-out split
};

/// One ReLope run with a single knob changed from `base`.
inline AblationResult run_ablation_point(const Dataset& ds, RunConfig c, const AblationPoint& p) {
  c.seed = p.seed;
  if (p.param == "lora_rank") {
    c.model.lora_rank = static_cast<std::size_t>(p.value);
  } else if (p.param == "probe_layer") {
    c.backbone.probe_layer = static_cast<std::size_t>(p.value);
  } else if (p.param == "vib_beta") {
    c.train.vib_beta = p.value;
  } else {
    throw std::invalid_argument("ablate: unknown parameter '" + p.param + "'");
  }
  c.validate();
  const auto bb = init_backbone<float>(c.backbone_config());
  const HeldOut h = hold_out(ds, c);
  const auto tr = build_features(h.train, bb);
  const auto te = build_features(h.test, bb);
  const auto res = train(tr, bb, c.train_config(Method::kRelope), c.model);
  if (res.abort_reason) throw NumericalError(*res.abort_reason);
  return {p, probe_auc(res.model, bb, te), mean_kl(res.model, bb, te)};
}

}  // namespace proberoute
