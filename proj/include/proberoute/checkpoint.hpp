// Copyright 2026 The proberoute Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "proberoute/backbone.hpp"
#include "proberoute/binary_io.hpp"
#include "proberoute/training.hpp"

namespace proberoute {

// Layout, little-endian, same primitives as the dataset file:
//   "RLPC" | version u16 | metadata (u32 length + UTF-8 JSON) | tensor count u32
//   per tensor: name (u16 length + bytes) | rows u32 | cols u32 | rows*cols f32
inline constexpr char kCheckpointMagic[4] = {'R', 'L', 'P', 'C'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  BackboneConfig backbone;
  ModelConfig model_config;
  ProbeModel<float> model;
  double threshold = 0.5;
};

inline nlohmann::json checkpoint_metadata(const Checkpoint& c) {
  nlohmann::json targets = nlohmann::json::array();
  for (auto t : c.model_config.lora_targets) targets.push_back(to_string(t));
  return {
      {"method", to_string(c.model.method)},
      {"threshold", c.threshold},
      {"backbone",
       {{"num_layers", c.backbone.num_layers},
        {"hidden_dim", c.backbone.hidden_dim},
        {"num_heads", c.backbone.num_heads},
        {"ffn_dim", c.backbone.ffn()},
        {"probe_layer", c.backbone.probe_layer},
        {"init_seed", c.backbone.init_seed}}},
      {"model",
       {{"bottleneck_dim", c.model_config.bottleneck(c.backbone.hidden_dim)},
        {"lora_rank", c.model_config.lora_rank},
        {"lora_alpha", c.model_config.lora_alpha},
        {"lora_targets", targets}}},
  };
}

inline std::vector<std::uint8_t> save_checkpoint(const Checkpoint& c) {
  ByteWriter w;
  for (char ch : kCheckpointMagic) w.u8(static_cast<std::uint8_t>(ch));
  w.u16(kCheckpointVersion);
  const std::string meta = checkpoint_metadata(c).dump();
  w.u32(static_cast<std::uint32_t>(meta.size()));
  w.bytes(std::span(reinterpret_cast<const std::uint8_t*>(meta.data()), meta.size()));
  auto params = const_cast<ProbeModel<float>&>(c.model).all();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    w.str16(p->name);
    w.u32(static_cast<std::uint32_t>(p->value.rows()));
    w.u32(static_cast<std::uint32_t>(p->value.cols()));
    for (float v : p->value.values()) w.f32(v);
  }
  return w.take();
}

/// Rebuilds the model skeleton from the metadata, then requires the stored
/// tensors to match it exactly by name, order and shape.
inline Checkpoint load_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  for (char ch : kCheckpointMagic) {
    if (r.u8() != static_cast<std::uint8_t>(ch)) throw FormatError(FormatErrorCode::kMagic, "not a checkpoint");
  }
  const std::uint16_t version = r.u16();
  if (version != kCheckpointVersion) {
    throw FormatError(FormatErrorCode::kVersion, "unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t meta_len = r.u32();
  const auto meta_raw = r.raw(meta_len);
  Checkpoint c;
  std::string method;
  try {
    const auto meta = nlohmann::json::parse(meta_raw.begin(), meta_raw.end());
    method = meta.at("method").get<std::string>();
    c.threshold = meta.at("threshold").get<double>();
    const auto& b = meta.at("backbone");
    c.backbone.num_layers = b.at("num_layers").get<std::size_t>();
    c.backbone.hidden_dim = b.at("hidden_dim").get<std::size_t>();
    c.backbone.num_heads = b.at("num_heads").get<std::size_t>();
    c.backbone.ffn_dim = b.at("ffn_dim").get<std::size_t>();
    c.backbone.probe_layer = b.at("probe_layer").get<std::size_t>();
    c.backbone.init_seed = b.at("init_seed").get<std::uint64_t>();
    const auto& m = meta.at("model");
    c.model_config.bottleneck_dim = m.at("bottleneck_dim").get<std::size_t>();
    c.model_config.lora_rank = m.at("lora_rank").get<std::size_t>();
    c.model_config.lora_alpha = m.at("lora_alpha").get<double>();
    c.model_config.lora_targets.clear();
    for (const auto& t : m.at("lora_targets")) {
      c.model_config.lora_targets.push_back(lora_target_from_string(t.get<std::string>()));
    }
    c.backbone.validate();
    c.model = make_probe_model<float>(method_from_string(method), c.backbone, c.model_config, 0);
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError(FormatErrorCode::kInvalidField, std::string("checkpoint metadata: ") + e.what());
  }

  auto params = c.model.all();
  const std::uint32_t count = r.u32();
  if (count != params.size()) {
    throw FormatError(FormatErrorCode::kInvalidField, "checkpoint holds " + std::to_string(count) +
                                                          " tensors, expected " + std::to_string(params.size()));
  }
  for (auto* p : params) {
    const std::string name = r.str16();
    if (name != p->name) {
      throw FormatError(FormatErrorCode::kInvalidField, "tensor '" + name + "' where '" + p->name + "' expected");
    }
    const std::uint32_t rows = r.u32(), cols = r.u32();
    if (rows != p->value.rows() || cols != p->value.cols()) {
      throw FormatError(FormatErrorCode::kInvalidField,
                        "tensor '" + name + "' has shape " + std::to_string(rows) + "x" + std::to_string(cols) +
                            ", expected " + std::to_string(p->value.rows()) + "x" +
                            std::to_string(p->value.cols()));
    }
    for (auto& v : p->value.flat()) {
      v = r.f32();
      if (!std::isfinite(v)) throw FormatError(FormatErrorCode::kNonFinite, "tensor '" + name + "'");
    }
  }
  if (r.remaining() != 0) throw FormatError(FormatErrorCode::kTrailing, "bytes after the last tensor");
  return c;
}

inline void save_checkpoint_file(const std::string& path, const Checkpoint& c) {
  write_file_bytes(path, save_checkpoint(c));
}

inline Checkpoint load_checkpoint_file(const std::string& path) {
  return load_checkpoint(read_file_bytes(path));
}

}  // namespace proberoute
