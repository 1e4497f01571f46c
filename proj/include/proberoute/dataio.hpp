// Copyright 2026 The proberoute Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "proberoute/binary_io.hpp"
#include "proberoute/core_math.hpp"

namespace proberoute {

// Dataset container, version 1. All integers and floats little-endian.
//
//   header:  "RLPD" | version u16 | d u32 | m u64 | flags u32
//   sample:  n_tokens u32 | modality u8 | small_correct u8 | large_correct u8
//            | tag_len u16 | tag bytes (UTF-8) | n_tokens * d f32, row-major

inline constexpr char kDatasetMagic[4] = {'R', 'L', 'P', 'D'};
inline constexpr std::uint16_t kDatasetVersion = 1;

enum class Modality : std::uint8_t { kTextOnly = 0, kMultimodal = 1 };

inline const char* to_string(Modality m) {
  return m == Modality::kTextOnly ? "text_only" : "multimodal";
}

struct Sample {
  Modality modality = Modality::kTextOnly;
  std::uint8_t small_correct = 0;
  std::uint8_t large_correct = 0;
  std::string tag;
  Matrix tokens;  ///< n_tokens x d
};

struct Dataset {
  std::uint32_t dim = 0;
  std::uint32_t flags = 0;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }

  friend bool operator==(const Dataset& a, const Dataset& b) {
    if (a.dim != b.dim || a.flags != b.flags || a.samples.size() != b.samples.size()) return false;
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
      const auto &x = a.samples[i], &y = b.samples[i];
      if (x.modality != y.modality || x.small_correct != y.small_correct ||
          x.large_correct != y.large_correct || x.tag != y.tag || !(x.tokens == y.tokens)) {
        return false;
      }
    }
    return true;
  }
};

inline std::vector<std::uint8_t> save(const Dataset& ds) {
  ByteWriter w;
  for (char c : kDatasetMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u16(kDatasetVersion);
  w.u32(ds.dim);
  w.u64(ds.samples.size());
  w.u32(ds.flags);
  for (const auto& s : ds.samples) {
    if (s.tokens.cols() != ds.dim) throw std::invalid_argument("save: sample dim mismatch");
    w.u32(static_cast<std::uint32_t>(s.tokens.rows()));
    w.u8(static_cast<std::uint8_t>(s.modality));
    w.u8(s.small_correct);
    w.u8(s.large_correct);
    w.str16(s.tag);
    for (float v : s.tokens.flat()) w.f32(v);
  }
  return w.take();
}

inline Dataset load(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const auto magic = r.raw(4);
  for (int i = 0; i < 4; ++i) {
    if (magic[i] != static_cast<std::uint8_t>(kDatasetMagic[i])) {
      throw FormatError(FormatErrorCode::kMagic, "not a dataset file");
    }
  }
  const std::uint16_t version = r.u16();
  if (version != kDatasetVersion) {
    throw FormatError(FormatErrorCode::kVersion, "unsupported version " + std::to_string(version));
  }
  Dataset ds;
  ds.dim = r.u32();
  const std::uint64_t m = r.u64();
  ds.flags = r.u32();
  // Each sample occupies at least 9 bytes; reject absurd counts before reserving.
  if (m > r.remaining() / 9 + 1) {
    throw FormatError(FormatErrorCode::kTruncated, "declared " + std::to_string(m) + " samples");
  }
  ds.samples.reserve(m);
  for (std::uint64_t i = 0; i < m; ++i) {
    Sample s;
    const std::uint32_t n = r.u32();
    const std::uint8_t modality = r.u8();
    s.small_correct = r.u8();
    s.large_correct = r.u8();
    if (modality > 1 || s.small_correct > 1 || s.large_correct > 1) {
      throw FormatError(FormatErrorCode::kInvalidField,
                        "sample " + std::to_string(i) + ": flag byte out of range");
    }
    if (n == 0) {
      throw FormatError(FormatErrorCode::kInvalidField,
                        "sample " + std::to_string(i) + ": zero tokens");
    }
    s.modality = static_cast<Modality>(modality);
    s.tag = r.str16();
    const std::uint64_t count = static_cast<std::uint64_t>(n) * ds.dim;
    if (count > r.remaining() / 4) {
      throw FormatError(FormatErrorCode::kTruncated,
                        "sample " + std::to_string(i) + ": tensor payload cut short");
    }
    std::vector<float> data(count);
    for (auto& v : data) {
      v = r.f32();
      if (!std::isfinite(v)) {
        throw FormatError(FormatErrorCode::kNonFinite,
                          "sample " + std::to_string(i) + ": non-finite feature");
      }
    }
    s.tokens = Matrix(n, ds.dim, std::move(data));
    ds.samples.push_back(std::move(s));
  }
  if (r.remaining() != 0) {
    throw FormatError(FormatErrorCode::kTrailing,
                      std::to_string(r.remaining()) + " bytes after the last sample");
  }
  return ds;
}

inline Dataset load_file(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  return load(bytes);
}

inline void save_file(const std::string& path, const Dataset& ds) {
  const auto bytes = save(ds);
  write_file_bytes(path, bytes);
}

// ---------------------------------------------------------------------------
// Views and splits
// ---------------------------------------------------------------------------

inline Dataset subset(const Dataset& ds, std::span<const std::size_t> indices) {
  Dataset out{ds.dim, ds.flags, {}};
  out.samples.reserve(indices.size());
  for (std::size_t i : indices) out.samples.push_back(ds.samples.at(i));
  return out;
}

template <typename Pred>
Dataset filter(const Dataset& ds, Pred pred) {
  Dataset out{ds.dim, ds.flags, {}};
  for (const auto& s : ds.samples) {
    if (pred(s)) out.samples.push_back(s);
  }
  return out;
}

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Seeded shuffle, then the first round(fraction * m) indices form the
/// held-out part. Both parts keep ascending index order.
inline Split split_indices(std::size_t m, double held_out_fraction, std::uint64_t seed) {
  if (held_out_fraction < 0.0 || held_out_fraction > 1.0) {
    throw std::invalid_argument("split fraction must lie in [0, 1]");
  }
  std::vector<std::size_t> idx(m);
  for (std::size_t i = 0; i < m; ++i) idx[i] = i;
  Rng rng = Rng::stream(seed, RngStream::kData);
  rng.shuffle(idx.begin(), idx.end());
  const auto cut = static_cast<std::size_t>(std::llround(held_out_fraction * static_cast<double>(m)));
  Split s;
  s.test.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(cut));
  s.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(cut), idx.end());
  std::sort(s.test.begin(), s.test.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

struct LabelCounts {
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

inline LabelCounts count_labels(const Dataset& ds) {
  LabelCounts c;
  for (const auto& s : ds.samples) (s.small_correct ? c.positives : c.negatives)++;
  return c;
}

}  // namespace proberoute
