// Copyright 2026 The proberoute Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "proberoute/errors.hpp"

namespace proberoute {

// ---------------------------------------------------------------------------
// Matrix / Param
// ---------------------------------------------------------------------------

/// Row-major dense matrix. Entries supplied at construction must be finite.
template <typename T>
class BasicMatrix {
 public:
  using value_type = T;

  BasicMatrix() = default;

  BasicMatrix(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    if (!std::isfinite(fill)) {
      throw std::invalid_argument("matrix fill value is not finite");
    }
  }

  BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw std::invalid_argument("matrix data length " + std::to_string(data_.size()) +
                                  " != " + std::to_string(rows_) + "x" +
                                  std::to_string(cols_));
    }
    for (T v : data_) {
      if (!std::isfinite(v)) throw std::invalid_argument("matrix entry is not finite");
    }
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  T operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<T> flat() { return data_; }
  std::span<const T> flat() const { return data_; }
  const std::vector<T>& values() const { return data_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const BasicMatrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  friend bool operator==(const BasicMatrix& a, const BasicMatrix& b) {
    if (!a.same_shape(b)) return false;
    return std::memcmp(a.data_.data(), b.data_.data(), a.data_.size() * sizeof(T)) == 0;
  }

  template <typename U>
  BasicMatrix<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicMatrix<U>(rows_, cols_, std::move(out));
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Matrix = BasicMatrix<float>;

/// A named tensor with its gradient accumulator. Frozen params never
/// accumulate gradient; backward rules check `trainable` before writing.
template <typename T>
struct BasicParam {
  std::string name;
  BasicMatrix<T> value;
  BasicMatrix<T> grad;
  bool trainable = true;

  BasicParam() = default;
  BasicParam(std::string n, BasicMatrix<T> v, bool train = true)
      : name(std::move(n)), value(std::move(v)), grad(value.rows(), value.cols()),
        trainable(train) {}

  void zero_grad() { grad.fill(T{0}); }
};

using Param = BasicParam<float>;

// ---------------------------------------------------------------------------
// Rng: xoshiro256** seeded through splitmix64. Normal draws use Box-Muller
// on 53-bit uniforms so streams are identical on every platform.
// ---------------------------------------------------------------------------

enum class RngStream : std::uint64_t {
  kInit = 0x1a2b3c4d5e6f7081ULL,
  kData = 0x9e3779b97f4a7c15ULL,
  kNoise = 0xd1b54a32d192ed03ULL,
  kPerturb = 0x94d049bb133111ebULL,
  kShuffle = 0xbf58476d1ce4e5b9ULL,
};

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

  /// Independent stream for one purpose (init / data / noise) of a run seed.
  static Rng stream(std::uint64_t seed, RngStream purpose) {
    return Rng(seed ^ static_cast<std::uint64_t>(purpose));
  }

  void reseed(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& s : state_) s = splitmix64(x);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [lo, hi].
  std::uint64_t uniform_int(std::uint64_t lo, std::uint64_t hi) {
    const std::uint64_t span = hi - lo + 1;
    if (span == 0) return next_u64();
    // Lemire-style rejection keeps the draw unbiased.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % span;
    std::uint64_t r;
    do {
      r = next_u64();
    } while (r >= limit);
    return lo + r % span;
  }

  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      const std::uint64_t j = uniform_int(0, i - 1);
      std::swap(first[i - 1], first[j]);
    }
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  static std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t state_[4] = {};
};

template <typename T>
BasicMatrix<T> gaussian_matrix(std::size_t rows, std::size_t cols, double scale, Rng& rng) {
  std::vector<T> data(rows * cols);
  for (auto& v : data) v = static_cast<T>(scale * rng.normal());
  return BasicMatrix<T>(rows, cols, std::move(data));
}

// ---------------------------------------------------------------------------
// Dense kernels. Each forward has a matching backward that accumulates (+=).
// ---------------------------------------------------------------------------

/// y = W x, W is out x in.
template <typename T>
void matvec(const BasicMatrix<T>& w, std::span<const T> x, std::span<T> y) {
  const std::size_t out = w.rows(), in = w.cols();
  for (std::size_t i = 0; i < out; ++i) {
    const T* wr = w.row(i).data();
    T acc = T{0};
    for (std::size_t j = 0; j < in; ++j) acc += wr[j] * x[j];
    y[i] = acc;
  }
}

/// Backward of y = W x: dW += dy x^T (when given), dx += W^T dy (when given).
template <typename T>
void matvec_backward(const BasicMatrix<T>& w, std::span<const T> x, std::span<const T> dy,
                     BasicMatrix<T>* dw, std::span<T> dx) {
  const std::size_t out = w.rows(), in = w.cols();
  for (std::size_t i = 0; i < out; ++i) {
    const T g = dy[i];
    if (g == T{0}) continue;
    if (dw != nullptr) {
      T* dwr = dw->row(i).data();
      for (std::size_t j = 0; j < in; ++j) dwr[j] += g * x[j];
    }
    if (!dx.empty()) {
      const T* wr = w.row(i).data();
      for (std::size_t j = 0; j < in; ++j) dx[j] += g * wr[j];
    }
  }
}

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
  T acc = T{0};
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
bool all_finite(std::span<const T> v) {
  return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

/// Max-subtracted softmax. Throws on empty or non-finite input.
template <typename T>
std::vector<T> softmax(std::span<const T> scores) {
  if (scores.empty()) throw std::invalid_argument("empty sequence");
  if (!all_finite(scores)) throw NumericalError("softmax input is not finite");
  const T mx = *std::max_element(scores.begin(), scores.end());
  std::vector<T> out(scores.size());
  T sum = T{0};
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = std::exp(scores[i] - mx);
    sum += out[i];
  }
  for (auto& v : out) v /= sum;
  return out;
}

template <typename T>
std::vector<T> softmax(const std::vector<T>& scores) {
  return softmax(std::span<const T>(scores));
}

/// ds_i = p_i (dp_i - sum_j p_j dp_j).
template <typename T>
void softmax_backward(std::span<const T> probs, std::span<const T> dprobs, std::span<T> dscores) {
  T inner = T{0};
  for (std::size_t i = 0; i < probs.size(); ++i) inner += probs[i] * dprobs[i];
  for (std::size_t i = 0; i < probs.size(); ++i) dscores[i] = probs[i] * (dprobs[i] - inner);
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

template <typename T>
T sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <typename T>
struct BceResult {
  T loss;  ///< -y log p - (1-y) log(1-p)
  T prob;  ///< sigmoid(logit)
  T dlogit;  ///< d loss / d logit = prob - y
};

/// Binary cross-entropy on a logit, in the log-sum-exp form
/// max(z,0) - z y + log1p(exp(-|z|)).
template <typename T>
BceResult<T> bce_logit_loss(T logit, int label) {
  if (label != 0 && label != 1) throw std::invalid_argument("label must be 0 or 1");
  if (!std::isfinite(logit)) throw NumericalError("logit is not finite");
  const T y = static_cast<T>(label);
  const T loss = std::max(logit, T{0}) - logit * y + std::log1p(std::exp(-std::abs(logit)));
  const T p = sigmoid(logit);
  return {loss, p, p - y};
}

/// KL(N(mu, diag exp(logvar)) || N(0, I)) = 1/2 sum(mu^2 + s2 - logvar - 1).
template <typename T>
T kl_diag_gaussian(std::span<const T> mu, std::span<const T> logvar) {
  if (mu.size() != logvar.size()) throw std::invalid_argument("kl: length mismatch");
  T acc = T{0};
  for (std::size_t j = 0; j < mu.size(); ++j) {
    acc += mu[j] * mu[j] + std::exp(logvar[j]) - logvar[j] - T{1};
  }
  return T{0.5} * acc;
}

/// dKL/dmu = mu, dKL/dlogvar = (exp(logvar) - 1) / 2, scaled and accumulated.
template <typename T>
void kl_diag_gaussian_backward(std::span<const T> mu, std::span<const T> logvar, T scale,
                               std::span<T> dmu, std::span<T> dlogvar) {
  for (std::size_t j = 0; j < mu.size(); ++j) {
    dmu[j] += scale * mu[j];
    dlogvar[j] += scale * T{0.5} * (std::exp(logvar[j]) - T{1});
  }
}

// ---------------------------------------------------------------------------
// grad_check
// ---------------------------------------------------------------------------

/// Loss callback for grad_check. When called with `true` it must zero and
/// then populate every param's grad with the analytic gradient.
template <typename T>
using LossFn = std::function<T(bool accumulate_grads)>;

/// Compares analytic gradients against central differences.
///
/// For each trainable tensor the error is max|a - n| / max(max|a|, max|n|, 1e-8)
/// over its entries; the returned value is the worst tensor. When
/// `max_entries_per_param` is nonzero, that many entries per tensor are drawn
/// with `rng` instead of checking every entry.
template <typename T>
double grad_check(const LossFn<T>& loss_fn, std::span<BasicParam<T>* const> params, Rng& rng,
                  double step, std::size_t max_entries_per_param = 0) {
  for (auto* p : params) p->zero_grad();
  const T base = loss_fn(true);
  std::vector<BasicMatrix<T>> analytic;
  analytic.reserve(params.size());
  for (auto* p : params) analytic.push_back(p->grad);

  const T again = loss_fn(false);
  if (std::memcmp(&base, &again, sizeof(T)) != 0) {
    throw std::runtime_error("loss not deterministic");
  }

  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto* p = params[pi];
    if (!p->trainable) continue;
    auto values = p->value.flat();
    std::vector<std::size_t> idx(values.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (max_entries_per_param != 0 && idx.size() > max_entries_per_param) {
      rng.shuffle(idx.begin(), idx.end());
      idx.resize(max_entries_per_param);
    }
    double max_diff = 0.0, max_mag = 1e-8;
    for (std::size_t i : idx) {
      const T saved = values[i];
      values[i] = static_cast<T>(saved + step);
      const double plus = loss_fn(false);
      values[i] = static_cast<T>(saved - step);
      const double minus = loss_fn(false);
      values[i] = saved;
      // The effective step after rounding to T, not the nominal one.
      const double h2 = static_cast<double>(static_cast<T>(saved + step)) -
                        static_cast<double>(static_cast<T>(saved - step));
      const double numeric = (plus - minus) / h2;
      const double a = analytic[pi].flat()[i];
      max_diff = std::max(max_diff, std::abs(a - numeric));
      max_mag = std::max({max_mag, std::abs(a), std::abs(numeric)});
    }
    worst = std::max(worst, max_diff / max_mag);
  }
  return worst;
}

}  // namespace proberoute
