#pragma once

// Parameter storage keyed by module path ("se/block0/qkv/w") plus the
// layer functions that read from it.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "daefuse/error.hpp"
#include "daefuse/tensor.hpp"

namespace daefuse {

struct ParameterEntry {
  Tensor tensor;
  bool trainable = true;  // false for running statistics
};

/// Value-semantic collection of named tensors: copies are deep.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore& other) { copy_from(other); }
  ParameterStore& operator=(const ParameterStore& other) {
    if (this != &other) {
      entries_.clear();
      copy_from(other);
    }
    return *this;
  }
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

  Tensor& add(const std::string& name, Dims dims, std::vector<double> values, bool trainable = true) {
    if (entries_.count(name)) fail(ErrorKind::ConfigError, "duplicate parameter '" + name + "'");
    auto& e = entries_[name];
    e.tensor = Tensor(dims, std::move(values), trainable);
    e.trainable = trainable;
    return e.tensor;
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  const Tensor& get(const std::string& name) const {
    const auto it = entries_.find(name);
    if (it == entries_.end()) fail(ErrorKind::ShapeError, "missing parameter '" + name + "'");
    return it->second.tensor;
  }
  Tensor& get(const std::string& name) {
    const auto it = entries_.find(name);
    if (it == entries_.end()) fail(ErrorKind::ShapeError, "missing parameter '" + name + "'");
    return it->second.tensor;
  }

  const std::map<std::string, ParameterEntry>& entries() const { return entries_; }

  static bool has_prefix(std::string_view name, std::string_view prefix) {
    return name.substr(0, prefix.size()) == prefix;
  }

  /// Trainable tensors under any of `prefixes`, in key order.
  std::vector<std::string> trainable_names(const std::vector<std::string>& prefixes) const {
    std::vector<std::string> out;
    for (const auto& [name, e] : entries_) {
      if (!e.trainable) continue;
      for (const auto& p : prefixes) {
        if (has_prefix(name, p)) {
          out.push_back(name);
          break;
        }
      }
    }
    return out;
  }

  void set_requires_grad(std::string_view prefix, bool on) {
    for (auto& [name, e] : entries_) {
      if (e.trainable && has_prefix(name, prefix)) e.tensor.set_requires_grad(on);
    }
  }

  void clear_grads() {
    for (auto& [name, e] : entries_) e.tensor.clear_grad();
  }

  bool all_finite() const {
    for (const auto& [name, e] : entries_) {
      if (!daefuse::all_finite(e.tensor)) return false;
    }
    return true;
  }

  friend bool operator==(const ParameterStore& x, const ParameterStore& y) {
    if (x.entries_.size() != y.entries_.size()) return false;
    for (auto ix = x.entries_.begin(), iy = y.entries_.begin(); ix != x.entries_.end(); ++ix, ++iy) {
      if (ix->first != iy->first || ix->second.trainable != iy->second.trainable) return false;
      if (ix->second.tensor.dims() != iy->second.tensor.dims()) return false;
      const auto a = ix->second.tensor.values();
      const auto b = iy->second.tensor.values();
      if (!std::equal(a.begin(), a.end(), b.begin())) return false;
    }
    return true;
  }

 private:
  void copy_from(const ParameterStore& other) {
    for (const auto& [name, e] : other.entries_) {
      auto& mine = entries_[name];
      mine.tensor = Tensor(e.tensor.dims(), std::vector<double>(e.tensor.values().begin(), e.tensor.values().end()),
                           e.tensor.requires_grad());
      mine.trainable = e.trainable;
    }
  }

  std::map<std::string, ParameterEntry> entries_;
};

// ---------------------------------------------------------------------------
// Initialization

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::string_view name) {
  std::uint64_t h = seed ^ 0x9e3779b97f4a7c15ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  // splitmix64 finalizer
  h += 0x9e3779b97f4a7c15ULL;
  h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ULL;
  h = (h ^ (h >> 27)) * 0x94d049bb133111ebULL;
  return h ^ (h >> 31);
}

inline std::vector<double> uniform_values(std::size_t count, double bound, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(count);
  for (double& x : v) x = dist(rng);
  return v;
}

}  // namespace detail

/// Seeded per-tensor so adding a layer never perturbs the others.
struct Initializer {
  std::uint64_t seed = 0;

  void conv(ParameterStore& store, const std::string& name, int in_ch, int out_ch, int kernel, bool bias = true,
            double gain = 1.0) const {
    const std::size_t fan_in = static_cast<std::size_t>(in_ch) * kernel * kernel;
    const double bound = gain * std::sqrt(3.0 / static_cast<double>(fan_in));
    store.add(name + "/w", {out_ch, in_ch, kernel, kernel},
              detail::uniform_values(static_cast<std::size_t>(out_ch) * fan_in, bound,
                                     detail::mix_seed(seed, name + "/w")));
    if (bias) store.add(name + "/b", {1, out_ch, 1, 1}, std::vector<double>(static_cast<std::size_t>(out_ch), 0.0));
  }

  void norm(ParameterStore& store, const std::string& name, int channels) const {
    store.add(name + "/g", {1, channels, 1, 1}, std::vector<double>(static_cast<std::size_t>(channels), 1.0));
    store.add(name + "/b", {1, channels, 1, 1}, std::vector<double>(static_cast<std::size_t>(channels), 0.0));
  }

  void batch_norm(ParameterStore& store, const std::string& name, int channels) const {
    norm(store, name, channels);
    store.add(name + "/running_mean", {1, channels, 1, 1},
              std::vector<double>(static_cast<std::size_t>(channels), 0.0), false);
    store.add(name + "/running_var", {1, channels, 1, 1},
              std::vector<double>(static_cast<std::size_t>(channels), 1.0), false);
  }

  void table(ParameterStore& store, const std::string& name, Dims dims, double bound) const {
    store.add(name, dims, detail::uniform_values(element_count(dims), bound, detail::mix_seed(seed, name)));
  }
};

// ---------------------------------------------------------------------------
// Layers

inline Tensor conv_layer(const ParameterStore& p, const std::string& name, const Tensor& x, int stride = 1) {
  const Tensor& w = p.get(name + "/w");
  const std::string bias_name = name + "/b";
  return conv2d(x, w, p.contains(bias_name) ? p.get(bias_name) : Tensor{}, stride);
}

/// Per-pixel normalization across channels with learned scale and shift.
inline Tensor channel_layer_norm(const ParameterStore& p, const std::string& name, const Tensor& x) {
  constexpr double eps = 1e-5;
  const Tensor mu = mean(x, {1});
  const Tensor centered = x - mu;
  const Tensor var = mean(square(centered), {1});
  const Tensor normed = centered / sqrt(var + eps);
  return normed * p.get(name + "/g") + p.get(name + "/b");
}

enum class Mode { Train, Eval };

/// Batch normalization over (N, H, W). Training mode normalizes with the
/// batch statistics and, when `running` is given, folds them into that
/// store's running buffers (momentum 0.1). Eval mode uses the buffers.
inline Tensor batch_norm(const ParameterStore& p, const std::string& name, const Tensor& x, Mode mode,
                         ParameterStore* running = nullptr) {
  constexpr double eps = 1e-5;
  constexpr double momentum = 0.1;
  Tensor normed;
  if (mode == Mode::Train) {
    const Tensor mu = mean(x, {0, 2, 3});
    const Tensor centered = x - mu;
    const Tensor var = mean(square(centered), {0, 2, 3});
    normed = centered / sqrt(var + eps);
    if (running) {
      const double count = static_cast<double>(x.dim(0)) * x.dim(2) * x.dim(3);
      const double unbias = count > 1 ? count / (count - 1.0) : 1.0;
      auto rm = running->get(name + "/running_mean").mutable_values();
      auto rv = running->get(name + "/running_var").mutable_values();
      for (std::size_t c = 0; c < rm.size(); ++c) {
        rm[c] = (1.0 - momentum) * rm[c] + momentum * mu.values()[c];
        rv[c] = (1.0 - momentum) * rv[c] + momentum * var.values()[c] * unbias;
      }
    }
  } else {
    normed = (x - p.get(name + "/running_mean").detach()) / sqrt(p.get(name + "/running_var").detach() + eps);
  }
  return normed * p.get(name + "/g") + p.get(name + "/b");
}

}  // namespace daefuse
