#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "daefuse/error.hpp"
#include "daefuse/nn.hpp"

namespace daefuse {

/// lr0 * factor^floor(epoch / every)
inline double lr_schedule(int epoch, double lr0, double factor = 0.5, int every = 20) {
  if (epoch < 0) fail(ErrorKind::ConfigError, "epoch must be >= 0");
  return lr0 * std::pow(factor, epoch / every);
}

/// Per-parameter moment buffers plus the step counter.
struct OptimizerState {
  std::map<std::string, std::vector<double>> first;
  std::map<std::string, std::vector<double>> second;
  std::int64_t steps = 0;

  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

namespace detail {

inline std::vector<double>& buffer_for(std::map<std::string, std::vector<double>>& m, const std::string& name,
                                       std::size_t size) {
  auto& b = m[name];
  if (b.size() != size) b.assign(size, 0.0);
  return b;
}

}  // namespace detail

/// Adam with bias correction. Parameters without a gradient are skipped.
class Adam {
 public:
  Adam(std::vector<std::string> names, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : names_(std::move(names)), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParameterStore& store, double lr) {
    ++state_.steps;
    const double t = static_cast<double>(state_.steps);
    const double c1 = 1.0 - std::pow(beta1_, t);
    const double c2 = 1.0 - std::pow(beta2_, t);
    for (const auto& name : names_) {
      Tensor& p = store.get(name);
      if (!p.has_grad()) continue;
      auto value = p.mutable_values();
      const auto g = p.grad();
      auto& m = detail::buffer_for(state_.first, name, value.size());
      auto& v = detail::buffer_for(state_.second, name, value.size());
      for (std::size_t i = 0; i < value.size(); ++i) {
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
        value[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      }
      p.clear_grad();
    }
  }

  const std::vector<std::string>& names() const { return names_; }
  const OptimizerState& state() const { return state_; }
  void set_state(OptimizerState s) { state_ = std::move(s); }

 private:
  std::vector<std::string> names_;
  double beta1_, beta2_, eps_;
  OptimizerState state_;
};

/// RMSProp: v = alpha v + (1-alpha) g^2; p -= lr g / (sqrt(v) + eps).
class RMSProp {
 public:
  RMSProp(std::vector<std::string> names, double alpha = 0.99, double eps = 1e-8)
      : names_(std::move(names)), alpha_(alpha), eps_(eps) {}

  void step(ParameterStore& store, double lr) {
    ++state_.steps;
    for (const auto& name : names_) {
      Tensor& p = store.get(name);
      if (!p.has_grad()) continue;
      auto value = p.mutable_values();
      const auto g = p.grad();
      auto& v = detail::buffer_for(state_.second, name, value.size());
      for (std::size_t i = 0; i < value.size(); ++i) {
        v[i] = alpha_ * v[i] + (1.0 - alpha_) * g[i] * g[i];
        value[i] -= lr * g[i] / (std::sqrt(v[i]) + eps_);
      }
      p.clear_grad();
    }
  }

  const std::vector<std::string>& names() const { return names_; }
  const OptimizerState& state() const { return state_; }
  void set_state(OptimizerState s) { state_ = std::move(s); }

 private:
  std::vector<std::string> names_;
  double alpha_, eps_;
  OptimizerState state_;
};

}  // namespace daefuse
