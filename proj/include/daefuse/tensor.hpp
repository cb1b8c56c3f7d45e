#pragma once

// Dense 4-D tensors (NCHW, double precision) with tape-free reverse-mode
// differentiation. Every op returns a new Tensor whose node remembers its
// parents and a closure that pushes the output gradient back into them.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "daefuse/error.hpp"

namespace daefuse {

using Dims = std::array<int, 4>;

/// Tensor storage. Eigen's vectorized reductions peel a prefix that depends
/// on the start address, so storage is aligned to keep results bit-exact
/// across runs.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

inline std::size_t element_count(const Dims& d) {
  return static_cast<std::size_t>(d[0]) * d[1] * d[2] * d[3];
}

inline std::string to_string(const Dims& d) {
  return "[" + std::to_string(d[0]) + "," + std::to_string(d[1]) + "," +
         std::to_string(d[2]) + "," + std::to_string(d[3]) + "]";
}

namespace detail {

struct Node {
  Dims dims{1, 1, 1, 1};
  Buffer value;
  Buffer grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

inline bool& no_grad_flag() {
  thread_local bool flag = false;
  return flag;
}

inline std::array<std::size_t, 4> strides_of(const Dims& d) {
  return {static_cast<std::size_t>(d[1]) * d[2] * d[3],
          static_cast<std::size_t>(d[2]) * d[3], static_cast<std::size_t>(d[3]), 1};
}

// Strides of `d` when read through a broadcast to `out`: size-1 axes that
// expand get stride 0.
inline std::array<std::size_t, 4> broadcast_strides(const Dims& d, const Dims& out) {
  auto s = strides_of(d);
  for (int i = 0; i < 4; ++i) {
    if (d[i] == 1 && out[i] != 1) s[i] = 0;
  }
  return s;
}

inline Dims broadcast_dims(const Dims& a, const Dims& b) {
  Dims out{};
  for (int i = 0; i < 4; ++i) {
    if (a[i] == b[i] || b[i] == 1) {
      out[i] = a[i];
    } else if (a[i] == 1) {
      out[i] = b[i];
    } else {
      fail(ErrorKind::ShapeError,
           "cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
  }
  return out;
}

}  // namespace detail

/// While alive, ops do not record the graph.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::no_grad_flag()) { detail::no_grad_flag() = true; }
  ~NoGradGuard() { detail::no_grad_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return !detail::no_grad_flag(); }

class Tensor {
 public:
  Tensor() = default;

  Tensor(Dims dims, const std::vector<double>& values, bool requires_grad = false)
      : Tensor(dims, Buffer(values.begin(), values.end()), requires_grad, Owned{}) {}

  static Tensor zeros(Dims dims, bool requires_grad = false) {
    return Tensor(dims, Buffer(element_count(dims), 0.0), requires_grad, Owned{});
  }
  static Tensor full(Dims dims, double v, bool requires_grad = false) {
    return Tensor(dims, Buffer(element_count(dims), v), requires_grad, Owned{});
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor({1, 1, 1, 1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Dims& dims() const { return node_->dims; }
  int dim(int axis) const { return node_->dims[static_cast<std::size_t>(axis)]; }
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  /// In-place access; only meaningful on leaves (parameters, buffers).
  std::span<double> mutable_values() { return node_->value; }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }

  double item() const {
    if (size() != 1) fail(ErrorKind::ShapeError, "item() on tensor of dims " + to_string(dims()));
    return node_->value[0];
  }
  double at(int n, int c, int h, int w) const {
    const auto s = detail::strides_of(dims());
    return node_->value[n * s[0] + c * s[1] + h * s[2] + static_cast<std::size_t>(w)];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }
  void clear_grad() { node_->grad.clear(); }

  Tensor detach() const { return Tensor(dims(), node_->value, false, Owned{}); }

  /// Reverse sweep from this (single-element) tensor. The graph behind it is
  /// released afterwards; leaves keep their accumulated gradients.
  void backward() const {
    if (size() != 1) fail(ErrorKind::ShapeError, "backward() needs a single-element root");
    if (!node_->requires_grad) return;

    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        detail::Node* parent = node->parents[next++].get();
        if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }

    node_->ensure_grad();
    node_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node* node = *it;
      if (node->backward_fn && node->grad.size() == node->value.size()) node->backward_fn(*node);
    }
    for (detail::Node* node : order) {
      if (node->backward_fn) {
        node->backward_fn = nullptr;
        node->parents.clear();
        if (node != node_.get()) node->grad.clear();
      }
    }
  }

  /// Builds an op result. The closure receives the result node and must
  /// accumulate into `parents[i]->grad` for parents that require grad.
  static Tensor make_result(Dims dims, Buffer values,
                            std::initializer_list<const Tensor*> parents,
                            std::function<void(detail::Node&)> backward_fn) {
    Tensor out(dims, std::move(values), false, Owned{});
    if (!grad_enabled()) return out;
    bool needs = false;
    for (const Tensor* p : parents) needs = needs || p->requires_grad();
    if (!needs) return out;
    out.node_->requires_grad = true;
    for (const Tensor* p : parents) out.node_->parents.push_back(p->node_);
    out.node_->backward_fn = std::move(backward_fn);
    return out;
  }

  static Tensor make_result(Dims dims, Buffer values,
                            const std::vector<Tensor>& parents,
                            std::function<void(detail::Node&)> backward_fn) {
    Tensor out(dims, std::move(values), false, Owned{});
    if (!grad_enabled()) return out;
    bool needs = false;
    for (const Tensor& p : parents) needs = needs || p.requires_grad();
    if (!needs) return out;
    out.node_->requires_grad = true;
    for (const Tensor& p : parents) out.node_->parents.push_back(p.node_);
    out.node_->backward_fn = std::move(backward_fn);
    return out;
  }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  struct Owned {};
  Tensor(Dims dims, Buffer values, bool requires_grad, Owned)
      : node_(std::make_shared<detail::Node>()) {
    if (values.size() != element_count(dims)) {
      fail(ErrorKind::ShapeError, "value count " + std::to_string(values.size()) +
                                      " does not match dims " + to_string(dims));
    }
    node_->dims = dims;
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline Buffer* grad_sink(Node& out, std::size_t parent) {
  Node& p = *out.parents[parent];
  if (!p.requires_grad) return nullptr;
  p.ensure_grad();
  return &p.grad;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class F, class DF>
Tensor unary_op(const Tensor& x, F f, DF df) {
  Buffer out(x.size());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return Tensor::make_result(x.dims(), std::move(out), {&x}, [df](detail::Node& node) {
    auto* gx = detail::grad_sink(node, 0);
    if (!gx) return;
    const auto& xv = node.parents[0]->value;
    for (std::size_t i = 0; i < node.grad.size(); ++i) {
      (*gx)[i] += node.grad[i] * df(xv[i], node.value[i]);
    }
  });
}

// df_a / df_b receive (a, b) and return the partial derivative.
template <class F, class DA, class DB>
Tensor binary_op(const Tensor& a, const Tensor& b, F f, DA dfa, DB dfb) {
  const Dims od = detail::broadcast_dims(a.dims(), b.dims());
  Buffer out(element_count(od));
  const auto av = a.values();
  const auto bv = b.values();
  const bool same = a.dims() == b.dims();
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
  } else {
    const auto sa = detail::broadcast_strides(a.dims(), od);
    const auto sb = detail::broadcast_strides(b.dims(), od);
    std::size_t o = 0;
    for (int i0 = 0; i0 < od[0]; ++i0)
      for (int i1 = 0; i1 < od[1]; ++i1)
        for (int i2 = 0; i2 < od[2]; ++i2)
          for (int i3 = 0; i3 < od[3]; ++i3, ++o) {
            const std::size_t ia = i0 * sa[0] + i1 * sa[1] + i2 * sa[2] + i3 * sa[3];
            const std::size_t ib = i0 * sb[0] + i1 * sb[1] + i2 * sb[2] + i3 * sb[3];
            out[o] = f(av[ia], bv[ib]);
          }
  }
  const Dims ad = a.dims();
  const Dims bd = b.dims();
  return Tensor::make_result(od, std::move(out), {&a, &b}, [=](detail::Node& node) {
    auto* ga = detail::grad_sink(node, 0);
    auto* gb = detail::grad_sink(node, 1);
    const auto& av = node.parents[0]->value;
    const auto& bv = node.parents[1]->value;
    if (same) {
      for (std::size_t i = 0; i < node.grad.size(); ++i) {
        const double g = node.grad[i];
        if (ga) (*ga)[i] += g * dfa(av[i], bv[i]);
        if (gb) (*gb)[i] += g * dfb(av[i], bv[i]);
      }
      return;
    }
    const auto sa = detail::broadcast_strides(ad, od);
    const auto sb = detail::broadcast_strides(bd, od);
    std::size_t o = 0;
    for (int i0 = 0; i0 < od[0]; ++i0)
      for (int i1 = 0; i1 < od[1]; ++i1)
        for (int i2 = 0; i2 < od[2]; ++i2)
          for (int i3 = 0; i3 < od[3]; ++i3, ++o) {
            const std::size_t ia = i0 * sa[0] + i1 * sa[1] + i2 * sa[2] + i3 * sa[3];
            const std::size_t ib = i0 * sb[0] + i1 * sb[1] + i2 * sb[2] + i3 * sb[3];
            const double g = node.grad[o];
            if (ga) (*ga)[ia] += g * dfa(av[ia], bv[ib]);
            if (gb) (*gb)[ib] += g * dfb(av[ia], bv[ib]);
          }
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}
inline Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}
/// Elementwise max; ties route the gradient to `a`.
inline Tensor maximum(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x >= y ? x : y; },
      [](double x, double y) { return x >= y ? 1.0 : 0.0; },
      [](double x, double y) { return x >= y ? 0.0 : 1.0; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

inline Tensor add_scalar(const Tensor& x, double s) {
  return unary_op(x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}
inline Tensor mul_scalar(const Tensor& x, double s) {
  return unary_op(x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}
inline Tensor operator+(const Tensor& x, double s) { return add_scalar(x, s); }
inline Tensor operator+(double s, const Tensor& x) { return add_scalar(x, s); }
inline Tensor operator-(const Tensor& x, double s) { return add_scalar(x, -s); }
inline Tensor operator-(double s, const Tensor& x) {
  return unary_op(x, [s](double v) { return s - v; }, [](double, double) { return -1.0; });
}
inline Tensor operator*(const Tensor& x, double s) { return mul_scalar(x, s); }
inline Tensor operator*(double s, const Tensor& x) { return mul_scalar(x, s); }
inline Tensor operator-(const Tensor& x) { return mul_scalar(x, -1.0); }

inline Tensor square(const Tensor& x) {
  return unary_op(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}
inline Tensor sqrt(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}
inline Tensor exp(const Tensor& x) {
  return unary_op(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}
inline Tensor log(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}
inline Tensor abs(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}
inline Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary_op(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}
inline Tensor sigmoid(const Tensor& x) {
  return unary_op(
      x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}
inline Tensor leaky_relu(const Tensor& x, double slope) {
  return unary_op(
      x, [slope](double v) { return v > 0 ? v : slope * v; },
      [slope](double v, double) { return v > 0 ? 1.0 : slope; });
}
/// tanh approximation of GELU.
inline Tensor gelu(const Tensor& x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  return unary_op(
      x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(k * (v + c * v * v * v))); },
      [](double v, double) {
        const double t = std::tanh(k * (v + c * v * v * v));
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * k * (1.0 + 3.0 * c * v * v);
      });
}

// ---------------------------------------------------------------------------
// Reductions (dims are kept, reduced axes become 1)

inline Tensor sum(const Tensor& x, std::initializer_list<int> axes) {
  Dims od = x.dims();
  for (int a : axes) od[static_cast<std::size_t>(a)] = 1;
  const Dims xd = x.dims();
  const auto so = detail::broadcast_strides(od, xd);
  Buffer out(element_count(od), 0.0);
  const auto xv = x.values();
  std::size_t i = 0;
  for (int i0 = 0; i0 < xd[0]; ++i0)
    for (int i1 = 0; i1 < xd[1]; ++i1)
      for (int i2 = 0; i2 < xd[2]; ++i2)
        for (int i3 = 0; i3 < xd[3]; ++i3, ++i)
          out[i0 * so[0] + i1 * so[1] + i2 * so[2] + i3 * so[3]] += xv[i];
  return Tensor::make_result(od, std::move(out), {&x}, [xd, so](detail::Node& node) {
    auto* gx = detail::grad_sink(node, 0);
    if (!gx) return;
    std::size_t i = 0;
    for (int i0 = 0; i0 < xd[0]; ++i0)
      for (int i1 = 0; i1 < xd[1]; ++i1)
        for (int i2 = 0; i2 < xd[2]; ++i2)
          for (int i3 = 0; i3 < xd[3]; ++i3, ++i)
            (*gx)[i] += node.grad[i0 * so[0] + i1 * so[1] + i2 * so[2] + i3 * so[3]];
  });
}

inline Tensor mean(const Tensor& x, std::initializer_list<int> axes) {
  std::size_t count = 1;
  for (int a : axes) count *= static_cast<std::size_t>(x.dim(a));
  return mul_scalar(sum(x, axes), 1.0 / static_cast<double>(count));
}

inline Tensor sum_all(const Tensor& x) { return sum(x, {0, 1, 2, 3}); }
inline Tensor mean_all(const Tensor& x) { return mean(x, {0, 1, 2, 3}); }

// ---------------------------------------------------------------------------
// Layout

/// out[i] = x[index[i]]; gradients scatter-add back.
inline Tensor gather(const Tensor& x, Dims out_dims, std::shared_ptr<const std::vector<std::size_t>> index) {
  if (index->size() != element_count(out_dims)) {
    fail(ErrorKind::ShapeError, "gather index size does not match output dims");
  }
  Buffer out(index->size());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[(*index)[i]];
  return Tensor::make_result(out_dims, std::move(out), {&x}, [index](detail::Node& node) {
    auto* gx = detail::grad_sink(node, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < node.grad.size(); ++i) (*gx)[(*index)[i]] += node.grad[i];
  });
}

/// Builds a gather index from a map of output coordinates to input flat index.
template <class Map>
std::shared_ptr<const std::vector<std::size_t>> make_index(const Dims& out_dims, Map map) {
  auto index = std::make_shared<std::vector<std::size_t>>(element_count(out_dims));
  std::size_t i = 0;
  for (int i0 = 0; i0 < out_dims[0]; ++i0)
    for (int i1 = 0; i1 < out_dims[1]; ++i1)
      for (int i2 = 0; i2 < out_dims[2]; ++i2)
        for (int i3 = 0; i3 < out_dims[3]; ++i3) (*index)[i++] = map(i0, i1, i2, i3);
  return index;
}

inline Tensor reshape(const Tensor& x, Dims dims) {
  if (element_count(dims) != x.size()) {
    fail(ErrorKind::ShapeError, "cannot reshape " + to_string(x.dims()) + " to " + to_string(dims));
  }
  Buffer out(x.values().begin(), x.values().end());
  return Tensor::make_result(dims, std::move(out), {&x}, [](detail::Node& node) {
    auto* gx = detail::grad_sink(node, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < node.grad.size(); ++i) (*gx)[i] += node.grad[i];
  });
}

/// Swaps the last two axes.
inline Tensor transpose_last(const Tensor& x) {
  const Dims d = x.dims();
  const Dims od{d[0], d[1], d[3], d[2]};
  const auto s = detail::strides_of(d);
  return gather(x, od, make_index(od, [&](int a, int b, int r, int c) {
                  return a * s[0] + b * s[1] + c * s[2] + static_cast<std::size_t>(r);
                }));
}

/// Contiguous range [start, start+length) along one axis.
inline Tensor slice(const Tensor& x, int axis, int start, int length) {
  const Dims d = x.dims();
  if (start < 0 || length < 1 || start + length > d[static_cast<std::size_t>(axis)]) {
    fail(ErrorKind::ShapeError, "slice out of range on axis " + std::to_string(axis));
  }
  Dims od = d;
  od[static_cast<std::size_t>(axis)] = length;
  const auto s = detail::strides_of(d);
  return gather(x, od, make_index(od, [&](int a, int b, int c, int e) {
                  std::array<int, 4> idx{a, b, c, e};
                  idx[static_cast<std::size_t>(axis)] += start;
                  return idx[0] * s[0] + idx[1] * s[1] + idx[2] * s[2] +
                         static_cast<std::size_t>(idx[3]);
                }));
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) fail(ErrorKind::ShapeError, "concat of nothing");
  Dims od = parts[0].dims();
  od[static_cast<std::size_t>(axis)] = 0;
  for (const Tensor& p : parts) {
    for (int i = 0; i < 4; ++i) {
      if (i != axis && p.dim(i) != parts[0].dim(i)) {
        fail(ErrorKind::ShapeError, "concat dims mismatch: " + to_string(p.dims()) + " vs " +
                                        to_string(parts[0].dims()));
      }
    }
    od[static_cast<std::size_t>(axis)] += p.dim(axis);
  }
  // outer = product of dims before axis, inner = product after (including axis size)
  std::size_t outer = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(od[static_cast<std::size_t>(i)]);
  std::vector<std::size_t> chunk(parts.size());
  std::size_t out_chunk = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    chunk[k] = parts[k].size() / outer;
    out_chunk += chunk[k];
  }
  Buffer out(element_count(od));
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t offset = o * out_chunk;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const auto v = parts[k].values();
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(o * chunk[k]), chunk[k],
                  out.begin() + static_cast<std::ptrdiff_t>(offset));
      offset += chunk[k];
    }
  }
  return Tensor::make_result(od, std::move(out), parts, [outer, chunk, out_chunk](detail::Node& node) {
    for (std::size_t k = 0; k < chunk.size(); ++k) {
      auto* g = detail::grad_sink(node, k);
      if (!g) continue;
      std::size_t before = 0;
      for (std::size_t j = 0; j < k; ++j) before += chunk[j];
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t e = 0; e < chunk[k]; ++e) {
          (*g)[o * chunk[k] + e] += node.grad[o * out_chunk + before + e];
        }
      }
    }
  });
}

/// Reflection index for arbitrary offsets (folds repeatedly for large pads).
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

inline Tensor pad_reflect(const Tensor& x, int top, int bottom, int left, int right) {
  const Dims d = x.dims();
  const Dims od{d[0], d[1], d[2] + top + bottom, d[3] + left + right};
  const auto s = detail::strides_of(d);
  return gather(x, od, make_index(od, [&](int n, int c, int h, int w) {
                  return n * s[0] + c * s[1] +
                         static_cast<std::size_t>(reflect_index(h - top, d[2])) * s[2] +
                         static_cast<std::size_t>(reflect_index(w - left, d[3]));
                }));
}

inline Tensor crop(const Tensor& x, int top, int left, int height, int width) {
  const Dims d = x.dims();
  if (top < 0 || left < 0 || top + height > d[2] || left + width > d[3]) {
    fail(ErrorKind::ShapeError, "crop out of bounds for " + to_string(d));
  }
  const Dims od{d[0], d[1], height, width};
  const auto s = detail::strides_of(d);
  return gather(x, od, make_index(od, [&](int n, int c, int h, int w) {
                  return n * s[0] + c * s[1] + static_cast<std::size_t>(h + top) * s[2] +
                         static_cast<std::size_t>(w + left);
                }));
}

// ---------------------------------------------------------------------------
// Linear algebra

/// Batched matrix product over the last two axes: [a,b,M,K] x [a,b,K,N].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Map = Eigen::Map<RowMatrix>;
  using ConstMap = Eigen::Map<const RowMatrix>;
  const Dims ad = a.dims();
  const Dims bd = b.dims();
  if (ad[0] != bd[0] || ad[1] != bd[1] || ad[3] != bd[2]) {
    fail(ErrorKind::ShapeError, "matmul " + to_string(ad) + " x " + to_string(bd));
  }
  const int batch = ad[0] * ad[1];
  const int m = ad[2], k = ad[3], n = bd[3];
  const Dims od{ad[0], ad[1], m, n};
  Buffer out(element_count(od), 0.0);
  const std::size_t sa = static_cast<std::size_t>(m) * k, sb = static_cast<std::size_t>(k) * n,
                    sc = static_cast<std::size_t>(m) * n;
  for (int t = 0; t < batch; ++t) {
    Map(out.data() + t * sc, m, n).noalias() =
        ConstMap(a.values().data() + t * sa, m, k) * ConstMap(b.values().data() + t * sb, k, n);
  }
  return Tensor::make_result(od, std::move(out), {&a, &b}, [=](detail::Node& node) {
    auto* ga = detail::grad_sink(node, 0);
    auto* gb = detail::grad_sink(node, 1);
    const auto& av = node.parents[0]->value;
    const auto& bv = node.parents[1]->value;
    for (int t = 0; t < batch; ++t) {
      const ConstMap G(node.grad.data() + t * sc, m, n);
      if (ga) Map(ga->data() + t * sa, m, k).noalias() += G * ConstMap(bv.data() + t * sb, k, n).transpose();
      if (gb) Map(gb->data() + t * sb, k, n).noalias() += ConstMap(av.data() + t * sa, m, k).transpose() * G;
    }
  });
}

/// Softmax along the last axis.
inline Tensor softmax_last(const Tensor& x) {
  const Dims d = x.dims();
  const std::size_t cols = static_cast<std::size_t>(d[3]);
  const std::size_t rows = x.size() / cols;
  Buffer out(x.size());
  const auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * cols;
    double* o = out.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) total += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < cols; ++j) o[j] /= total;
  }
  return Tensor::make_result(d, std::move(out), {&x}, [rows, cols](detail::Node& node) {
    auto* gx = detail::grad_sink(node, 0);
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = node.value.data() + r * cols;
      const double* g = node.grad.data() + r * cols;
      double dot = 0.0;
      for (std::size_t j = 0; j < cols; ++j) dot += y[j] * g[j];
      for (std::size_t j = 0; j < cols; ++j) (*gx)[r * cols + j] += y[j] * (g[j] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution (im2col + GEMM)

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeometry {
  int ci, h, w, kh, kw, stride, pad_h, pad_w, ho, wo;

  bool is_pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad_h == 0 && pad_w == 0; }
  Eigen::Index rows() const { return static_cast<Eigen::Index>(ci) * kh * kw; }
  Eigen::Index cols() const { return static_cast<Eigen::Index>(ho) * wo; }
};

// Row (ci, ky, kx) of `cols` holds the input sample under that kernel tap
// for every output position; out-of-bounds taps read zero.
inline void im2col(const double* in, const ConvGeometry& g, RowMatrix& cols) {
  cols.setZero(g.rows(), g.cols());
  for (int c = 0; c < g.ci; ++c)
    for (int ky = 0; ky < g.kh; ++ky)
      for (int kx = 0; kx < g.kw; ++kx) {
        double* row = cols.row((static_cast<Eigen::Index>(c) * g.kh + ky) * g.kw + kx).data();
        const double* plane = in + static_cast<std::size_t>(c) * g.h * g.w;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride + ky - g.pad_h;
          if (iy < 0 || iy >= g.h) continue;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride + kx - g.pad_w;
            if (ix >= 0 && ix < g.w) row[oy * g.wo + ox] = plane[iy * g.w + ix];
          }
        }
      }
}

inline void col2im_add(const RowMatrix& cols, const ConvGeometry& g, double* out) {
  for (int c = 0; c < g.ci; ++c)
    for (int ky = 0; ky < g.kh; ++ky)
      for (int kx = 0; kx < g.kw; ++kx) {
        const double* row = cols.row((static_cast<Eigen::Index>(c) * g.kh + ky) * g.kw + kx).data();
        double* plane = out + static_cast<std::size_t>(c) * g.h * g.w;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride + ky - g.pad_h;
          if (iy < 0 || iy >= g.h) continue;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride + kx - g.pad_w;
            if (ix >= 0 && ix < g.w) plane[iy * g.w + ix] += row[oy * g.wo + ox];
          }
        }
      }
}

}  // namespace detail

/// 2-D cross-correlation with zero padding. x [N,Ci,H,W], w [Co,Ci,KH,KW],
/// bias [1,Co,1,1] or undefined.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad_h,
                     int pad_w) {
  const Dims xd = x.dims();
  const Dims wd = w.dims();
  if (wd[1] != xd[1]) {
    fail(ErrorKind::ShapeError, "conv2d expects " + std::to_string(wd[1]) +
                                    " input channels, got " + std::to_string(xd[1]));
  }
  const int N = xd[0], Co = wd[0];
  detail::ConvGeometry g{xd[1], xd[2], xd[3], wd[2], wd[3], stride, pad_h, pad_w, 0, 0};
  g.ho = (g.h + 2 * pad_h - g.kh) / stride + 1;
  g.wo = (g.w + 2 * pad_w - g.kw) / stride + 1;
  if (g.ho < 1 || g.wo < 1) fail(ErrorKind::ShapeError, "conv2d output would be empty");
  const bool has_bias = bias.defined();
  if (has_bias && bias.size() != static_cast<std::size_t>(Co)) {
    fail(ErrorKind::ShapeError, "conv2d bias size mismatch");
  }
  const Dims od{N, Co, g.ho, g.wo};
  Buffer out(element_count(od), 0.0);
  const std::size_t in_item = static_cast<std::size_t>(g.ci) * g.h * g.w;
  const std::size_t out_item = static_cast<std::size_t>(Co) * g.ho * g.wo;
  using Map = Eigen::Map<detail::RowMatrix>;
  using ConstMap = Eigen::Map<const detail::RowMatrix>;
  const ConstMap W(w.values().data(), Co, g.rows());

  detail::RowMatrix cols;
  for (int n = 0; n < N; ++n) {
    const double* in = x.values().data() + n * in_item;
    Map O(out.data() + n * out_item, Co, g.cols());
    if (g.is_pointwise()) {
      O.noalias() = W * ConstMap(in, g.rows(), g.cols());
    } else {
      detail::im2col(in, g, cols);
      O.noalias() = W * cols;
    }
    if (has_bias) O.colwise() += Eigen::Map<const Eigen::VectorXd>(bias.values().data(), Co);
  }

  std::vector<Tensor> parents{x, w};
  if (has_bias) parents.push_back(bias);
  return Tensor::make_result(od, std::move(out), parents, [=](detail::Node& node) {
    auto* gx = detail::grad_sink(node, 0);
    auto* gw = detail::grad_sink(node, 1);
    auto* gb = has_bias ? detail::grad_sink(node, 2) : nullptr;
    const ConstMap W(node.parents[1]->value.data(), Co, g.rows());
    detail::RowMatrix cols, gcols;
    for (int n = 0; n < N; ++n) {
      const ConstMap G(node.grad.data() + n * out_item, Co, g.cols());
      const double* in = node.parents[0]->value.data() + n * in_item;
      if (gb) Eigen::Map<Eigen::VectorXd>(gb->data(), Co) += G.rowwise().sum();
      if (gw) {
        Map GW(gw->data(), Co, g.rows());
        if (g.is_pointwise()) {
          GW.noalias() += G * ConstMap(in, g.rows(), g.cols()).transpose();
        } else {
          detail::im2col(in, g, cols);
          GW.noalias() += G * cols.transpose();
        }
      }
      if (gx) {
        if (g.is_pointwise()) {
          Map(gx->data() + n * in_item, g.rows(), g.cols()).noalias() += W.transpose() * G;
        } else {
          gcols.noalias() = W.transpose() * G;
          detail::col2im_add(gcols, g, gx->data() + n * in_item);
        }
      }
    }
  });
}

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride = 1) {
  return conv2d(x, w, bias, stride, w.dim(2) / 2, w.dim(3) / 2);
}

// ---------------------------------------------------------------------------
// Checks

inline bool all_finite(const Tensor& t) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

inline void require_finite(const Tensor& t, const std::string& what) {
  if (!all_finite(t)) fail(ErrorKind::NumericalError, "non-finite values in " + what);
}

}  // namespace daefuse
