#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <unordered_set>
#include <utility>
#include <vector>

#include "slab/common.hpp"
#include "slab/kernels.hpp"

// Dense n-d tensor with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle to a graph node holding the value, an optional
// gradient, and a backward closure. Ops build the graph only while gradient
// recording is enabled and some input requires a gradient; in eval paths they
// degrade to plain kernel calls. A single graph is single-threaded; value
// buffers are never mutated after construction except for parameter updates
// between steps (see mutable_value).

namespace slab {

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(detail::NodePtr<T> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape) {
    auto n = std::make_shared<detail::Node<T>>();
    n->value.assign(numel_of(shape), T(0));
    n->shape = std::move(shape);
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, T v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.node_->value.begin(), t.node_->value.end(), v);
    return t;
  }

  static Tensor scalar(T v) { return full({1}, v); }

  static Tensor from_data(Shape shape, std::vector<T> data) {
    if (numel_of(shape) != data.size())
      throw ShapeMismatch("from_data: shape " + shape_str(shape) + " does not hold " +
                          std::to_string(data.size()) + " values");
    auto n = std::make_shared<detail::Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    return Tensor(std::move(n));
  }

  template <typename Rng>
  static Tensor randn(Shape shape, Rng& rng, T stddev = T(1), T mean = T(0)) {
    Tensor t = zeros(std::move(shape));
    std::normal_distribution<double> d(0.0, 1.0);
    for (auto& v : t.node_->value) v = mean + stddev * T(d(rng));
    return t;
  }

  template <typename Rng>
  static Tensor rand_uniform(Shape shape, Rng& rng, T lo = T(0), T hi = T(1)) {
    Tensor t = zeros(std::move(shape));
    std::uniform_real_distribution<double> d{double(lo), double(hi)};
    for (auto& v : t.node_->value) v = T(d(rng));
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[i]; }
  int rank() const { return int(node_->shape.size()); }
  size_t size() const { return node_->value.size(); }
  const T* data() const { return node_->value.data(); }
  const std::vector<T>& value() const { return node_->value; }

  // Parameter updates only; never mutate a value that feeds a live graph.
  std::vector<T>& mutable_value() { return node_->value; }

  T item() const {
    if (size() != 1) throw NotScalar("item: tensor has " + std::to_string(size()) + " elements");
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool b = true) {
    node_->requires_grad = b;
    return *this;
  }

  std::optional<Tensor> grad() const {
    if (node_->grad.empty()) return std::nullopt;
    return from_data(node_->shape, node_->grad);
  }
  const std::vector<T>& grad_ref() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  // Detached copy: same values, no history, no grad requirement.
  Tensor detach() const { return from_data(node_->shape, node_->value); }

  detail::NodePtr<T> node() const { return node_; }

 private:
  detail::NodePtr<T> node_;
};

namespace detail {

template <typename T>
NodePtr<T> alloc_node(Shape shape) {
  auto n = std::make_shared<Node<T>>();
  n->value.assign(numel_of(shape), T(0));
  n->shape = std::move(shape);
  return n;
}

template <typename T>
bool track(const Tensor<T>& t) {
  return grad_enabled_flag() && t.requires_grad();
}

template <typename T, typename... Ts>
bool track(const Tensor<T>& t, const Ts&... rest) {
  return track(t) || track(rest...);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// backward

template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1)
    throw NotScalar("backward: loss has " + std::to_string(loss.size()) + " elements");
  auto root = loss.node();
  if (!root->requires_grad) return;

  // Post-order DFS over the requires_grad subgraph.
  std::vector<detail::Node<T>*> order;
  std::unordered_set<detail::Node<T>*> visited;
  std::vector<std::pair<detail::Node<T>*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      detail::Node<T>* p = node->parents[idx++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node<T>* n = *it;
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
  }
}

// ---------------------------------------------------------------------------
// elementwise and shape ops

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeMismatch("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto out = detail::alloc_node<T>(a.shape());
  kernels::add(a.data(), b.data(), out->value.data(), a.size());
  if (detail::track(a, b)) {
    out->requires_grad = true;
    out->parents = {a.node(), b.node()};
    auto an = a.node(), bn = b.node();
    out->backprop = [an, bn](detail::Node<T>& self) {
      for (auto* p : {an.get(), bn.get()})
        if (p->requires_grad) {
          p->ensure_grad();
          for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
        }
    };
  }
  return Tensor<T>(std::move(out));
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeMismatch("sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto out = detail::alloc_node<T>(a.shape());
  for (size_t i = 0; i < a.size(); ++i) out->value[i] = a.data()[i] - b.data()[i];
  if (detail::track(a, b)) {
    out->requires_grad = true;
    out->parents = {a.node(), b.node()};
    auto an = a.node(), bn = b.node();
    out->backprop = [an, bn](detail::Node<T>& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
      }
    };
  }
  return Tensor<T>(std::move(out));
}

template <typename T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeMismatch("hadamard: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto out = detail::alloc_node<T>(a.shape());
  for (size_t i = 0; i < a.size(); ++i) out->value[i] = a.data()[i] * b.data()[i];
  if (detail::track(a, b)) {
    out->requires_grad = true;
    out->parents = {a.node(), b.node()};
    auto an = a.node(), bn = b.node();
    out->backprop = [an, bn](detail::Node<T>& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->value[i];
      }
    };
  }
  return Tensor<T>(std::move(out));
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  auto out = detail::alloc_node<T>(a.shape());
  for (size_t i = 0; i < a.size(); ++i) out->value[i] = a.data()[i] * s;
  if (detail::track(a)) {
    out->requires_grad = true;
    out->parents = {a.node()};
    auto an = a.node();
    out->backprop = [an, s](detail::Node<T>& self) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * s;
    };
  }
  return Tensor<T>(std::move(out));
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  auto out = detail::alloc_node<T>(x.shape());
  kernels::relu(x.data(), out->value.data(), x.size());
  if (detail::track(x)) {
    out->requires_grad = true;
    out->parents = {x.node()};
    auto xn = x.node();
    // Subgradient at 0 is 0.
    out->backprop = [xn](detail::Node<T>& self) {
      xn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        if (xn->value[i] > T(0)) xn->grad[i] += self.grad[i];
    };
  }
  return Tensor<T>(std::move(out));
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  auto out = detail::alloc_node<T>(x.shape());
  kernels::gelu(x.data(), out->value.data(), x.size());
  if (detail::track(x)) {
    out->requires_grad = true;
    out->parents = {x.node()};
    auto xn = x.node();
    out->backprop = [xn](detail::Node<T>& self) {
      xn->ensure_grad();
      const T inv_sqrt2 = T(0.7071067811865475244);
      const T inv_sqrt2pi = T(0.3989422804014326779);
      for (size_t i = 0; i < self.grad.size(); ++i) {
        T v = xn->value[i];
        T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
        xn->grad[i] += self.grad[i] * (cdf + v * pdf);
      }
    };
  }
  return Tensor<T>(std::move(out));
}

template <typename T>
Tensor<T> rsqrt_eps(const Tensor<T>& x, T eps) {
  auto out = detail::alloc_node<T>(x.shape());
  for (size_t i = 0; i < x.size(); ++i) out->value[i] = T(1) / std::sqrt(x.data()[i] + eps);
  if (detail::track(x)) {
    out->requires_grad = true;
    out->parents = {x.node()};
    auto xn = x.node();
    out->backprop = [xn, eps](detail::Node<T>& self) {
      xn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) {
        T r = self.value[i];  // (x+eps)^{-1/2}
        xn->grad[i] += self.grad[i] * T(-0.5) * r * r * r;
      }
    };
  }
  return Tensor<T>(std::move(out));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.size())
    throw ShapeMismatch("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  auto out = detail::alloc_node<T>(std::move(shape));
  out->value = x.value();
  if (detail::track(x)) {
    out->requires_grad = true;
    out->parents = {x.node()};
    auto xn = x.node();
    out->backprop = [xn](detail::Node<T>& self) {
      xn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
    };
  }
  return Tensor<T>(std::move(out));
}

// ---------------------------------------------------------------------------
// matrix ops

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeMismatch("matmul: expects rank-2 operands, got " + shape_str(a.shape()) +
                        " and " + shape_str(b.shape()));
  int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw ShapeMismatch("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                        shape_str(b.shape()));
  auto out = detail::alloc_node<T>({m, n});
  kernels::matmul(a.data(), b.data(), out->value.data(), m, k, n);
  if (detail::track(a, b)) {
    out->requires_grad = true;
    out->parents = {a.node(), b.node()};
    auto an = a.node(), bn = b.node();
    out->backprop = [an, bn, m, k, n](detail::Node<T>& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        std::vector<T> da(size_t(m) * k);
        kernels::matmul_nt(self.grad.data(), bn->value.data(), da.data(), m, n, k);
        for (size_t i = 0; i < da.size(); ++i) an->grad[i] += da[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        std::vector<T> db(size_t(k) * n);
        kernels::matmul_tn(an->value.data(), self.grad.data(), db.data(), k, m, n);
        for (size_t i = 0; i < db.size(); ++i) bn->grad[i] += db[i];
      }
    };
  }
  return Tensor<T>(std::move(out));
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeMismatch("transpose2d: expects rank-2, got " + shape_str(x.shape()));
  int r = x.dim(0), c = x.dim(1);
  auto out = detail::alloc_node<T>({c, r});
  kernels::transpose(x.data(), out->value.data(), r, c);
  if (detail::track(x)) {
    out->requires_grad = true;
    out->parents = {x.node()};
    auto xn = x.node();
    out->backprop = [xn, r, c](detail::Node<T>& self) {
      xn->ensure_grad();
      for (int i = 0; i < c; ++i)
        for (int j = 0; j < r; ++j) xn->grad[size_t(j) * c + i] += self.grad[size_t(i) * r + j];
    };
  }
  return Tensor<T>(std::move(out));
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  auto out = detail::alloc_node<T>({1});
  T acc = 0;
  for (size_t i = 0; i < x.size(); ++i) acc += x.data()[i];
  out->value[0] = acc;
  if (detail::track(x)) {
    out->requires_grad = true;
    out->parents = {x.node()};
    auto xn = x.node();
    out->backprop = [xn](detail::Node<T>& self) {
      xn->ensure_grad();
      for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += self.grad[0];
    };
  }
  return Tensor<T>(std::move(out));
}

namespace detail {

// Maps every flat input index to the flat index of the kept (non-reduced)
// coordinates. Shared by reduce_moments' two outputs.
template <typename T>
std::shared_ptr<std::vector<size_t>> reduction_index_map(const Shape& shape,
                                                         const std::vector<int>& axes,
                                                         Shape* out_shape, size_t* count) {
  std::vector<bool> reduced(shape.size(), false);
  for (int a : axes) {
    if (a < 0 || a >= int(shape.size()))
      throw ShapeMismatch("reduce: axis " + std::to_string(a) + " out of range for " +
                          shape_str(shape));
    reduced[a] = true;
  }
  Shape kept;
  size_t cnt = 1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (reduced[i]) cnt *= size_t(shape[i]);
    else kept.push_back(shape[i]);
  }
  if (kept.empty()) kept = {1};
  size_t n = numel_of(shape);
  if (n == 0 || cnt == 0 || shape.empty()) throw EmptyReduction("reduce: zero elements reduced");
  auto map = std::make_shared<std::vector<size_t>>(n);
  std::vector<int> coord(shape.size(), 0);
  for (size_t flat = 0; flat < n; ++flat) {
    size_t out_idx = 0;
    for (size_t i = 0; i < shape.size(); ++i)
      if (!reduced[i]) out_idx = out_idx * size_t(shape[i]) + size_t(coord[i]);
    (*map)[flat] = out_idx;
    for (int i = int(shape.size()) - 1; i >= 0; --i) {
      if (++coord[i] < shape[i]) break;
      coord[i] = 0;
    }
  }
  *out_shape = kept;
  *count = cnt;
  return map;
}

}  // namespace detail

// Population mean and variance over the given axes. Both outputs are
// differentiable; the variance gradient uses d var/dx_i = 2(x_i - mean)/n
// (the mean-path terms cancel because centered residuals sum to zero).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> reduce_moments(const Tensor<T>& x, const std::vector<int>& axes) {
  Shape out_shape;
  size_t count = 0;
  auto map = detail::reduction_index_map<T>(x.shape(), axes, &out_shape, &count);

  auto mean_n = detail::alloc_node<T>(out_shape);
  for (size_t i = 0; i < x.size(); ++i) mean_n->value[(*map)[i]] += x.data()[i];
  for (auto& v : mean_n->value) v /= T(count);

  auto var_n = detail::alloc_node<T>(out_shape);
  for (size_t i = 0; i < x.size(); ++i) {
    T d = x.data()[i] - mean_n->value[(*map)[i]];
    var_n->value[(*map)[i]] += d * d;
  }
  for (auto& v : var_n->value) v /= T(count);

  if (detail::track(x)) {
    auto xn = x.node();
    mean_n->requires_grad = true;
    mean_n->parents = {x.node()};
    mean_n->backprop = [xn, map, count](detail::Node<T>& self) {
      xn->ensure_grad();
      for (size_t i = 0; i < xn->grad.size(); ++i)
        xn->grad[i] += self.grad[(*map)[i]] / T(count);
    };
    auto mean_vals = std::make_shared<std::vector<T>>(mean_n->value);
    var_n->requires_grad = true;
    var_n->parents = {x.node()};
    var_n->backprop = [xn, map, count, mean_vals](detail::Node<T>& self) {
      xn->ensure_grad();
      for (size_t i = 0; i < xn->grad.size(); ++i) {
        T d = xn->value[i] - (*mean_vals)[(*map)[i]];
        xn->grad[i] += self.grad[(*map)[i]] * T(2) * d / T(count);
      }
    };
  }
  return {Tensor<T>(std::move(mean_n)), Tensor<T>(std::move(var_n))};
}

// Column sums: x is R x C, result is C.
template <typename T>
Tensor<T> sum_axis0(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeMismatch("sum_axis0: expects rank-2, got " + shape_str(x.shape()));
  int r = x.dim(0), c = x.dim(1);
  auto out = detail::alloc_node<T>({c});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out->value[j] += x.data()[size_t(i) * c + j];
  if (detail::track(x)) {
    out->requires_grad = true;
    out->parents = {x.node()};
    auto xn = x.node();
    out->backprop = [xn, r, c](detail::Node<T>& self) {
      xn->ensure_grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) xn->grad[size_t(i) * c + j] += self.grad[j];
    };
  }
  return Tensor<T>(std::move(out));
}

// Mean over consecutive groups of `rows_per_group` rows: (G*R) x C -> G x C.
template <typename T>
Tensor<T> mean_pool_rows(const Tensor<T>& x, int rows_per_group) {
  if (x.rank() != 2 || rows_per_group <= 0 || x.dim(0) % rows_per_group != 0)
    throw ShapeMismatch("mean_pool_rows: " + shape_str(x.shape()) + " with group " +
                        std::to_string(rows_per_group));
  int groups = x.dim(0) / rows_per_group, c = x.dim(1);
  auto out = detail::alloc_node<T>({groups, c});
  for (int g = 0; g < groups; ++g)
    for (int i = 0; i < rows_per_group; ++i)
      for (int j = 0; j < c; ++j)
        out->value[size_t(g) * c + j] += x.data()[(size_t(g) * rows_per_group + i) * c + j];
  for (auto& v : out->value) v /= T(rows_per_group);
  if (detail::track(x)) {
    out->requires_grad = true;
    out->parents = {x.node()};
    auto xn = x.node();
    out->backprop = [xn, groups, rows_per_group, c](detail::Node<T>& self) {
      xn->ensure_grad();
      for (int g = 0; g < groups; ++g)
        for (int i = 0; i < rows_per_group; ++i)
          for (int j = 0; j < c; ++j)
            xn->grad[(size_t(g) * rows_per_group + i) * c + j] +=
                self.grad[size_t(g) * c + j] / T(rows_per_group);
    };
  }
  return Tensor<T>(std::move(out));
}

// ---------------------------------------------------------------------------
// broadcast helpers (vector over rows of a matrix)

namespace detail {

template <typename T>
void check_rowvec(const Tensor<T>& x, const Tensor<T>& v, const char* what) {
  if (x.rank() != 2 || v.rank() != 1 || v.dim(0) != x.dim(1))
    throw ShapeMismatch(std::string(what) + ": " + shape_str(x.shape()) + " with vector " +
                        shape_str(v.shape()));
}

}  // namespace detail

template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
  detail::check_rowvec(x, v, "add_rowvec");
  int r = x.dim(0), c = x.dim(1);
  auto out = detail::alloc_node<T>(x.shape());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out->value[size_t(i) * c + j] = x.data()[size_t(i) * c + j] + v.data()[j];
  if (detail::track(x, v)) {
    out->requires_grad = true;
    out->parents = {x.node(), v.node()};
    auto xn = x.node(), vn = v.node();
    out->backprop = [xn, vn, r, c](detail::Node<T>& self) {
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
      }
      if (vn->requires_grad) {
        vn->ensure_grad();
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) vn->grad[j] += self.grad[size_t(i) * c + j];
      }
    };
  }
  return Tensor<T>(std::move(out));
}

template <typename T>
Tensor<T> sub_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
  detail::check_rowvec(x, v, "sub_rowvec");
  int r = x.dim(0), c = x.dim(1);
  auto out = detail::alloc_node<T>(x.shape());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out->value[size_t(i) * c + j] = x.data()[size_t(i) * c + j] - v.data()[j];
  if (detail::track(x, v)) {
    out->requires_grad = true;
    out->parents = {x.node(), v.node()};
    auto xn = x.node(), vn = v.node();
    out->backprop = [xn, vn, r, c](detail::Node<T>& self) {
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
      }
      if (vn->requires_grad) {
        vn->ensure_grad();
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) vn->grad[j] -= self.grad[size_t(i) * c + j];
      }
    };
  }
  return Tensor<T>(std::move(out));
}

template <typename T>
Tensor<T> mul_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
  detail::check_rowvec(x, v, "mul_rowvec");
  int r = x.dim(0), c = x.dim(1);
  auto out = detail::alloc_node<T>(x.shape());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out->value[size_t(i) * c + j] = x.data()[size_t(i) * c + j] * v.data()[j];
  if (detail::track(x, v)) {
    out->requires_grad = true;
    out->parents = {x.node(), v.node()};
    auto xn = x.node(), vn = v.node();
    out->backprop = [xn, vn, r, c](detail::Node<T>& self) {
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j)
            xn->grad[size_t(i) * c + j] += self.grad[size_t(i) * c + j] * vn->value[j];
      }
      if (vn->requires_grad) {
        vn->ensure_grad();
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j)
            vn->grad[j] += self.grad[size_t(i) * c + j] * xn->value[size_t(i) * c + j];
      }
    };
  }
  return Tensor<T>(std::move(out));
}

// out[i][j] = num[i][j] / (den[i] + eps); den is a length-R vector.
template <typename T>
Tensor<T> div_colvec_eps(const Tensor<T>& num, const Tensor<T>& den, T eps) {
  if (num.rank() != 2 || den.rank() != 1 || den.dim(0) != num.dim(0))
    throw ShapeMismatch("div_colvec_eps: " + shape_str(num.shape()) + " with vector " +
                        shape_str(den.shape()));
  int r = num.dim(0), c = num.dim(1);
  auto out = detail::alloc_node<T>(num.shape());
  for (int i = 0; i < r; ++i) {
    T inv = T(1) / (den.data()[i] + eps);
    for (int j = 0; j < c; ++j) out->value[size_t(i) * c + j] = num.data()[size_t(i) * c + j] * inv;
  }
  if (detail::track(num, den)) {
    out->requires_grad = true;
    out->parents = {num.node(), den.node()};
    auto nn = num.node(), dn = den.node();
    out->backprop = [nn, dn, r, c, eps](detail::Node<T>& self) {
      if (nn->requires_grad) {
        nn->ensure_grad();
        for (int i = 0; i < r; ++i) {
          T inv = T(1) / (dn->value[i] + eps);
          for (int j = 0; j < c; ++j)
            nn->grad[size_t(i) * c + j] += self.grad[size_t(i) * c + j] * inv;
        }
      }
      if (dn->requires_grad) {
        dn->ensure_grad();
        for (int i = 0; i < r; ++i) {
          T inv = T(1) / (dn->value[i] + eps);
          T acc = 0;
          for (int j = 0; j < c; ++j)
            acc += self.grad[size_t(i) * c + j] * nn->value[size_t(i) * c + j];
          dn->grad[i] -= acc * inv * inv;
        }
      }
    };
  }
  return Tensor<T>(std::move(out));
}

// Scales row block g (rows [g*R, (g+1)*R)) by factors[g]. Factors are plain
// constants (the droppath mask), not differentiated.
template <typename T>
Tensor<T> scale_rowblocks(const Tensor<T>& x, std::vector<T> factors, int rows_per_block) {
  if (x.rank() != 2 || rows_per_block <= 0 ||
      x.dim(0) != int(factors.size()) * rows_per_block)
    throw ShapeMismatch("scale_rowblocks: " + shape_str(x.shape()) + " with " +
                        std::to_string(factors.size()) + " blocks of " +
                        std::to_string(rows_per_block));
  int c = x.dim(1);
  auto out = detail::alloc_node<T>(x.shape());
  auto fac = std::make_shared<std::vector<T>>(std::move(factors));
  for (size_t g = 0; g < fac->size(); ++g) {
    T f = (*fac)[g];
    for (int i = 0; i < rows_per_block; ++i)
      for (int j = 0; j < c; ++j) {
        size_t idx = (g * rows_per_block + i) * size_t(c) + j;
        out->value[idx] = x.data()[idx] * f;
      }
  }
  if (detail::track(x)) {
    out->requires_grad = true;
    out->parents = {x.node()};
    auto xn = x.node();
    out->backprop = [xn, fac, rows_per_block, c](detail::Node<T>& self) {
      xn->ensure_grad();
      for (size_t g = 0; g < fac->size(); ++g) {
        T f = (*fac)[g];
        for (int i = 0; i < rows_per_block; ++i)
          for (int j = 0; j < c; ++j) {
            size_t idx = (g * rows_per_block + i) * size_t(c) + j;
            xn->grad[idx] += self.grad[idx] * f;
          }
      }
    };
  }
  return Tensor<T>(std::move(out));
}

// ---------------------------------------------------------------------------
// slicing and concatenation (row/column ranges of matrices)

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, int r0, int r1) {
  if (x.rank() != 2 || r0 < 0 || r1 > x.dim(0) || r0 >= r1)
    throw ShapeMismatch("slice_rows: [" + std::to_string(r0) + "," + std::to_string(r1) +
                        ") of " + shape_str(x.shape()));
  int c = x.dim(1);
  auto out = detail::alloc_node<T>({r1 - r0, c});
  std::copy(x.data() + size_t(r0) * c, x.data() + size_t(r1) * c, out->value.begin());
  if (detail::track(x)) {
    out->requires_grad = true;
    out->parents = {x.node()};
    auto xn = x.node();
    out->backprop = [xn, r0, c](detail::Node<T>& self) {
      xn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[size_t(r0) * c + i] += self.grad[i];
    };
  }
  return Tensor<T>(std::move(out));
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_rows: no parts");
  int c = parts[0].dim(1), rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(1) != c)
      throw ShapeMismatch("concat_rows: inconsistent widths");
    rows += p.dim(0);
  }
  auto out = detail::alloc_node<T>({rows, c});
  size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data(), p.data() + p.size(), out->value.begin() + off);
    off += p.size();
  }
  bool any = false;
  for (const auto& p : parts) any = any || detail::track(p);
  if (any) {
    out->requires_grad = true;
    std::vector<detail::NodePtr<T>> nodes;
    for (const auto& p : parts) {
      out->parents.push_back(p.node());
      nodes.push_back(p.node());
    }
    out->backprop = [nodes](detail::Node<T>& self) {
      size_t off2 = 0;
      for (auto& n : nodes) {
        if (n->requires_grad) {
          n->ensure_grad();
          for (size_t i = 0; i < n->value.size(); ++i) n->grad[i] += self.grad[off2 + i];
        }
        off2 += n->value.size();
      }
    };
  }
  return Tensor<T>(std::move(out));
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, int c0, int c1) {
  if (x.rank() != 2 || c0 < 0 || c1 > x.dim(1) || c0 >= c1)
    throw ShapeMismatch("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) +
                        ") of " + shape_str(x.shape()));
  int r = x.dim(0), c = x.dim(1), w = c1 - c0;
  auto out = detail::alloc_node<T>({r, w});
  for (int i = 0; i < r; ++i)
    std::copy(x.data() + size_t(i) * c + c0, x.data() + size_t(i) * c + c1,
              out->value.begin() + size_t(i) * w);
  if (detail::track(x)) {
    out->requires_grad = true;
    out->parents = {x.node()};
    auto xn = x.node();
    out->backprop = [xn, r, c, c0, w](detail::Node<T>& self) {
      xn->ensure_grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < w; ++j)
          xn->grad[size_t(i) * c + c0 + j] += self.grad[size_t(i) * w + j];
    };
  }
  return Tensor<T>(std::move(out));
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_cols: no parts");
  int r = parts[0].dim(0), total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != r) throw ShapeMismatch("concat_cols: inconsistent heights");
    total += p.dim(1);
  }
  auto out = detail::alloc_node<T>({r, total});
  int off = 0;
  for (const auto& p : parts) {
    int w = p.dim(1);
    for (int i = 0; i < r; ++i)
      std::copy(p.data() + size_t(i) * w, p.data() + size_t(i) * w + w,
                out->value.begin() + size_t(i) * total + off);
    off += w;
  }
  bool any = false;
  for (const auto& p : parts) any = any || detail::track(p);
  if (any) {
    out->requires_grad = true;
    std::vector<detail::NodePtr<T>> nodes;
    std::vector<int> widths;
    for (const auto& p : parts) {
      out->parents.push_back(p.node());
      nodes.push_back(p.node());
      widths.push_back(p.dim(1));
    }
    out->backprop = [nodes, widths, r, total](detail::Node<T>& self) {
      int off2 = 0;
      for (size_t pi = 0; pi < nodes.size(); ++pi) {
        auto& n = nodes[pi];
        int w = widths[pi];
        if (n->requires_grad) {
          n->ensure_grad();
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < w; ++j)
              n->grad[size_t(i) * w + j] += self.grad[size_t(i) * total + off2 + j];
        }
        off2 += w;
      }
    };
  }
  return Tensor<T>(std::move(out));
}

// Generic gather: out[i] = x[(*indices)[i]]. Backward scatter-adds.
template <typename T>
Tensor<T> gather(const Tensor<T>& x, std::shared_ptr<const std::vector<size_t>> indices,
                 Shape out_shape) {
  if (numel_of(out_shape) != indices->size())
    throw ShapeMismatch("gather: index count does not match " + shape_str(out_shape));
  auto out = detail::alloc_node<T>(std::move(out_shape));
  for (size_t i = 0; i < indices->size(); ++i) out->value[i] = x.data()[(*indices)[i]];
  if (detail::track(x)) {
    out->requires_grad = true;
    out->parents = {x.node()};
    auto xn = x.node();
    out->backprop = [xn, indices](detail::Node<T>& self) {
      xn->ensure_grad();
      for (size_t i = 0; i < indices->size(); ++i) xn->grad[(*indices)[i]] += self.grad[i];
    };
  }
  return Tensor<T>(std::move(out));
}

// ---------------------------------------------------------------------------
// softmax family

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  if (x.rank() < 1 || x.shape().back() < 1)
    throw ShapeMismatch("softmax_lastdim: needs a non-empty last axis, got " +
                        shape_str(x.shape()));
  int cols = x.shape().back();
  int rows = int(x.size()) / cols;
  auto out = detail::alloc_node<T>(x.shape());
  out->value = x.value();
  kernels::softmax_rows(out->value.data(), rows, cols);
  if (detail::track(x)) {
    out->requires_grad = true;
    out->parents = {x.node()};
    auto xn = x.node();
    out->backprop = [xn, rows, cols](detail::Node<T>& self) {
      xn->ensure_grad();
      for (int i = 0; i < rows; ++i) {
        const T* y = self.value.data() + size_t(i) * cols;
        const T* dy = self.grad.data() + size_t(i) * cols;
        T dot = 0;
        for (int j = 0; j < cols; ++j) dot += dy[j] * y[j];
        for (int j = 0; j < cols; ++j)
          xn->grad[size_t(i) * cols + j] += y[j] * (dy[j] - dot);
      }
    };
  }
  return Tensor<T>(std::move(out));
}

template <typename T>
Tensor<T> log_softmax_lastdim(const Tensor<T>& x) {
  if (x.rank() < 1 || x.shape().back() < 1)
    throw ShapeMismatch("log_softmax_lastdim: needs a non-empty last axis");
  int cols = x.shape().back();
  int rows = int(x.size()) / cols;
  auto out = detail::alloc_node<T>(x.shape());
  for (int i = 0; i < rows; ++i) {
    const T* xi = x.data() + size_t(i) * cols;
    T* oi = out->value.data() + size_t(i) * cols;
    T mx = xi[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, xi[j]);
    T sum = 0;
    for (int j = 0; j < cols; ++j) sum += std::exp(xi[j] - mx);
    T lse = mx + std::log(sum);
    for (int j = 0; j < cols; ++j) oi[j] = xi[j] - lse;
  }
  if (detail::track(x)) {
    out->requires_grad = true;
    out->parents = {x.node()};
    auto xn = x.node();
    out->backprop = [xn, rows, cols](detail::Node<T>& self) {
      xn->ensure_grad();
      for (int i = 0; i < rows; ++i) {
        const T* l = self.value.data() + size_t(i) * cols;
        const T* dy = self.grad.data() + size_t(i) * cols;
        T total = 0;
        for (int j = 0; j < cols; ++j) total += dy[j];
        for (int j = 0; j < cols; ++j)
          xn->grad[size_t(i) * cols + j] += dy[j] - std::exp(l[j]) * total;
      }
    };
  }
  return Tensor<T>(std::move(out));
}

// ---------------------------------------------------------------------------
// depth-wise convolution

namespace detail {

template <typename T>
void dwc_backward_input(const std::vector<T>& dy, const std::vector<T>& kern,
                        std::vector<T>& dx, int channels, int h, int w, int ks,
                        size_t plane_stride, size_t elem_stride) {
  int half = ks / 2;
  for (int c = 0; c < channels; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        // dx[p] = sum_u k[u] * dy[p - u + half]  (correlation with flipped kernel)
        T acc = 0;
        for (int u = 0; u < ks; ++u)
          for (int v = 0; v < ks; ++v) {
            int yy = y - (u - half);
            int xx = x - (v - half);
            if (yy >= 0 && yy < h && xx >= 0 && xx < w)
              acc += kern[size_t(c) * ks * ks + u * ks + v] *
                     dy[size_t(c) * plane_stride + (size_t(yy) * w + xx) * elem_stride];
          }
        dx[size_t(c) * plane_stride + (size_t(y) * w + x) * elem_stride] += acc;
      }
}

template <typename T>
void dwc_backward_kernel(const std::vector<T>& dy, const std::vector<T>& xval,
                         std::vector<T>& dk, int channels, int h, int w, int ks,
                         size_t plane_stride, size_t elem_stride) {
  int half = ks / 2;
  for (int c = 0; c < channels; ++c)
    for (int u = 0; u < ks; ++u)
      for (int v = 0; v < ks; ++v) {
        T acc = 0;
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            int yy = y + u - half;
            int xx = x + v - half;
            if (yy >= 0 && yy < h && xx >= 0 && xx < w)
              acc += dy[size_t(c) * plane_stride + (size_t(y) * w + x) * elem_stride] *
                     xval[size_t(c) * plane_stride + (size_t(yy) * w + xx) * elem_stride];
          }
        dk[size_t(c) * ks * ks + u * ks + v] += acc;
      }
}

template <typename T>
Tensor<T> dwc_generic(const Tensor<T>& x, const Tensor<T>& kern, int channels, int h, int w,
                      size_t plane_stride, size_t elem_stride) {
  if (kern.rank() != 3 || kern.dim(0) != channels || kern.dim(1) != kern.dim(2))
    throw ShapeMismatch("depthwise_conv2d: kernel " + shape_str(kern.shape()) + " for " +
                        std::to_string(channels) + " channels");
  int ks = kern.dim(1);
  if (ks % 2 == 0) throw InvalidKernel("depthwise_conv2d: kernel size must be odd, got " +
                                       std::to_string(ks));
  auto out = alloc_node<T>(x.shape());
  kernels::depthwise_conv2d(x.data(), kern.data(), out->value.data(), channels, h, w, ks,
                            plane_stride, elem_stride);
  if (track(x, kern)) {
    out->requires_grad = true;
    out->parents = {x.node(), kern.node()};
    auto xn = x.node(), kn = kern.node();
    out->backprop = [xn, kn, channels, h, w, ks, plane_stride, elem_stride](Node<T>& self) {
      if (xn->requires_grad) {
        xn->ensure_grad();
        dwc_backward_input(self.grad, kn->value, xn->grad, channels, h, w, ks, plane_stride,
                           elem_stride);
      }
      if (kn->requires_grad) {
        kn->ensure_grad();
        dwc_backward_kernel(self.grad, xn->value, kn->grad, channels, h, w, ks, plane_stride,
                            elem_stride);
      }
    };
  }
  return Tensor<T>(std::move(out));
}

}  // namespace detail

// x: C x H x W, kernel: C x k x k, zero same-padding, per-channel.
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& kern) {
  if (x.rank() != 3) throw ShapeMismatch("depthwise_conv2d: input " + shape_str(x.shape()));
  int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (kern.rank() != 3 || kern.dim(0) != c)
    throw ShapeMismatch("depthwise_conv2d: channels " + std::to_string(c) + " vs kernel " +
                        shape_str(kern.shape()));
  return detail::dwc_generic(x, kern, c, h, w, size_t(h) * w, 1);
}

// Token-major variant: v is N x C with tokens laid out row-major on an h x w
// grid; the convolution runs independently per channel.
template <typename T>
Tensor<T> depthwise_conv2d_tokens(const Tensor<T>& v, const Tensor<T>& kern, int h, int w) {
  if (v.rank() != 2) throw ShapeMismatch("depthwise_conv2d_tokens: input " + shape_str(v.shape()));
  int n = v.dim(0), c = v.dim(1);
  if (h * w != n)
    throw GridMismatch("depthwise_conv2d_tokens: grid " + std::to_string(h) + "x" +
                       std::to_string(w) + " for " + std::to_string(n) + " tokens");
  if (kern.rank() != 3 || kern.dim(0) != c)
    throw ShapeMismatch("depthwise_conv2d_tokens: channels " + std::to_string(c) +
                        " vs kernel " + shape_str(kern.shape()));
  return detail::dwc_generic(v, kern, c, h, w, 1, size_t(c));
}

}  // namespace slab
