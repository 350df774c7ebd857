#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "slab/tensor.hpp"

// Normalization layers: LayerNorm, BatchNorm, RepBN (BN(x) + eta*x), the
// progressive LN->RepBN blend with its decay schedules, and the inference-time
// re-parameterization / folding chain.
//
// Conventions fixed here:
//   * variance is population (divide by count);
//   * BN statistics reduce over every axis except the trailing feature axis;
//   * eps lives inside sigma: sigma = sqrt(running_var + eps), so the
//     re-parameterization identity holds verbatim with finite eps;
//   * eta is a per-channel vector initialized to zero.

namespace slab {

template <typename T>
struct LNParams {
  Tensor<T> scale;  // C
  Tensor<T> shift;  // C
  T eps = T(1e-5);

  static LNParams identity(int c, T eps = T(1e-5)) {
    return {Tensor<T>::full({c}, T(1)), Tensor<T>::zeros({c}), eps};
  }
};

template <typename T>
struct BNParams {
  Tensor<T> alpha;         // rescale, C
  Tensor<T> beta;          // shift, C
  Tensor<T> running_mean;  // C
  Tensor<T> running_var;   // C, nonnegative
  T momentum = T(0.1);     // EMA weight of the fresh batch statistic
  T eps = T(1e-5);

  static BNParams identity(int c, T eps = T(1e-5)) {
    return {Tensor<T>::full({c}, T(1)), Tensor<T>::zeros({c}), Tensor<T>::zeros({c}),
            Tensor<T>::full({c}, T(1)), T(0.1), eps};
  }
};

template <typename T>
struct RepBNParams {
  BNParams<T> bn;
  Tensor<T> eta;  // per-channel, unconstrained

  static RepBNParams identity(int c, T eps = T(1e-5)) {
    return {BNParams<T>::identity(c, eps), Tensor<T>::zeros({c})};
  }
};

enum class DecaySchedule { linear, cosine, step };

inline const char* to_string(DecaySchedule s) {
  switch (s) {
    case DecaySchedule::linear: return "linear";
    case DecaySchedule::cosine: return "cosine";
    case DecaySchedule::step: return "step";
  }
  return "linear";
}

inline DecaySchedule parse_schedule(const std::string& s) {
  if (s == "linear") return DecaySchedule::linear;
  if (s == "cosine") return DecaySchedule::cosine;
  if (s == "step") return DecaySchedule::step;
  throw ConfigError("unknown schedule '" + s + "' (linear|cosine|step)");
}

template <typename T>
struct PRepBNState {
  LNParams<T> ln;
  RepBNParams<T> repbn;
  long total_steps = 1;    // T
  long current_step = 0;   // T_cur
  DecaySchedule schedule = DecaySchedule::linear;

  // Called once per optimizer step; gamma is constant across the forwards of
  // a step.
  void on_optimizer_step() { ++current_step; }
};

// Blend weight for the progressive transition: gamma(0) = 1, gamma(t >= T) = 0,
// monotone non-increasing. Linear is (T - T_cur)/T; cosine and step are the
// configurable alternates.
template <typename T>
double gamma(const PRepBNState<T>& state) {
  if (state.total_steps <= 0) throw ConfigError("gamma: total_steps must be positive");
  double t = double(state.current_step);
  double total = double(state.total_steps);
  double g;
  switch (state.schedule) {
    case DecaySchedule::linear: g = (total - t) / total; break;
    case DecaySchedule::cosine: g = 0.5 * (1.0 + std::cos(M_PI * std::min(t, total) / total)); break;
    case DecaySchedule::step: g = t < total / 2.0 ? 1.0 : 0.0; break;
    default: g = 0.0;
  }
  return std::min(1.0, std::max(0.0, g));
}

// ---------------------------------------------------------------------------
// forward ops

// Per-token normalization over the trailing feature axis, then scale/shift.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const LNParams<T>& p) {
  if (x.rank() < 1 || x.shape().back() != p.scale.dim(0))
    throw ShapeMismatch("layernorm: " + shape_str(x.shape()) + " with width " +
                        std::to_string(p.scale.dim(0)));
  int cols = x.shape().back();
  int rows = int(x.size()) / cols;
  auto out = detail::alloc_node<T>(x.shape());
  kernels::layernorm_rows(x.data(), out->value.data(), p.scale.data(), p.shift.data(), rows,
                          cols, p.eps);
  if (detail::track(x, p.scale, p.shift)) {
    out->requires_grad = true;
    out->parents = {x.node(), p.scale.node(), p.shift.node()};
    auto xn = x.node();
    auto sn = p.scale.node();
    auto bn = p.shift.node();
    T eps = p.eps;
    out->backprop = [xn, sn, bn, rows, cols, eps](detail::Node<T>& self) {
      for (int i = 0; i < rows; ++i) {
        const T* xi = xn->value.data() + size_t(i) * cols;
        const T* dy = self.grad.data() + size_t(i) * cols;
        T mean = 0;
        for (int j = 0; j < cols; ++j) mean += xi[j];
        mean /= T(cols);
        T var = 0;
        for (int j = 0; j < cols; ++j) var += (xi[j] - mean) * (xi[j] - mean);
        var /= T(cols);
        T inv = T(1) / std::sqrt(var + eps);
        // xhat_j = (x_j - mean) * inv
        if (sn->requires_grad || bn->requires_grad) {
          if (sn->requires_grad) sn->ensure_grad();
          if (bn->requires_grad) bn->ensure_grad();
          for (int j = 0; j < cols; ++j) {
            if (sn->requires_grad) sn->grad[j] += dy[j] * (xi[j] - mean) * inv;
            if (bn->requires_grad) bn->grad[j] += dy[j];
          }
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          // d xhat = dy * scale; dx = inv*(dxh - mean(dxh) - xhat*mean(dxh*xhat))
          T mean_dxh = 0, mean_dxh_xh = 0;
          for (int j = 0; j < cols; ++j) {
            T xh = (xi[j] - mean) * inv;
            T dxh = dy[j] * sn->value[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh;
          }
          mean_dxh /= T(cols);
          mean_dxh_xh /= T(cols);
          for (int j = 0; j < cols; ++j) {
            T xh = (xi[j] - mean) * inv;
            T dxh = dy[j] * sn->value[j];
            xn->grad[size_t(i) * cols + j] += inv * (dxh - mean_dxh - xh * mean_dxh_xh);
          }
        }
      }
    };
  }
  return Tensor<T>(std::move(out));
}

namespace detail {

template <typename T>
std::vector<int> all_but_last_axes(const Tensor<T>& x) {
  std::vector<int> axes;
  for (int i = 0; i + 1 < x.rank(); ++i) axes.push_back(i);
  return axes;
}

}  // namespace detail

// BatchNorm over every non-feature axis. Train mode normalizes with batch
// statistics and moves the running stats by `momentum`; eval uses the running
// stats. Gradients flow through the batch statistics via reduce_moments.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, BNParams<T>& p, Mode mode) {
  int c = p.alpha.dim(0);
  if (x.rank() < 2 || x.shape().back() != c)
    throw ShapeMismatch("batchnorm: " + shape_str(x.shape()) + " with width " +
                        std::to_string(c));
  int rows = int(x.size()) / c;
  bool use_batch_stats = (mode == Mode::train || mode == Mode::recalib);
  Tensor<T> xflat = x.rank() == 2 ? x : reshape(x, {rows, c});

  Tensor<T> mean, var;
  if (use_batch_stats) {
    if (rows < 2)
      throw BatchTooSmall("batchnorm: train mode needs at least 2 reduced samples, got " +
                          std::to_string(rows));
    auto mv = reduce_moments(xflat, detail::all_but_last_axes(xflat));
    mean = mv.first;
    var = mv.second;
    // EMA update on detached statistics.
    auto& rm = p.running_mean.mutable_value();
    auto& rv = p.running_var.mutable_value();
    for (int j = 0; j < c; ++j) {
      rm[j] = (T(1) - p.momentum) * rm[j] + p.momentum * mean.data()[j];
      rv[j] = (T(1) - p.momentum) * rv[j] + p.momentum * var.data()[j];
    }
  } else {
    mean = p.running_mean;
    var = p.running_var;
  }

  auto xhat = mul_rowvec(sub_rowvec(xflat, mean), rsqrt_eps(var, p.eps));
  auto y = add_rowvec(mul_rowvec(xhat, p.alpha), p.beta);
  return x.rank() == 2 ? y : reshape(y, x.shape());
}

// RepBN: BN(x) + eta (.) x.
template <typename T>
Tensor<T> repbn(const Tensor<T>& x, RepBNParams<T>& p, Mode mode) {
  auto bn_out = batchnorm(x, p.bn, mode);
  int c = p.eta.dim(0);
  int rows = int(x.size()) / c;
  Tensor<T> xflat = x.rank() == 2 ? x : reshape(x, {rows, c});
  auto skip = mul_rowvec(xflat, p.eta);
  auto y = add(bn_out.rank() == 2 ? bn_out : reshape(bn_out, {rows, c}), skip);
  return x.rank() == 2 ? y : reshape(y, x.shape());
}

// Progressive blend gamma*LN(x) + (1-gamma)*RepBN(x). The blend reads the
// schedule; advancing current_step is the caller's per-optimizer-step signal
// via PRepBNState::on_optimizer_step().
template <typename T>
Tensor<T> prepbn(const Tensor<T>& x, PRepBNState<T>& state, Mode mode) {
  double g = gamma(state);
  if (g >= 1.0) return layernorm(x, state.ln);
  if (g <= 0.0) return repbn(x, state.repbn, mode);
  return add(scale(layernorm(x, state.ln), T(g)), scale(repbn(x, state.repbn, mode), T(1.0 - g)));
}

// ---------------------------------------------------------------------------
// re-parameterization and folding

// RepBN(x; mu, sigma, alpha, beta) == BN(x; mu, sigma, alpha + eta*sigma,
// beta + eta*mu) with sigma = sqrt(running_var + eps). Exact in exact
// arithmetic; running statistics must be frozen (eval mode).
template <typename T>
BNParams<T> reparam_repbn_to_bn(const RepBNParams<T>& p) {
  int c = p.eta.dim(0);
  BNParams<T> out = p.bn;
  out.alpha = Tensor<T>::zeros({c});
  out.beta = Tensor<T>::zeros({c});
  for (int j = 0; j < c; ++j) {
    T sigma = std::sqrt(p.bn.running_var.data()[j] + p.bn.eps);
    out.alpha.mutable_value()[j] = p.bn.alpha.data()[j] + p.eta.data()[j] * sigma;
    out.beta.mutable_value()[j] = p.bn.beta.data()[j] + p.eta.data()[j] * p.bn.running_mean.data()[j];
  }
  return out;
}

// Per-channel affine y = a (.) x + b equivalent to an eval-mode BN.
template <typename T>
struct FusedAffine {
  Tensor<T> a;
  Tensor<T> b;
};

template <typename T>
FusedAffine<T> bn_to_affine(const BNParams<T>& p) {
  int c = p.alpha.dim(0);
  FusedAffine<T> f{Tensor<T>::zeros({c}), Tensor<T>::zeros({c})};
  for (int j = 0; j < c; ++j) {
    T a = p.alpha.data()[j] / std::sqrt(p.running_var.data()[j] + p.eps);
    f.a.mutable_value()[j] = a;
    f.b.mutable_value()[j] = p.beta.data()[j] - a * p.running_mean.data()[j];
  }
  return f;
}

// Folds an eval-mode BN into the linear layer that consumes it:
// with a = alpha/sqrt(var+eps) and cvec = beta - a(.)mu,
//   W' = diag(a) W,   b' = cvec^T W + b,
// so affine(x; W', b') == linear(BN(x, eval)) for every x.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> fuse_bn_into_linear(const BNParams<T>& p, const Tensor<T>& w,
                                                    const Tensor<T>& b) {
  int c = p.alpha.dim(0);
  if (w.rank() != 2 || w.dim(0) != c || b.rank() != 1 || b.dim(0) != w.dim(1))
    throw ShapeMismatch("fuse_bn_into_linear: W " + shape_str(w.shape()) + ", b " +
                        shape_str(b.shape()) + ", C " + std::to_string(c));
  int d = w.dim(1);
  FusedAffine<T> f = bn_to_affine(p);
  Tensor<T> w2 = Tensor<T>::zeros({c, d});
  Tensor<T> b2 = Tensor<T>::zeros({d});
  for (int i = 0; i < c; ++i)
    for (int j = 0; j < d; ++j)
      w2.mutable_value()[size_t(i) * d + j] = f.a.data()[i] * w.data()[size_t(i) * d + j];
  for (int j = 0; j < d; ++j) {
    T acc = b.data()[j];
    for (int i = 0; i < c; ++i) acc += f.b.data()[i] * w.data()[size_t(i) * d + j];
    b2.mutable_value()[j] = acc;
  }
  return {std::move(w2), std::move(b2)};
}

}  // namespace slab
