#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "slab/svd.hpp"
#include "slab/tensor.hpp"

// Attention variants.
//
// softmax_attention is the quadratic-cost reference mechanism: per head,
// A = softmax(Q K^T / sqrt(d)), O = A V.
//
// sla_attention is simplified linear attention: similarity
// ReLU(Q_i) ReLU(K_j)^T, evaluated in the decoupled order (K^T V first) so the
// cost is linear in the token count, plus a depth-wise convolution of V over
// the token grid for local enhancement. The denominator carries a small eps
// because ReLU can null an entire query row; such a row contributes 0 from
// the attention branch.
//
// sla_naive_oracle evaluates the same map in the explicit O(N^2) order with
// its own loops end to end. It exists to pin down the order-of-computation
// equivalence and is not used by any production path.

namespace slab {

struct TokenGrid {
  int h = 1;
  int w = 1;
  int tokens() const { return h * w; }
};

template <typename T>
struct AttentionParams {
  Tensor<T> w_q, w_k, w_v, w_o;  // C x C projections
  Tensor<T> b_q, b_k, b_v, b_o;  // C; zero unless a norm has been folded in
  Tensor<T> dwc_kernel;          // C x k x k, applied across full channels of V
  int heads = 1;
  T eps_denom = T(1e-6);

  int dim() const { return w_q.dim(0); }
  int head_dim() const { return dim() / heads; }
  int dwc_size() const { return dwc_kernel.dim(1); }

  void validate() const {
    int c = dim();
    if (heads < 1 || c % heads != 0)
      throw ShapeMismatch("attention: dim " + std::to_string(c) + " not divisible by " +
                          std::to_string(heads) + " heads");
    if (dwc_kernel.dim(0) != c)
      throw ShapeMismatch("attention: dwc kernel channels " +
                          std::to_string(dwc_kernel.dim(0)) + " vs dim " + std::to_string(c));
    if (dwc_size() % 2 == 0)
      throw InvalidKernel("attention: dwc kernel size must be odd");
  }

  template <typename Rng>
  static AttentionParams init(int c, int heads, int ksize, Rng& rng, T proj_std = T(0.02),
                              T dwc_std = T(0.02)) {
    AttentionParams p;
    p.w_q = Tensor<T>::randn({c, c}, rng, proj_std);
    p.w_k = Tensor<T>::randn({c, c}, rng, proj_std);
    p.w_v = Tensor<T>::randn({c, c}, rng, proj_std);
    p.w_o = Tensor<T>::randn({c, c}, rng, proj_std);
    p.b_q = Tensor<T>::zeros({c});
    p.b_k = Tensor<T>::zeros({c});
    p.b_v = Tensor<T>::zeros({c});
    p.b_o = Tensor<T>::zeros({c});
    p.dwc_kernel = Tensor<T>::randn({c, ksize, ksize}, rng, dwc_std);
    p.heads = heads;
    return p;
  }
};

namespace detail {

template <typename T>
void check_attention_input(const Tensor<T>& x, const AttentionParams<T>& p) {
  p.validate();
  if (x.rank() != 2 || x.dim(1) != p.dim())
    throw ShapeMismatch("attention: input " + shape_str(x.shape()) + " vs dim " +
                        std::to_string(p.dim()));
}

}  // namespace detail

template <typename T>
Tensor<T> softmax_attention(const Tensor<T>& x, const AttentionParams<T>& p) {
  detail::check_attention_input(x, p);
  int c = p.dim(), h = p.heads, d = p.head_dim();
  auto q = add_rowvec(matmul(x, p.w_q), p.b_q);
  auto k = add_rowvec(matmul(x, p.w_k), p.b_k);
  auto v = add_rowvec(matmul(x, p.w_v), p.b_v);
  std::vector<Tensor<T>> heads_out;
  heads_out.reserve(h);
  T inv_sqrt_d = T(1) / std::sqrt(T(d));
  for (int i = 0; i < h; ++i) {
    auto qh = slice_cols(q, i * d, (i + 1) * d);
    auto kh = slice_cols(k, i * d, (i + 1) * d);
    auto vh = slice_cols(v, i * d, (i + 1) * d);
    auto scores = scale(matmul(qh, transpose2d(kh)), inv_sqrt_d);
    auto attn = softmax_lastdim(scores);
    heads_out.push_back(matmul(attn, vh));
  }
  auto merged = h == 1 ? heads_out[0] : concat_cols(heads_out);
  (void)c;
  return add_rowvec(matmul(merged, p.w_o), p.b_o);
}

template <typename T>
Tensor<T> sla_attention(const Tensor<T>& x, const AttentionParams<T>& p, TokenGrid grid) {
  detail::check_attention_input(x, p);
  if (grid.tokens() != x.dim(0))
    throw GridMismatch("sla_attention: grid " + std::to_string(grid.h) + "x" +
                       std::to_string(grid.w) + " vs " + std::to_string(x.dim(0)) + " tokens");
  int h = p.heads, d = p.head_dim();
  auto q = add_rowvec(matmul(x, p.w_q), p.b_q);
  auto k = add_rowvec(matmul(x, p.w_k), p.b_k);
  auto v = add_rowvec(matmul(x, p.w_v), p.b_v);
  std::vector<Tensor<T>> heads_out;
  heads_out.reserve(h);
  for (int i = 0; i < h; ++i) {
    auto rq = relu(slice_cols(q, i * d, (i + 1) * d));
    auto rk = relu(slice_cols(k, i * d, (i + 1) * d));
    auto vh = slice_cols(v, i * d, (i + 1) * d);
    // K^T V first: d x d, then N x d — linear in N.
    auto kv = matmul(transpose2d(rk), vh);
    auto num = matmul(rq, kv);
    auto den = reshape(matmul(rq, reshape(sum_axis0(rk), {d, 1})), {x.dim(0)});
    heads_out.push_back(div_colvec_eps(num, den, p.eps_denom));
  }
  auto merged = h == 1 ? heads_out[0] : concat_cols(heads_out);
  auto local = depthwise_conv2d_tokens(v, p.dwc_kernel, grid.h, grid.w);
  return add_rowvec(matmul(add(merged, local), p.w_o), p.b_o);
}

// Explicit O(N^2)-order evaluation of the SLA map with self-contained loops.
// Test oracle only.
template <typename T>
Tensor<T> sla_naive_oracle(const Tensor<T>& x, const AttentionParams<T>& p, TokenGrid grid) {
  detail::check_attention_input(x, p);
  int n = x.dim(0), c = p.dim(), h = p.heads, d = p.head_dim();
  if (grid.tokens() != n)
    throw GridMismatch("sla_naive_oracle: grid " + std::to_string(grid.h) + "x" +
                       std::to_string(grid.w) + " vs " + std::to_string(n) + " tokens");

  auto project = [&](const Tensor<T>& w, const Tensor<T>& b) {
    std::vector<T> out(size_t(n) * c, T(0));
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < c; ++j) {
        T acc = b.data()[j];
        for (int t = 0; t < c; ++t) acc += x.data()[size_t(i) * c + t] * w.data()[size_t(t) * c + j];
        out[size_t(i) * c + j] = acc;
      }
    return out;
  };
  std::vector<T> q = project(p.w_q, p.b_q);
  std::vector<T> k = project(p.w_k, p.b_k);
  std::vector<T> v = project(p.w_v, p.b_v);

  auto pos = [](T a) { return a > T(0) ? a : T(0); };

  std::vector<T> mixed(size_t(n) * c, T(0));
  for (int head = 0; head < h; ++head) {
    int c0 = head * d;
    // Full similarity matrix, then row-normalized mixing.
    std::vector<T> sim(size_t(n) * n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        T acc = 0;
        for (int e = 0; e < d; ++e)
          acc += pos(q[size_t(i) * c + c0 + e]) * pos(k[size_t(j) * c + c0 + e]);
        sim[size_t(i) * n + j] = acc;
      }
    for (int i = 0; i < n; ++i) {
      T row = 0;
      for (int j = 0; j < n; ++j) row += sim[size_t(i) * n + j];
      T inv = T(1) / (row + p.eps_denom);
      for (int e = 0; e < d; ++e) {
        T acc = 0;
        for (int j = 0; j < n; ++j) acc += sim[size_t(i) * n + j] * v[size_t(j) * c + c0 + e];
        mixed[size_t(i) * c + c0 + e] = acc * inv;
      }
    }
  }

  // Depth-wise convolution of V on the grid, zero same-padding.
  int ks = p.dwc_size(), half = ks / 2;
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < grid.h; ++y)
      for (int xx = 0; xx < grid.w; ++xx) {
        T acc = 0;
        for (int u = 0; u < ks; ++u)
          for (int w2 = 0; w2 < ks; ++w2) {
            int yy = y + u - half, xv = xx + w2 - half;
            if (yy >= 0 && yy < grid.h && xv >= 0 && xv < grid.w)
              acc += p.dwc_kernel.data()[size_t(ch) * ks * ks + u * ks + w2] *
                     v[size_t(yy * grid.w + xv) * c + ch];
          }
        mixed[size_t(y * grid.w + xx) * c + ch] += acc;
      }

  std::vector<T> out(size_t(n) * c);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      T acc = p.b_o.data()[j];
      for (int t = 0; t < c; ++t)
        acc += mixed[size_t(i) * c + t] * p.w_o.data()[size_t(t) * c + j];
      out[size_t(i) * c + j] = acc;
    }
  return Tensor<T>::from_data({n, c}, std::move(out));
}

// ---------------------------------------------------------------------------
// diagnostics

// Numerical rank: singular values above tol * sigma_max.
template <typename T>
int attention_map_rank(const Tensor<T>& sim, double tol) {
  if (sim.rank() != 2 || sim.dim(0) != sim.dim(1))
    throw ShapeMismatch("attention_map_rank: expects square matrix, got " +
                        shape_str(sim.shape()));
  int n = sim.dim(0);
  std::vector<double> a(size_t(n) * n);
  for (size_t i = 0; i < a.size(); ++i) a[i] = double(sim.data()[i]);
  std::vector<double> sv = singular_values(a.data(), n, n);
  if (sv.empty() || sv[0] <= 0) return 0;
  int rank = 0;
  for (double s : sv)
    if (s > tol * sv[0]) ++rank;
  return rank;
}

// Unnormalized SLA similarity ReLU(Q_h) ReLU(K_h)^T for one head; its rank is
// bounded by the head dimension because it factors through N x d.
template <typename T>
Tensor<T> sla_similarity_matrix(const Tensor<T>& x, const AttentionParams<T>& p, int head) {
  detail::check_attention_input(x, p);
  NoGradGuard ng;
  int d = p.head_dim();
  auto q = add_rowvec(matmul(x, p.w_q), p.b_q);
  auto k = add_rowvec(matmul(x, p.w_k), p.b_k);
  auto rq = relu(slice_cols(q, head * d, (head + 1) * d));
  auto rk = relu(slice_cols(k, head * d, (head + 1) * d));
  return matmul(rq, transpose2d(rk));
}

// Row-stochastic softmax map softmax(Q_h K_h^T / sqrt(d)) for one head.
template <typename T>
Tensor<T> softmax_attention_map(const Tensor<T>& x, const AttentionParams<T>& p, int head) {
  detail::check_attention_input(x, p);
  NoGradGuard ng;
  int d = p.head_dim();
  auto q = add_rowvec(matmul(x, p.w_q), p.b_q);
  auto k = add_rowvec(matmul(x, p.w_k), p.b_k);
  auto qh = slice_cols(q, head * d, (head + 1) * d);
  auto kh = slice_cols(k, head * d, (head + 1) * d);
  return softmax_lastdim(scale(matmul(qh, transpose2d(kh)), T(1) / std::sqrt(T(d))));
}

// ---------------------------------------------------------------------------
// workspace forward paths (eval/bench; no graph, buffers reused)

template <typename T>
struct AttentionWorkspace {
  std::vector<T> q, k, v, qh, kh, vh, scores, oh, merged, kv, ksum, den, local;

  void prepare(int n, int c, int heads) {
    int d = c / heads;
    q.resize(size_t(n) * c);
    k.resize(size_t(n) * c);
    v.resize(size_t(n) * c);
    qh.resize(size_t(n) * d);
    kh.resize(size_t(n) * d);
    vh.resize(size_t(n) * d);
    oh.resize(size_t(n) * d);
    merged.resize(size_t(n) * c);
    kv.resize(size_t(d) * d);
    ksum.resize(d);
    den.resize(n);
    local.resize(size_t(n) * c);
  }
};

namespace detail {

template <typename T>
void project_rows(const T* x, const Tensor<T>& w, const Tensor<T>& b, T* out, int n, int c) {
  kernels::matmul(x, w.data(), out, n, c, c);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) out[size_t(i) * c + j] += b.data()[j];
}

template <typename T>
void pack_head(const T* x, T* out, int n, int c, int c0, int d, T mul = T(1)) {
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out[size_t(i) * d + j] = x[size_t(i) * c + c0 + j] * mul;
}

template <typename T>
void unpack_head(const T* x, T* out, int n, int c, int c0, int d) {
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out[size_t(i) * c + c0 + j] = x[size_t(i) * d + j];
}

}  // namespace detail

template <typename T>
void softmax_attention_eval(const T* x, int n, const AttentionParams<T>& p,
                            AttentionWorkspace<T>& ws, std::vector<T>& scores_buf, T* out) {
  int c = p.dim(), h = p.heads, d = p.head_dim();
  ws.prepare(n, c, h);
  scores_buf.resize(size_t(n) * n);
  detail::project_rows(x, p.w_q, p.b_q, ws.q.data(), n, c);
  detail::project_rows(x, p.w_k, p.b_k, ws.k.data(), n, c);
  detail::project_rows(x, p.w_v, p.b_v, ws.v.data(), n, c);
  T inv_sqrt_d = T(1) / std::sqrt(T(d));
  for (int head = 0; head < h; ++head) {
    int c0 = head * d;
    detail::pack_head(ws.q.data(), ws.qh.data(), n, c, c0, d, inv_sqrt_d);
    detail::pack_head(ws.k.data(), ws.kh.data(), n, c, c0, d);
    detail::pack_head(ws.v.data(), ws.vh.data(), n, c, c0, d);
    kernels::matmul_nt(ws.qh.data(), ws.kh.data(), scores_buf.data(), n, d, n);
    kernels::softmax_rows(scores_buf.data(), n, n);
    kernels::matmul(scores_buf.data(), ws.vh.data(), ws.oh.data(), n, n, d);
    detail::unpack_head(ws.oh.data(), ws.merged.data(), n, c, c0, d);
  }
  detail::project_rows(ws.merged.data(), p.w_o, p.b_o, out, n, c);
}

template <typename T>
void sla_attention_eval(const T* x, int n, const AttentionParams<T>& p, TokenGrid grid,
                        AttentionWorkspace<T>& ws, T* out) {
  int c = p.dim(), h = p.heads, d = p.head_dim();
  if (grid.tokens() != n)
    throw GridMismatch("sla_attention_eval: grid vs token count");
  ws.prepare(n, c, h);
  detail::project_rows(x, p.w_q, p.b_q, ws.q.data(), n, c);
  detail::project_rows(x, p.w_k, p.b_k, ws.k.data(), n, c);
  detail::project_rows(x, p.w_v, p.b_v, ws.v.data(), n, c);
  for (int head = 0; head < h; ++head) {
    int c0 = head * d;
    detail::pack_head(ws.q.data(), ws.qh.data(), n, c, c0, d);
    detail::pack_head(ws.k.data(), ws.kh.data(), n, c, c0, d);
    detail::pack_head(ws.v.data(), ws.vh.data(), n, c, c0, d);
    kernels::relu(ws.qh.data(), ws.qh.data(), size_t(n) * d);
    kernels::relu(ws.kh.data(), ws.kh.data(), size_t(n) * d);
    kernels::matmul_tn(ws.kh.data(), ws.vh.data(), ws.kv.data(), d, n, d);
    std::fill(ws.ksum.begin(), ws.ksum.end(), T(0));
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) ws.ksum[j] += ws.kh[size_t(i) * d + j];
    kernels::matmul(ws.qh.data(), ws.kv.data(), ws.oh.data(), n, d, d);
    kernels::matmul(ws.qh.data(), ws.ksum.data(), ws.den.data(), n, d, 1);
    for (int i = 0; i < n; ++i) {
      T inv = T(1) / (ws.den[i] + p.eps_denom);
      for (int j = 0; j < d; ++j) ws.oh[size_t(i) * d + j] *= inv;
    }
    detail::unpack_head(ws.oh.data(), ws.merged.data(), n, c, c0, d);
  }
  kernels::depthwise_conv2d(ws.v.data(), p.dwc_kernel.data(), ws.local.data(), c, grid.h,
                            grid.w, p.dwc_size(), 1, size_t(c));
  for (size_t i = 0; i < ws.merged.size(); ++i) ws.merged[i] += ws.local[i];
  detail::project_rows(ws.merged.data(), p.w_o, p.b_o, out, n, c);
}

}  // namespace slab
