#include "slab/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <cstring>

#include <omp.h>

namespace slab::kernels {

namespace {

int env_thread_cap() {
  static int cap = [] {
    const char* s = std::getenv("SLAB_THREADS");
    if (!s) return 0;
    int v = std::atoi(s);
    return v > 0 ? v : 0;
  }();
  return cap;
}

std::atomic<int> g_cap{0};
std::atomic<bool> g_count{false};
std::atomic<uint64_t> g_macs{0};

inline void count_macs(uint64_t n) {
  if (g_count.load(std::memory_order_relaxed))
    g_macs.fetch_add(n, std::memory_order_relaxed);
}

}  // namespace

int thread_cap() {
  int cap = g_cap.load(std::memory_order_relaxed);
  if (cap > 0) return cap;
  int env = env_thread_cap();
  if (env > 0) return env;
  return omp_get_max_threads();
}

void set_thread_cap(int cap) { g_cap.store(cap, std::memory_order_relaxed); }

int threads_for(size_t work) {
  // Small problems are not worth a fork/join.
  if (work < (1u << 15)) return 1;
  int nt = thread_cap();
  return std::max(1, nt);
}

ThreadCapGuard::ThreadCapGuard(int cap) : prev_(g_cap.load()) { set_thread_cap(cap); }
ThreadCapGuard::~ThreadCapGuard() { set_thread_cap(prev_); }

void set_mac_counting(bool on) { g_count.store(on); }
bool mac_counting() { return g_count.load(); }
uint64_t mac_count() { return g_macs.load(); }
void reset_mac_count() { g_macs.store(0); }

// c = a.b with a m x k, b k x n. i-k-j order: the inner loop streams a row of
// b and accumulates into a row of c, which vectorizes well and keeps the
// k-summation order identical to the serial reference.
template <typename T>
void matmul(const T* a, const T* b, T* c, int m, int k, int n) {
  count_macs(uint64_t(m) * k * n);
  int nt = threads_for(uint64_t(m) * k * n);
#pragma omp parallel for schedule(static) num_threads(nt) if (nt > 1)
  for (int i = 0; i < m; ++i) {
    T* ci = c + size_t(i) * n;
    std::fill(ci, ci + n, T(0));
    const T* ai = a + size_t(i) * k;
    for (int p = 0; p < k; ++p) {
      T av = ai[p];
      const T* bp = b + size_t(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c = a.b^T with a m x k, b n x k: rows of both operands are contiguous.
template <typename T>
void matmul_nt(const T* a, const T* b, T* c, int m, int k, int n) {
  count_macs(uint64_t(m) * k * n);
  int nt = threads_for(uint64_t(m) * k * n);
#pragma omp parallel for schedule(static) num_threads(nt) if (nt > 1)
  for (int i = 0; i < m; ++i) {
    const T* ai = a + size_t(i) * k;
    T* ci = c + size_t(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* bj = b + size_t(j) * k;
      T acc = 0;
      for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] = acc;
    }
  }
}

// c = a^T.b with a k x m, b k x n.
template <typename T>
void matmul_tn(const T* a, const T* b, T* c, int m, int k, int n) {
  count_macs(uint64_t(m) * k * n);
  int nt = threads_for(uint64_t(m) * k * n);
#pragma omp parallel for schedule(static) num_threads(nt) if (nt > 1)
  for (int i = 0; i < m; ++i) {
    T* ci = c + size_t(i) * n;
    std::fill(ci, ci + n, T(0));
    for (int p = 0; p < k; ++p) {
      T av = a[size_t(p) * m + i];
      const T* bp = b + size_t(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

template <typename T>
void transpose(const T* a, T* out, int rows, int cols) {
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) out[size_t(j) * rows + i] = a[size_t(i) * cols + j];
}

template <typename T>
void add(const T* a, const T* b, T* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

template <typename T>
void relu(const T* x, T* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
}

template <typename T>
void gelu(const T* x, T* out, size_t n) {
  const T inv_sqrt2 = T(0.7071067811865475244);
  for (size_t i = 0; i < n; ++i)
    out[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * inv_sqrt2));
}

template <typename T>
void softmax_rows(T* x, int rows, int cols) {
  int nt = threads_for(uint64_t(rows) * cols * 8);
#pragma omp parallel for schedule(static) num_threads(nt) if (nt > 1)
  for (int i = 0; i < rows; ++i) {
    T* row = x + size_t(i) * cols;
    T mx = row[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
    T sum = 0;
    for (int j = 0; j < cols; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    T inv = T(1) / sum;
    for (int j = 0; j < cols; ++j) row[j] *= inv;
  }
}

template <typename T>
void layernorm_rows(const T* x, T* out, const T* scale, const T* shift,
                    int rows, int cols, T eps) {
  int nt = threads_for(uint64_t(rows) * cols * 4);
#pragma omp parallel for schedule(static) num_threads(nt) if (nt > 1)
  for (int i = 0; i < rows; ++i) {
    const T* xi = x + size_t(i) * cols;
    T* oi = out + size_t(i) * cols;
    T mean = 0;
    for (int j = 0; j < cols; ++j) mean += xi[j];
    mean /= T(cols);
    T var = 0;
    for (int j = 0; j < cols; ++j) {
      T d = xi[j] - mean;
      var += d * d;
    }
    var /= T(cols);
    T inv = T(1) / std::sqrt(var + eps);
    for (int j = 0; j < cols; ++j) oi[j] = (xi[j] - mean) * inv * scale[j] + shift[j];
  }
}

template <typename T>
void moments_over_rows(const T* x, int rows, int cols, T* mean, T* var) {
  int nt = threads_for(uint64_t(rows) * cols);
#pragma omp parallel for schedule(static) num_threads(nt) if (nt > 1)
  for (int j = 0; j < cols; ++j) {
    T m = 0;
    for (int i = 0; i < rows; ++i) m += x[size_t(i) * cols + j];
    m /= T(rows);
    T v = 0;
    for (int i = 0; i < rows; ++i) {
      T d = x[size_t(i) * cols + j] - m;
      v += d * d;
    }
    mean[j] = m;
    var[j] = v / T(rows);
  }
}

template <typename T>
void rowvec_affine(const T* x, const T* a, const T* b, T* out, int rows, int cols) {
  int nt = threads_for(uint64_t(rows) * cols);
#pragma omp parallel for schedule(static) num_threads(nt) if (nt > 1)
  for (int i = 0; i < rows; ++i) {
    const T* xi = x + size_t(i) * cols;
    T* oi = out + size_t(i) * cols;
    for (int j = 0; j < cols; ++j) oi[j] = xi[j] * a[j] + b[j];
  }
}

template <typename T>
void depthwise_conv2d(const T* x, const T* kern, T* out, int channels, int h,
                      int w, int ksize, size_t plane_stride, size_t elem_stride) {
  count_macs(uint64_t(channels) * h * w * ksize * ksize);
  int half = ksize / 2;
  int nt = threads_for(uint64_t(channels) * h * w * ksize * ksize);
#pragma omp parallel for schedule(static) num_threads(nt) if (nt > 1)
  for (int c = 0; c < channels; ++c) {
    const T* xc = x + size_t(c) * plane_stride;
    T* oc = out + size_t(c) * plane_stride;
    const T* kc = kern + size_t(c) * ksize * ksize;
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) {
        T acc = 0;
        for (int u = 0; u < ksize; ++u) {
          int yy = y + u - half;
          for (int v = 0; v < ksize; ++v) {
            int xv = xx + v - half;
            T val = (yy >= 0 && yy < h && xv >= 0 && xv < w)
                        ? xc[(size_t(yy) * w + xv) * elem_stride]
                        : T(0);
            acc += kc[u * ksize + v] * val;
          }
        }
        oc[(size_t(y) * w + xx) * elem_stride] = acc;
      }
    }
  }
}

namespace serial {

template <typename T>
void matmul(const T* a, const T* b, T* c, int m, int k, int n) {
  count_macs(uint64_t(m) * k * n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      T acc = 0;
      for (int p = 0; p < k; ++p) acc += a[size_t(i) * k + p] * b[size_t(p) * n + j];
      c[size_t(i) * n + j] = acc;
    }
}

template <typename T>
void matmul_nt(const T* a, const T* b, T* c, int m, int k, int n) {
  count_macs(uint64_t(m) * k * n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      T acc = 0;
      for (int p = 0; p < k; ++p) acc += a[size_t(i) * k + p] * b[size_t(j) * k + p];
      c[size_t(i) * n + j] = acc;
    }
}

template <typename T>
void matmul_tn(const T* a, const T* b, T* c, int m, int k, int n) {
  count_macs(uint64_t(m) * k * n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      T acc = 0;
      for (int p = 0; p < k; ++p) acc += a[size_t(p) * m + i] * b[size_t(p) * n + j];
      c[size_t(i) * n + j] = acc;
    }
}

template <typename T>
void softmax_rows(T* x, int rows, int cols) {
  for (int i = 0; i < rows; ++i) {
    T* row = x + size_t(i) * cols;
    T mx = row[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
    T sum = 0;
    for (int j = 0; j < cols; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (int j = 0; j < cols; ++j) row[j] /= sum;
  }
}

template <typename T>
void layernorm_rows(const T* x, T* out, const T* scale, const T* shift,
                    int rows, int cols, T eps) {
  for (int i = 0; i < rows; ++i) {
    const T* xi = x + size_t(i) * cols;
    T* oi = out + size_t(i) * cols;
    T mean = 0;
    for (int j = 0; j < cols; ++j) mean += xi[j];
    mean /= T(cols);
    T var = 0;
    for (int j = 0; j < cols; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= T(cols);
    T inv = T(1) / std::sqrt(var + eps);
    for (int j = 0; j < cols; ++j) oi[j] = (xi[j] - mean) * inv * scale[j] + shift[j];
  }
}

template <typename T>
void moments_over_rows(const T* x, int rows, int cols, T* mean, T* var) {
  for (int j = 0; j < cols; ++j) {
    T m = 0;
    for (int i = 0; i < rows; ++i) m += x[size_t(i) * cols + j];
    m /= T(rows);
    T v = 0;
    for (int i = 0; i < rows; ++i) {
      T d = x[size_t(i) * cols + j] - m;
      v += d * d;
    }
    mean[j] = m;
    var[j] = v / T(rows);
  }
}

template <typename T>
void depthwise_conv2d(const T* x, const T* kern, T* out, int channels, int h,
                      int w, int ksize, size_t plane_stride, size_t elem_stride) {
  count_macs(uint64_t(channels) * h * w * ksize * ksize);
  int half = ksize / 2;
  for (int c = 0; c < channels; ++c) {
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        T acc = 0;
        for (int u = 0; u < ksize; ++u)
          for (int v = 0; v < ksize; ++v) {
            int yy = y + u - half;
            int xv = xx + v - half;
            T val = (yy >= 0 && yy < h && xv >= 0 && xv < w)
                        ? x[size_t(c) * plane_stride + (size_t(yy) * w + xv) * elem_stride]
                        : T(0);
            acc += kern[size_t(c) * ksize * ksize + u * ksize + v] * val;
          }
        out[size_t(c) * plane_stride + (size_t(y) * w + xx) * elem_stride] = acc;
      }
  }
}

#define SLAB_INSTANTIATE_SERIAL(T)                                            \
  template void matmul<T>(const T*, const T*, T*, int, int, int);             \
  template void matmul_nt<T>(const T*, const T*, T*, int, int, int);          \
  template void matmul_tn<T>(const T*, const T*, T*, int, int, int);          \
  template void softmax_rows<T>(T*, int, int);                                \
  template void layernorm_rows<T>(const T*, T*, const T*, const T*, int, int, T); \
  template void moments_over_rows<T>(const T*, int, int, T*, T*);             \
  template void depthwise_conv2d<T>(const T*, const T*, T*, int, int, int, int, size_t, size_t);

SLAB_INSTANTIATE_SERIAL(float)
SLAB_INSTANTIATE_SERIAL(double)

}  // namespace serial

#define SLAB_INSTANTIATE(T)                                                   \
  template void matmul<T>(const T*, const T*, T*, int, int, int);             \
  template void matmul_nt<T>(const T*, const T*, T*, int, int, int);          \
  template void matmul_tn<T>(const T*, const T*, T*, int, int, int);          \
  template void transpose<T>(const T*, T*, int, int);                         \
  template void add<T>(const T*, const T*, T*, size_t);                       \
  template void relu<T>(const T*, T*, size_t);                                \
  template void gelu<T>(const T*, T*, size_t);                                \
  template void softmax_rows<T>(T*, int, int);                                \
  template void layernorm_rows<T>(const T*, T*, const T*, const T*, int, int, T); \
  template void moments_over_rows<T>(const T*, int, int, T*, T*);             \
  template void rowvec_affine<T>(const T*, const T*, const T*, T*, int, int); \
  template void depthwise_conv2d<T>(const T*, const T*, T*, int, int, int, int, size_t, size_t);

SLAB_INSTANTIATE(float)
SLAB_INSTANTIATE(double)

}  // namespace slab::kernels
