#pragma once

#include <cstddef>
#include <cstdint>

// Raw-buffer compute kernels. The hot paths are OpenMP-parallel with each
// output element reduced by exactly one thread in a fixed order, so results
// are bit-identical for any thread count. `kernels::serial` holds plain
// textbook loops kept as the reference the parallel kernels are tested and
// benchmarked against.
//
// All matrices are row-major and dense.

namespace slab::kernels {

// Thread cap resolution order: programmatic cap, then the SLAB_THREADS
// environment variable, then the OpenMP default. 0 means "no cap here".
int thread_cap();
void set_thread_cap(int cap);
int threads_for(size_t work);

// Pins the cap for a scope (the bench harness uses this for timed regions).
struct ThreadCapGuard {
  explicit ThreadCapGuard(int cap);
  ~ThreadCapGuard();
  ThreadCapGuard(const ThreadCapGuard&) = delete;
  ThreadCapGuard& operator=(const ThreadCapGuard&) = delete;

 private:
  int prev_;
};

// Multiply-accumulate instrumentation. When enabled, every matmul/conv kernel
// adds the exact number of fused multiply-adds it performs. Elementwise and
// reduction kernels contribute nothing; the counter measures matmul-like work
// only, which is what the analytic FLOPs table accounts for.
void set_mac_counting(bool on);
bool mac_counting();
uint64_t mac_count();
void reset_mac_count();

template <typename T>
void matmul(const T* a, const T* b, T* c, int m, int k, int n);  // c = a.b

template <typename T>
void matmul_nt(const T* a, const T* b, T* c, int m, int k, int n);  // c = a.b^T, b is n x k

template <typename T>
void matmul_tn(const T* a, const T* b, T* c, int m, int k, int n);  // c = a^T.b, a is k x m

template <typename T>
void transpose(const T* a, T* out, int rows, int cols);

template <typename T>
void add(const T* a, const T* b, T* out, size_t n);

template <typename T>
void relu(const T* x, T* out, size_t n);

template <typename T>
void gelu(const T* x, T* out, size_t n);

// In-place row softmax with row-max subtraction.
template <typename T>
void softmax_rows(T* x, int rows, int cols);

// Per-row mean/var (population) over the last axis, then scale/shift.
template <typename T>
void layernorm_rows(const T* x, T* out, const T* scale, const T* shift,
                    int rows, int cols, T eps);

// Per-channel population moments over the row axis: x is rows x cols,
// mean/var are cols wide.
template <typename T>
void moments_over_rows(const T* x, int rows, int cols, T* mean, T* var);

// y = x * a + b with a/b broadcast across rows (per-channel affine).
template <typename T>
void rowvec_affine(const T* x, const T* a, const T* b, T* out, int rows, int cols);

// Depth-wise 2-D cross-correlation with zero same-padding. Channel planes are
// H*W elements starting at x + c*plane_stride with consecutive elements
// elem_stride apart, which covers both CHW layout (plane_stride = H*W,
// elem_stride = 1) and token-major NxC layout (plane_stride = 1,
// elem_stride = C). Out-of-range taps multiply an explicit zero so the MAC
// count is exactly channels*H*W*k*k.
template <typename T>
void depthwise_conv2d(const T* x, const T* kern, T* out, int channels, int h,
                      int w, int ksize, size_t plane_stride, size_t elem_stride);

namespace serial {

template <typename T>
void matmul(const T* a, const T* b, T* c, int m, int k, int n);

template <typename T>
void matmul_nt(const T* a, const T* b, T* c, int m, int k, int n);

template <typename T>
void matmul_tn(const T* a, const T* b, T* c, int m, int k, int n);

template <typename T>
void softmax_rows(T* x, int rows, int cols);

template <typename T>
void layernorm_rows(const T* x, T* out, const T* scale, const T* shift,
                    int rows, int cols, T eps);

template <typename T>
void moments_over_rows(const T* x, int rows, int cols, T* mean, T* var);

template <typename T>
void depthwise_conv2d(const T* x, const T* kern, T* out, int channels, int h,
                      int w, int ksize, size_t plane_stride, size_t elem_stride);

}  // namespace serial

}  // namespace slab::kernels
