// Parallel kernels against the serial reference, plus thread-count
// determinism and the MAC instrumentation contract.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>
#include <vector>

#include "slab/kernels.hpp"

using namespace slab;

namespace {

std::vector<float> randvec(size_t n, std::mt19937_64& rng, float scale = 1.f) {
  std::normal_distribution<double> g{0.0, 1.0};
  std::vector<float> v(n);
  for (auto& x : v) x = float(g(rng)) * scale;
  return v;
}

double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
  double m = 0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, double(std::abs(a[i] - b[i])));
  return m;
}

}  // namespace

TEST_CASE("matmul family matches serial reference") {
  std::mt19937_64 rng(11);
  for (auto [m, k, n] : {std::tuple{17, 9, 23}, std::tuple{64, 64, 64}, std::tuple{1, 5, 1},
                         std::tuple{33, 128, 7}}) {
    auto a = randvec(size_t(m) * k, rng);
    auto b = randvec(size_t(k) * n, rng);
    std::vector<float> c1(size_t(m) * n), c2(size_t(m) * n);
    kernels::matmul(a.data(), b.data(), c1.data(), m, k, n);
    kernels::serial::matmul(a.data(), b.data(), c2.data(), m, k, n);
    CHECK(max_abs_diff(c1, c2) < 1e-4);

    auto bt = randvec(size_t(n) * k, rng);
    kernels::matmul_nt(a.data(), bt.data(), c1.data(), m, k, n);
    kernels::serial::matmul_nt(a.data(), bt.data(), c2.data(), m, k, n);
    CHECK(max_abs_diff(c1, c2) < 1e-4);

    auto at = randvec(size_t(k) * m, rng);
    kernels::matmul_tn(at.data(), b.data(), c1.data(), m, k, n);
    kernels::serial::matmul_tn(at.data(), b.data(), c2.data(), m, k, n);
    CHECK(max_abs_diff(c1, c2) < 1e-4);
  }
}

TEST_CASE("softmax, layernorm, moments, conv match serial reference") {
  std::mt19937_64 rng(12);
  int rows = 37, cols = 19;
  auto x = randvec(size_t(rows) * cols, rng, 2.f);

  auto s1 = x, s2 = x;
  kernels::softmax_rows(s1.data(), rows, cols);
  kernels::serial::softmax_rows(s2.data(), rows, cols);
  CHECK(max_abs_diff(s1, s2) < 1e-6);

  auto scale = randvec(cols, rng), shift = randvec(cols, rng);
  std::vector<float> l1(x.size()), l2(x.size());
  kernels::layernorm_rows(x.data(), l1.data(), scale.data(), shift.data(), rows, cols, 1e-5f);
  kernels::serial::layernorm_rows(x.data(), l2.data(), scale.data(), shift.data(), rows, cols,
                                  1e-5f);
  CHECK(max_abs_diff(l1, l2) < 1e-5);

  std::vector<float> m1(cols), v1(cols), m2(cols), v2(cols);
  kernels::moments_over_rows(x.data(), rows, cols, m1.data(), v1.data());
  kernels::serial::moments_over_rows(x.data(), rows, cols, m2.data(), v2.data());
  CHECK(max_abs_diff(m1, m2) < 1e-5);
  CHECK(max_abs_diff(v1, v2) < 1e-5);
  for (float v : v1) CHECK(v >= 0.f);

  int c = 6, h = 7, w = 5, ks = 3;
  auto img = randvec(size_t(c) * h * w, rng);
  auto kern = randvec(size_t(c) * ks * ks, rng);
  std::vector<float> o1(img.size()), o2(img.size());
  kernels::depthwise_conv2d(img.data(), kern.data(), o1.data(), c, h, w, ks, size_t(h) * w, 1);
  kernels::serial::depthwise_conv2d(img.data(), kern.data(), o2.data(), c, h, w, ks,
                                    size_t(h) * w, 1);
  CHECK(max_abs_diff(o1, o2) < 1e-5);

  // token-major layout agrees with plane-major on transposed data
  std::vector<float> tok(img.size()), o3(img.size());
  for (int ch = 0; ch < c; ++ch)
    for (int t = 0; t < h * w; ++t) tok[size_t(t) * c + ch] = img[size_t(ch) * h * w + t];
  kernels::depthwise_conv2d(tok.data(), kern.data(), o3.data(), c, h, w, ks, 1, size_t(c));
  double m = 0;
  for (int ch = 0; ch < c; ++ch)
    for (int t = 0; t < h * w; ++t)
      m = std::max(m, double(std::abs(o3[size_t(t) * c + ch] - o1[size_t(ch) * h * w + t])));
  CHECK(m < 1e-6);
}

TEST_CASE("results are bit-identical across thread caps") {
  std::mt19937_64 rng(13);
  int m = 61, k = 47, n = 53;
  auto a = randvec(size_t(m) * k, rng);
  auto b = randvec(size_t(k) * n, rng);
  std::vector<float> c1(size_t(m) * n), c2(size_t(m) * n);
  {
    kernels::ThreadCapGuard cap(1);
    kernels::matmul(a.data(), b.data(), c1.data(), m, k, n);
  }
  {
    kernels::ThreadCapGuard cap(4);
    kernels::matmul(a.data(), b.data(), c2.data(), m, k, n);
  }
  CHECK(std::memcmp(c1.data(), c2.data(), c1.size() * sizeof(float)) == 0);
}

TEST_CASE("mac counter records exact matmul and conv work") {
  kernels::reset_mac_count();
  kernels::set_mac_counting(true);
  std::vector<float> a(6 * 4, 1.f), b(4 * 5, 1.f), c(6 * 5);
  kernels::matmul(a.data(), b.data(), c.data(), 6, 4, 5);
  CHECK(kernels::mac_count() == 6u * 4u * 5u);

  kernels::reset_mac_count();
  std::vector<float> img(3 * 4 * 4, 1.f), kern(3 * 9, 1.f), out(3 * 4 * 4);
  kernels::depthwise_conv2d(img.data(), kern.data(), out.data(), 3, 4, 4, 3, 16, 1);
  CHECK(kernels::mac_count() == 3u * 4u * 4u * 9u);
  kernels::set_mac_counting(false);

  kernels::reset_mac_count();
  kernels::matmul(a.data(), b.data(), c.data(), 6, 4, 5);
  CHECK(kernels::mac_count() == 0);  // disabled counter stays silent
}
