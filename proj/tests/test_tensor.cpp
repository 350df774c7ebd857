#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "slab/tensor.hpp"

using namespace slab;
using TD = Tensor<double>;

namespace {

// Independent triple-loop product used as the matmul oracle.
std::vector<double> matmul_oracle(const std::vector<double>& a, const std::vector<double>& b,
                                  int m, int k, int n) {
  std::vector<double> c(size_t(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      for (int p = 0; p < k; ++p) c[size_t(i) * n + j] += a[size_t(i) * k + p] * b[size_t(p) * n + j];
  return c;
}

}  // namespace

TEST_CASE("matmul identity and hand oracle") {
  auto eye = TD::from_data({2, 2}, {1, 0, 0, 1});
  auto m = TD::from_data({2, 2}, {1, 2, 3, 4});
  auto r = matmul(eye, m);
  for (size_t i = 0; i < 4; ++i) CHECK(r.data()[i] == m.data()[i]);

  auto a = TD::from_data({2, 2}, {1, 2, 3, 4});
  auto b = TD::from_data({2, 1}, {5, 6});
  auto c = matmul(a, b);
  CHECK(c.data()[0] == doctest::Approx(17));
  CHECK(c.data()[1] == doctest::Approx(39));
}

TEST_CASE("matmul rejects mismatched inner extents") {
  auto a = TD::zeros({2, 3});
  auto b = TD::zeros({2, 3});
  CHECK_THROWS_AS(matmul(a, b), ShapeMismatch);
}

TEST_CASE("matmul matches triple-loop oracle on random shapes") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_int_distribution<int> dist(1, 9);
    int m = dist(rng), k = dist(rng), n = dist(rng);
    auto a = TD::randn({m, k}, rng);
    auto b = TD::randn({k, n}, rng);
    auto c = matmul(a, b);
    auto want = matmul_oracle(a.value(), b.value(), m, k, n);
    for (size_t i = 0; i < want.size(); ++i)
      CHECK(c.data()[i] == doctest::Approx(want[i]).epsilon(1e-12));
  }
}

TEST_CASE("reduce_moments constants, hand case, errors") {
  auto sevens = TD::full({3, 4}, 7.0);
  auto [m, v] = reduce_moments(sevens, {0, 1});
  CHECK(m.item() == doctest::Approx(7.0));
  CHECK(v.item() == doctest::Approx(0.0));

  auto x = TD::from_data({2}, {1, 3});
  auto [m2, v2] = reduce_moments(x, {0});
  CHECK(m2.item() == doctest::Approx(2.0));
  CHECK(v2.item() == doctest::Approx(1.0));  // population variance

  auto empty = TD::zeros({0});
  CHECK_THROWS_AS(reduce_moments(empty, {0}), EmptyReduction);
}

TEST_CASE("reduce_moments variance is nonnegative") {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 50; ++t) {
    auto x = TD::randn({4, 3}, rng, 3.0);
    auto [m, v] = reduce_moments(x, {0});
    for (size_t i = 0; i < v.size(); ++i) CHECK(v.data()[i] >= 0.0);
  }
}

TEST_CASE("relu values and subgradient at zero") {
  auto x = TD::from_data({3}, {-1, 0, 2});
  auto y = relu(x);
  CHECK(y.data()[0] == 0);
  CHECK(y.data()[1] == 0);
  CHECK(y.data()[2] == 2);

  auto neg = TD::full({4}, -3.0);
  auto z = relu(neg);
  for (size_t i = 0; i < z.size(); ++i) CHECK(z.data()[i] == 0);

  auto g = TD::from_data({2}, {-1, 2}).set_requires_grad();
  backward(sum(relu(g)));  // upstream ones
  CHECK(g.grad_ref()[0] == 0);
  CHECK(g.grad_ref()[1] == 1);
}

TEST_CASE("softmax uniform, hand value, row sums") {
  auto c = softmax_lastdim(TD::full({1, 3}, 4.2));
  for (int j = 0; j < 3; ++j) CHECK(c.data()[j] == doctest::Approx(1.0 / 3));

  auto x = softmax_lastdim(TD::from_data({1, 2}, {0.0, std::log(3.0)}));
  CHECK(x.data()[0] == doctest::Approx(0.25));
  CHECK(x.data()[1] == doctest::Approx(0.75));

  std::mt19937_64 rng(8);
  for (int t = 0; t < 30; ++t) {
    auto r = softmax_lastdim(TD::randn({5, 7}, rng, 30.0));  // large logits: stabilized
    for (int i = 0; i < 5; ++i) {
      double s = 0;
      for (int j = 0; j < 7; ++j) s += r.data()[size_t(i) * 7 + j];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("depthwise conv: identity kernel, averaging, six-loop oracle") {
  std::mt19937_64 rng(9);
  auto x = TD::randn({2, 4, 4}, rng);
  auto center = TD::zeros({2, 3, 3});
  center.mutable_value()[4] = 1.0;
  center.mutable_value()[13] = 1.0;
  auto y = depthwise_conv2d(x, center);
  for (size_t i = 0; i < x.size(); ++i) CHECK(y.data()[i] == x.data()[i]);  // exact

  auto ones = TD::full({1, 5, 5}, 2.0);
  auto avg = TD::full({1, 3, 3}, 1.0 / 9);
  auto a = depthwise_conv2d(ones, avg);
  // interior keeps the constant, corners see 4 in-range taps out of 9
  CHECK(a.data()[1 * 5 + 1] == doctest::Approx(2.0));
  CHECK(a.data()[2 * 5 + 2] == doctest::Approx(2.0));
  CHECK(a.data()[0] == doctest::Approx(2.0 * 4 / 9));

  auto kern = TD::randn({2, 3, 3}, rng);
  auto got = depthwise_conv2d(x, kern);
  // independent six-loop evaluation
  for (int c = 0; c < 2; ++c)
    for (int yy = 0; yy < 4; ++yy)
      for (int xx = 0; xx < 4; ++xx) {
        double acc = 0;
        for (int u = 0; u < 3; ++u)
          for (int v = 0; v < 3; ++v) {
            int sy = yy + u - 1, sx = xx + v - 1;
            if (sy >= 0 && sy < 4 && sx >= 0 && sx < 4)
              acc += kern.data()[c * 9 + u * 3 + v] * x.data()[c * 16 + sy * 4 + sx];
          }
        CHECK(got.data()[c * 16 + yy * 4 + xx] == doctest::Approx(acc).epsilon(1e-12));
      }

  CHECK_THROWS_AS(depthwise_conv2d(x, TD::zeros({3, 3, 3})), ShapeMismatch);
  CHECK_THROWS_AS(depthwise_conv2d(x, TD::zeros({2, 2, 2})), InvalidKernel);
}

TEST_CASE("backward: linear functional, quadratic, accumulation, NotScalar") {
  std::mt19937_64 rng(10);
  auto x = TD::randn({3, 4}, rng).set_requires_grad();
  backward(sum(x));
  for (size_t i = 0; i < x.size(); ++i) CHECK(x.grad_ref()[i] == 1.0);

  auto q = TD::from_data({2}, {1, -2}).set_requires_grad();
  backward(sum(hadamard(q, q)));
  CHECK(q.grad_ref()[0] == doctest::Approx(2.0));
  CHECK(q.grad_ref()[1] == doctest::Approx(-4.0));

  auto u = TD::from_data({2}, {1, 1}).set_requires_grad();
  auto path1 = scale(u, 2.0);
  auto path2 = scale(u, 3.0);
  backward(sum(add(path1, path2)));
  CHECK(u.grad_ref()[0] == doctest::Approx(5.0));

  auto vec = TD::zeros({3}).set_requires_grad();
  CHECK_THROWS_AS(backward(vec), NotScalar);
}

TEST_CASE("no-grad mode records nothing") {
  auto x = TD::from_data({2}, {1, 2}).set_requires_grad();
  {
    NoGradGuard ng;
    auto y = sum(hadamard(x, x));
    CHECK_FALSE(y.requires_grad());
  }
  auto y = sum(hadamard(x, x));
  CHECK(y.requires_grad());
}

TEST_CASE("tensor invariants: shape/data agreement and grad shape") {
  CHECK_THROWS_AS(TD::from_data({2, 2}, {1, 2, 3}), ShapeMismatch);
  auto x = TD::from_data({2, 2}, {1, 2, 3, 4}).set_requires_grad();
  backward(sum(x));
  auto g = x.grad();
  REQUIRE(g.has_value());
  CHECK(g->shape() == x.shape());
}
