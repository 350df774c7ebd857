// Parallel kernels vs the serial reference across sizes. Not part of ctest;
// run manually: build/benchmarks/kernel_bench [--benchmark_filter=...]

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "slab/attention.hpp"
#include "slab/kernels.hpp"

using namespace slab;

namespace {

std::vector<float> randvec(size_t n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g{0.0, 1.0};
  std::vector<float> v(n);
  for (auto& x : v) x = float(g(rng));
  return v;
}

}  // namespace

static void BM_MatmulParallel(benchmark::State& state) {
  int n = int(state.range(0));
  auto a = randvec(size_t(n) * n, 1), b = randvec(size_t(n) * n, 2);
  std::vector<float> c(size_t(n) * n);
  for (auto _ : state) {
    kernels::matmul(a.data(), b.data(), c.data(), n, n, n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(int64_t(state.iterations()) * n * n * n);
}
BENCHMARK(BM_MatmulParallel)->Arg(128)->Arg(256)->Arg(512);

static void BM_MatmulSerial(benchmark::State& state) {
  int n = int(state.range(0));
  auto a = randvec(size_t(n) * n, 1), b = randvec(size_t(n) * n, 2);
  std::vector<float> c(size_t(n) * n);
  for (auto _ : state) {
    kernels::serial::matmul(a.data(), b.data(), c.data(), n, n, n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(int64_t(state.iterations()) * n * n * n);
}
BENCHMARK(BM_MatmulSerial)->Arg(128)->Arg(256)->Arg(512);

static void BM_SoftmaxRowsParallel(benchmark::State& state) {
  int n = int(state.range(0));
  auto x = randvec(size_t(n) * n, 3);
  auto work = x;
  for (auto _ : state) {
    work = x;
    kernels::softmax_rows(work.data(), n, n);
    benchmark::DoNotOptimize(work.data());
  }
}
BENCHMARK(BM_SoftmaxRowsParallel)->Arg(256)->Arg(1024);

static void BM_SoftmaxRowsSerial(benchmark::State& state) {
  int n = int(state.range(0));
  auto x = randvec(size_t(n) * n, 3);
  auto work = x;
  for (auto _ : state) {
    work = x;
    kernels::serial::softmax_rows(work.data(), n, n);
    benchmark::DoNotOptimize(work.data());
  }
}
BENCHMARK(BM_SoftmaxRowsSerial)->Arg(256)->Arg(1024);

static void BM_LayernormParallel(benchmark::State& state) {
  int n = int(state.range(0)), c = 192;
  auto x = randvec(size_t(n) * c, 4);
  std::vector<float> out(x.size()), scale(c, 1.f), shift(c, 0.f);
  for (auto _ : state) {
    kernels::layernorm_rows(x.data(), out.data(), scale.data(), shift.data(), n, c, 1e-5f);
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK(BM_LayernormParallel)->Arg(1024)->Arg(4096);

static void BM_LayernormSerial(benchmark::State& state) {
  int n = int(state.range(0)), c = 192;
  auto x = randvec(size_t(n) * c, 4);
  std::vector<float> out(x.size()), scale(c, 1.f), shift(c, 0.f);
  for (auto _ : state) {
    kernels::serial::layernorm_rows(x.data(), out.data(), scale.data(), shift.data(), n, c,
                                    1e-5f);
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK(BM_LayernormSerial)->Arg(1024)->Arg(4096);

static void BM_DepthwiseConvParallel(benchmark::State& state) {
  int c = 192, h = int(state.range(0)), w = h;
  auto x = randvec(size_t(c) * h * w, 5);
  auto kern = randvec(size_t(c) * 9, 6);
  std::vector<float> out(x.size());
  for (auto _ : state) {
    kernels::depthwise_conv2d(x.data(), kern.data(), out.data(), c, h, w, 3, size_t(h) * w, 1);
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK(BM_DepthwiseConvParallel)->Arg(16)->Arg(64);

static void BM_DepthwiseConvSerial(benchmark::State& state) {
  int c = 192, h = int(state.range(0)), w = h;
  auto x = randvec(size_t(c) * h * w, 5);
  auto kern = randvec(size_t(c) * 9, 6);
  std::vector<float> out(x.size());
  for (auto _ : state) {
    kernels::serial::depthwise_conv2d(x.data(), kern.data(), out.data(), c, h, w, 3,
                                      size_t(h) * w, 1);
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK(BM_DepthwiseConvSerial)->Arg(16)->Arg(64);

BENCHMARK_MAIN();
