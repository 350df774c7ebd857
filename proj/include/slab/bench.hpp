#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "slab/common.hpp"

// Latency harness. Measures forward latency with a monotonic clock over a
// strictly increasing sweep of token counts, reports median and interquartile
// range per point, and fits log-log scaling exponents with a bootstrap
// confidence interval. The timed region reuses all allocations and is pinned
// to a single thread unless the spec says otherwise (recorded in metadata).

namespace slab {

enum class BenchTarget { attention, normalization, full_block };

inline const char* to_string(BenchTarget t) {
  switch (t) {
    case BenchTarget::attention: return "attention";
    case BenchTarget::normalization: return "normalization";
    case BenchTarget::full_block: return "full-block";
  }
  return "attention";
}

BenchTarget parse_bench_target(const std::string& s);

// Valid variant names per target; unknown names raise ConfigError listing
// these.
std::vector<std::string> bench_variants_for(BenchTarget t);

struct BenchSpec {
  BenchTarget target = BenchTarget::attention;
  std::vector<std::string> variants;  // empty: all for the target
  std::vector<int> seq_lens;
  int dim = 192;
  int heads = 3;
  double mlp_ratio = 4.0;
  int warmup_iters = 3;
  int timed_iters = 30;
  int repetitions = 1;
  int threads = 1;
  uint64_t seed = 123;

  void validate() const;
};

struct BenchPoint {
  std::string variant;
  int n = 0, c = 0;
  double median_ms = 0, q1_ms = 0, q3_ms = 0;
  double flops = 0;  // multiply-accumulate count from the analytic table

  double iqr_ms() const { return q3_ms - q1_ms; }
};

struct SlopeFit {
  double slope = 0, ci_lo = 0, ci_hi = 0;
  bool valid = false;
  std::string note;
};

struct BenchReport {
  BenchSpec spec;
  std::vector<BenchPoint> points;
  std::vector<std::pair<std::string, SlopeFit>> slopes;  // one per variant entry
  std::string compiler;
  int omp_max_threads = 0;
  int timed_threads = 0;
};

// Least-squares slope of log(latency) vs log(N) with a bootstrap confidence
// interval. Throws InsufficientPoints below 4 points and NonPositiveLatency
// on non-positive samples.
SlopeFit fit_scaling_exponent(const std::vector<std::pair<double, double>>& points);

BenchReport run_sweep(const BenchSpec& spec);

// format: "csv" or "json". Also writes a standalone plotting script next to
// the data (path + ".plot.py").
void emit_report(const BenchReport& report, const std::string& format, const std::string& path);

}  // namespace slab
