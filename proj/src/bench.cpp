#include "slab/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <random>

#include <omp.h>
#include <json.hpp>

#include "slab/attention.hpp"
#include "slab/kernels.hpp"
#include "slab/model.hpp"

namespace slab {

namespace {

inline void do_not_optimize(const void* p) { asm volatile("" : : "g"(p) : "memory"); }

TokenGrid grid_for(int n) {
  int h = int(std::sqrt(double(n)));
  while (h > 1 && n % h != 0) --h;
  return {h, n / h};
}

double now_ms() {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

struct Workload {
  virtual ~Workload() = default;
  virtual void forward() = 0;
  virtual double flops() const = 0;
};

struct AttentionWork : Workload {
  AttnKind kind;
  int n, c;
  AttentionParams<float> params;
  TokenGrid grid;
  std::vector<float> x, out, scores;
  AttentionWorkspace<float> ws;

  AttentionWork(AttnKind kind_, int n_, int c_, int heads, uint64_t seed)
      : kind(kind_), n(n_), c(c_), grid(grid_for(n_)) {
    std::mt19937_64 rng(seed);
    params = AttentionParams<float>::init(c, heads, 3, rng);
    auto xt = Tensor<float>::randn({n, c}, rng, 0.5f);
    x = xt.value();
    out.assign(size_t(n) * c, 0.f);
  }

  void forward() override {
    if (kind == AttnKind::softmax)
      softmax_attention_eval(x.data(), n, params, ws, scores, out.data());
    else
      sla_attention_eval(x.data(), n, params, grid, ws, out.data());
    do_not_optimize(out.data());
  }

  double flops() const override {
    return double(attention_proj_macs(n, c) +
                  attention_core_macs(n, c, uint64_t(params.heads), kind) +
                  attention_dwc_macs(n, c, 3, kind));
  }
};

struct NormWork : Workload {
  enum class Kind { layernorm, batchnorm, affine } kind;
  int n, c;
  std::vector<float> x, out, scale, shift, a, b;

  NormWork(Kind kind_, int n_, int c_, uint64_t seed) : kind(kind_), n(n_), c(c_) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g{0.0, 1.0};
    x.resize(size_t(n) * c);
    for (auto& v : x) v = float(g(rng));
    out.assign(x.size(), 0.f);
    scale.assign(c, 1.f);
    shift.assign(c, 0.f);
    a.resize(c);
    b.resize(c);
    for (int j = 0; j < c; ++j) {
      // per-channel affine as an eval-mode BN would resolve it
      float mu = float(g(rng)), var = float(std::abs(g(rng))) + 0.5f;
      float alpha = 1.f + 0.1f * float(g(rng)), beta = 0.1f * float(g(rng));
      float s = alpha / std::sqrt(var + 1e-5f);
      a[j] = s;
      b[j] = beta - s * mu;
    }
  }

  void forward() override {
    if (kind == Kind::layernorm)
      kernels::layernorm_rows(x.data(), out.data(), scale.data(), shift.data(), n, c, 1e-5f);
    else
      kernels::rowvec_affine(x.data(), a.data(), b.data(), out.data(), n, c);
    do_not_optimize(out.data());
  }

  double flops() const override { return 0.0; }  // no multiply-accumulate terms
};

// One pre-norm transformer block on raw buffers. "fused" runs with the norm
// folded away entirely; "ln"/"bn" pay the respective normalization pass.
struct BlockWork : Workload {
  std::string norm;  // ln | bn | fused
  AttnKind kind;
  int n, c, hidden;
  TokenGrid grid;
  AttentionParams<float> attn;
  std::vector<float> ln_scale, ln_shift, aff_a, aff_b;
  std::vector<float> fc1_w, fc1_b, fc2_w, fc2_b;
  std::vector<float> x, h, attn_out, r2, h2, mid, mlp_out, out, scores;
  AttentionWorkspace<float> ws;

  BlockWork(std::string norm_, AttnKind kind_, int n_, int c_, int heads, double mlp_ratio,
            uint64_t seed)
      : norm(std::move(norm_)), kind(kind_), n(n_), c(c_), hidden(int(mlp_ratio * c_)),
        grid(grid_for(n_)) {
    std::mt19937_64 rng(seed);
    attn = AttentionParams<float>::init(c, heads, 3, rng);
    std::normal_distribution<double> g{0.0, 1.0};
    auto fill = [&](std::vector<float>& v, size_t count, float std_dev) {
      v.resize(count);
      for (auto& e : v) e = float(g(rng)) * std_dev;
    };
    fill(fc1_w, size_t(c) * hidden, 0.02f);
    fill(fc1_b, hidden, 0.f);
    fill(fc2_w, size_t(hidden) * c, 0.02f);
    fill(fc2_b, c, 0.f);
    ln_scale.assign(c, 1.f);
    ln_shift.assign(c, 0.f);
    fill(aff_a, c, 0.f);
    for (auto& v : aff_a) v += 1.f;
    fill(aff_b, c, 0.02f);
    fill(x, size_t(n) * c, 1.f);
    h.assign(x.size(), 0.f);
    attn_out.assign(x.size(), 0.f);
    r2.assign(x.size(), 0.f);
    h2.assign(x.size(), 0.f);
    mid.assign(size_t(n) * hidden, 0.f);
    mlp_out.assign(x.size(), 0.f);
    out.assign(x.size(), 0.f);
  }

  const float* apply_norm(const float* src, std::vector<float>& dst) {
    if (norm == "fused") return src;
    if (norm == "ln")
      kernels::layernorm_rows(src, dst.data(), ln_scale.data(), ln_shift.data(), n, c, 1e-5f);
    else
      kernels::rowvec_affine(src, aff_a.data(), aff_b.data(), dst.data(), n, c);
    return dst.data();
  }

  void forward() override {
    const float* h1 = apply_norm(x.data(), h);
    if (kind == AttnKind::softmax)
      softmax_attention_eval(h1, n, attn, ws, scores, attn_out.data());
    else
      sla_attention_eval(h1, n, attn, grid, ws, attn_out.data());
    kernels::add(x.data(), attn_out.data(), r2.data(), x.size());

    const float* hn = apply_norm(r2.data(), h2);
    kernels::matmul(hn, fc1_w.data(), mid.data(), n, c, hidden);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < hidden; ++j) mid[size_t(i) * hidden + j] += fc1_b[j];
    kernels::gelu(mid.data(), mid.data(), mid.size());
    kernels::matmul(mid.data(), fc2_w.data(), mlp_out.data(), n, hidden, c);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < c; ++j) mlp_out[size_t(i) * c + j] += fc2_b[j];
    kernels::add(r2.data(), mlp_out.data(), out.data(), out.size());
    do_not_optimize(out.data());
  }

  double flops() const override {
    return double(attention_proj_macs(n, c) +
                  attention_core_macs(n, c, uint64_t(attn.heads), kind) +
                  attention_dwc_macs(n, c, 3, kind) + mlp_macs(n, c, uint64_t(hidden)));
  }
};

std::unique_ptr<Workload> make_workload(const BenchSpec& spec, const std::string& variant,
                                        int n) {
  uint64_t seed = spec.seed ^ (uint64_t(n) << 20);
  switch (spec.target) {
    case BenchTarget::attention:
      return std::make_unique<AttentionWork>(parse_attn_kind(variant), n, spec.dim, spec.heads,
                                             seed);
    case BenchTarget::normalization: {
      NormWork::Kind k = variant == "layernorm" ? NormWork::Kind::layernorm
                         : variant == "batchnorm" ? NormWork::Kind::batchnorm
                                                  : NormWork::Kind::affine;
      return std::make_unique<NormWork>(k, n, spec.dim, seed);
    }
    case BenchTarget::full_block: {
      auto dash = variant.find('-');
      return std::make_unique<BlockWork>(variant.substr(0, dash),
                                         parse_attn_kind(variant.substr(dash + 1)), n, spec.dim,
                                         spec.heads, spec.mlp_ratio, seed);
    }
  }
  throw ConfigError("bench: unreachable target");
}

void check_variant(BenchTarget target, const std::string& v) {
  auto valid = bench_variants_for(target);
  if (std::find(valid.begin(), valid.end(), v) == valid.end()) {
    std::string list;
    for (const auto& s : valid) list += (list.empty() ? "" : ", ") + s;
    throw ConfigError("bench: unknown variant '" + v + "' for target " +
                      to_string(target) + " (valid: " + list + ")");
  }
}

}  // namespace

BenchTarget parse_bench_target(const std::string& s) {
  if (s == "attention") return BenchTarget::attention;
  if (s == "normalization") return BenchTarget::normalization;
  if (s == "full-block") return BenchTarget::full_block;
  throw ConfigError("unknown bench target '" + s + "' (attention|normalization|full-block)");
}

std::vector<std::string> bench_variants_for(BenchTarget t) {
  switch (t) {
    case BenchTarget::attention: return {"softmax", "sla"};
    case BenchTarget::normalization: return {"layernorm", "batchnorm", "affine"};
    case BenchTarget::full_block:
      return {"ln-softmax", "ln-sla", "bn-softmax", "bn-sla", "fused-softmax", "fused-sla"};
  }
  return {};
}

void BenchSpec::validate() const {
  if (timed_iters < 30) throw ConfigError("bench: timed_iters must be >= 30");
  if (warmup_iters < 0 || repetitions < 1 || threads < 1)
    throw ConfigError("bench: warmup_iters >= 0, repetitions >= 1, threads >= 1");
  if (seq_lens.empty()) throw ConfigError("bench: empty sweep");
  for (size_t i = 0; i + 1 < seq_lens.size(); ++i)
    if (seq_lens[i] >= seq_lens[i + 1])
      throw ConfigError("bench: sweep must be strictly increasing");
  if (seq_lens.front() < 1) throw ConfigError("bench: sweep values must be positive");
  if (dim < 1 || heads < 1 || dim % heads != 0)
    throw ConfigError("bench: dim must be divisible by heads");
  for (const auto& v : variants) check_variant(target, v);
}

SlopeFit fit_scaling_exponent(const std::vector<std::pair<double, double>>& points) {
  if (points.size() < 4)
    throw InsufficientPoints("fit_scaling_exponent: need >= 4 points, got " +
                             std::to_string(points.size()));
  for (auto& [n, t] : points)
    if (n <= 0 || t <= 0)
      throw NonPositiveLatency("fit_scaling_exponent: non-positive sample (" +
                               std::to_string(n) + ", " + std::to_string(t) + ")");
  auto ols = [](const std::vector<std::pair<double, double>>& pts) {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (auto& [x, y] : pts) {
      double lx = std::log(x), ly = std::log(y);
      sx += lx;
      sy += ly;
      sxx += lx * lx;
      sxy += lx * ly;
    }
    double n = double(pts.size());
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
  };
  SlopeFit fit;
  fit.slope = ols(points);
  // Bootstrap over points.
  std::mt19937_64 rng(0xB007);
  std::uniform_int_distribution<size_t> pick(0, points.size() - 1);
  std::vector<double> slopes;
  slopes.reserve(1000);
  std::vector<std::pair<double, double>> sample(points.size());
  for (int b = 0; b < 1000; ++b) {
    bool distinct = false;
    for (int tries = 0; tries < 64 && !distinct; ++tries) {
      for (auto& s : sample) s = points[pick(rng)];
      for (size_t i = 1; i < sample.size(); ++i)
        if (sample[i].first != sample[0].first) distinct = true;
    }
    if (distinct) slopes.push_back(ols(sample));
  }
  std::sort(slopes.begin(), slopes.end());
  if (!slopes.empty()) {
    fit.ci_lo = slopes[size_t(0.025 * double(slopes.size() - 1))];
    fit.ci_hi = slopes[size_t(0.975 * double(slopes.size() - 1))];
  } else {
    fit.ci_lo = fit.ci_hi = fit.slope;
  }
  fit.valid = true;
  return fit;
}

BenchReport run_sweep(const BenchSpec& spec_in) {
  BenchSpec spec = spec_in;
  if (spec.variants.empty()) spec.variants = bench_variants_for(spec.target);
  spec.validate();

  BenchReport report;
  report.spec = spec;
  report.compiler = __VERSION__;
  report.omp_max_threads = omp_get_max_threads();
  report.timed_threads = spec.threads;

  kernels::ThreadCapGuard cap(spec.threads);
  for (const auto& variant : spec.variants) {
    std::vector<std::pair<double, double>> fit_points;
    for (int n : spec.seq_lens) {
      auto work = make_workload(spec, variant, n);
      for (int i = 0; i < spec.warmup_iters; ++i) work->forward();
      std::vector<double> samples;
      samples.reserve(size_t(spec.timed_iters) * spec.repetitions);
      for (int rep = 0; rep < spec.repetitions; ++rep)
        for (int it = 0; it < spec.timed_iters; ++it) {
          double t0 = now_ms();
          work->forward();
          samples.push_back(now_ms() - t0);
        }
      std::sort(samples.begin(), samples.end());
      BenchPoint pt;
      pt.variant = variant;
      pt.n = n;
      pt.c = spec.dim;
      pt.median_ms = samples[samples.size() / 2];
      pt.q1_ms = samples[samples.size() / 4];
      pt.q3_ms = samples[(samples.size() * 3) / 4];
      pt.flops = work->flops();
      report.points.push_back(pt);
      fit_points.emplace_back(double(n), pt.median_ms);
    }
    SlopeFit fit;
    if (fit_points.size() >= 4) {
      try {
        fit = fit_scaling_exponent(fit_points);
      } catch (const Error& e) {
        fit.note = e.what();
      }
    } else {
      fit.note = "slope omitted: need >= 4 sweep points, got " +
                 std::to_string(fit_points.size());
    }
    report.slopes.emplace_back(variant, fit);
  }
  return report;
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_plot_script(const std::string& data_path, const std::string& format) {
  std::ofstream out(data_path + ".plot.py");
  if (!out) return;
  out << "#!/usr/bin/env python3\n"
         "\"\"\"Log-log latency plot for a sweep emitted next to this script.\"\"\"\n"
         "import csv, json, sys\n"
         "from collections import defaultdict\n"
         "import matplotlib\n"
         "matplotlib.use(\"Agg\")\n"
         "import matplotlib.pyplot as plt\n\n"
         "path = sys.argv[1] if len(sys.argv) > 1 else "
      << std::quoted(data_path) << "\n"
      << "series = defaultdict(list)\n";
  if (format == "csv")
    out << "with open(path) as f:\n"
           "    for row in csv.DictReader(f):\n"
           "        series[row[\"variant\"]].append((int(row[\"N\"]), "
           "float(row[\"median_ms\"])))\n";
  else
    out << "doc = json.load(open(path))\n"
           "for p in doc[\"points\"]:\n"
           "    series[p[\"variant\"]].append((p[\"n\"], p[\"median_ms\"]))\n";
  out << "for name, pts in sorted(series.items()):\n"
         "    pts.sort()\n"
         "    plt.loglog([n for n, _ in pts], [t for _, t in pts], marker=\"o\", label=name)\n"
         "plt.xlabel(\"tokens N\")\n"
         "plt.ylabel(\"median latency (ms)\")\n"
         "plt.legend()\n"
         "plt.grid(True, which=\"both\", alpha=0.3)\n"
         "plt.savefig(path + \".png\", dpi=120, bbox_inches=\"tight\")\n"
         "print(\"wrote\", path + \".png\")\n";
}

}  // namespace

void emit_report(const BenchReport& report, const std::string& format, const std::string& path) {
  if (format != "csv" && format != "json")
    throw ConfigError("emit_report: format must be csv or json, got '" + format + "'");
  auto slope_of = [&](const std::string& variant) -> const SlopeFit* {
    for (auto& [v, s] : report.slopes)
      if (v == variant) return &s;
    return nullptr;
  };
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  if (format == "csv") {
    out << "target,variant,N,C,median_ms,iqr_ms,flops,slope,slope_ci_lo,slope_ci_hi\n";
    for (const auto& p : report.points) {
      const SlopeFit* s = slope_of(p.variant);
      out << to_string(report.spec.target) << ',' << p.variant << ',' << p.n << ',' << p.c << ','
          << fmt(p.median_ms) << ',' << fmt(p.iqr_ms()) << ',' << fmt(p.flops) << ',';
      if (s && s->valid)
        out << fmt(s->slope) << ',' << fmt(s->ci_lo) << ',' << fmt(s->ci_hi);
      else
        out << ",,";
      out << '\n';
    }
  } else {
    nlohmann::json doc;
    doc["target"] = to_string(report.spec.target);
    doc["env"] = {{"compiler", report.compiler},
                  {"omp_max_threads", report.omp_max_threads},
                  {"timed_threads", report.timed_threads}};
    doc["points"] = nlohmann::json::array();
    for (const auto& p : report.points)
      doc["points"].push_back({{"variant", p.variant},
                               {"n", p.n},
                               {"c", p.c},
                               {"median_ms", p.median_ms},
                               {"iqr_ms", p.iqr_ms()},
                               {"flops", p.flops}});
    doc["slopes"] = nlohmann::json::object();
    for (const auto& [v, s] : report.slopes) {
      if (s.valid)
        doc["slopes"][v] = {{"slope", s.slope}, {"ci_lo", s.ci_lo}, {"ci_hi", s.ci_hi}};
      else
        doc["slopes"][v] = {{"note", s.note}};
    }
    out << doc.dump(2) << '\n';
  }
  if (!out) throw IoError("short write to '" + path + "'");
  out.close();
  write_plot_script(path, format);
}

}  // namespace slab
