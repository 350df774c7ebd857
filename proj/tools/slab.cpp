// slab: train, fuse, benchmark and verify the progressive-BatchNorm /
// simplified-linear-attention toy stack.
//
// Exit codes: 0 success, 1 verification or contract failure, 2 usage/config
// error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include <CLI11.hpp>

#include "slab/bench.hpp"
#include "slab/checkpoint.hpp"
#include "slab/config.hpp"
#include "slab/training.hpp"
#include "slab/verify.hpp"

namespace fs = std::filesystem;
using namespace slab;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

void write_metrics(const std::string& path, const TrainedArtifacts& art) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  for (const auto& r : art.metrics) {
    nlohmann::json j = {{"step", r.step}, {"epoch", r.epoch}, {"lr", r.lr},
                        {"gamma", r.gamma}, {"loss", r.loss}, {"acc", r.acc}};
    out << j.dump() << '\n';
  }
}

void write_gamma_trace(const std::string& path, const TrainedArtifacts& art) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "step,gamma\n";
  for (auto& [step, g] : art.gamma_trace) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", g);
    out << step << ',' << buf << '\n';
  }
}

int cmd_train(const std::string& config_path, const std::string& out_dir, long seed_override) {
  CliConfig cfg = parse_config_file(config_path);
  if (seed_override >= 0) cfg.train.seed = uint64_t(seed_override);
  fs::create_directories(out_dir);

  Dataset data = load_dataset(cfg.data);
  std::mt19937_64 rng(cfg.train.seed);
  cfg.model.droppath_rate = cfg.train.droppath_rate;
  auto model = Model<float>::build(cfg.model, rng);

  std::ofstream snap(fs::path(out_dir) / "config.ini");
  snap << config_snapshot(cfg);
  snap.close();

  try {
    TrainedArtifacts art = train(model, data, cfg.train);
    write_metrics((fs::path(out_dir) / "metrics.jsonl").string(), art);
    write_gamma_trace((fs::path(out_dir) / "gamma_trace.csv").string(), art);
    save_checkpoint(model, (fs::path(out_dir) / "checkpoint.ckpt").string());
    std::cout << "trained " << cfg.train.epochs << " epochs, final test accuracy "
              << art.final_test_accuracy << ", gamma " << model.gamma_now()
              << (art.recalibrated ? ", statistics recalibrated" : "") << "\n"
              << "artifacts in " << out_dir << "\n";
    return kExitOk;
  } catch (const DivergedLoss& e) {
    save_checkpoint(model, (fs::path(out_dir) / "last_good.ckpt").string());
    std::cerr << "error: " << e.what() << "\nlast-good checkpoint written to "
              << (fs::path(out_dir) / "last_good.ckpt") << "\n";
    return kExitFailure;
  }
}

template <typename T>
int fuse_and_report(const std::string& in_path, const std::string& out_path) {
  auto model = load_checkpoint<T>(in_path);
  if (model.fused) {
    std::cout << "checkpoint is already fused; nothing to do\n";
    if (out_path != in_path) fs::copy_file(in_path, out_path, fs::copy_options::overwrite_existing);
    return kExitOk;
  }
  // Probe batch captured before fusion.
  std::mt19937_64 rng(7);
  int width = model.cfg.in_channels * model.cfg.image_size * model.cfg.image_size;
  auto probe = Tensor<T>::randn({8, width}, rng);
  auto before = model_forward_eval(model, probe);
  fuse_model(model);
  auto after = model_forward_eval(model, probe);
  double max_diff = 0;
  for (size_t i = 0; i < after.size(); ++i)
    max_diff = std::max(max_diff, double(std::abs(after.data()[i] - before.data()[i])));
  save_checkpoint(model, out_path);
  std::cout << "fused checkpoint written to " << out_path << "\n"
            << "max |logit difference| on probe batch: " << max_diff << "\n";
  return kExitOk;
}

int cmd_fuse(const std::string& in_path, const std::string& out_path) {
  std::string prec = checkpoint_precision(in_path);
  return prec == "f64" ? fuse_and_report<double>(in_path, out_path)
                       : fuse_and_report<float>(in_path, out_path);
}

int cmd_bench(BenchSpec spec, const std::string& format, const std::string& out_path) {
  BenchReport report = run_sweep(spec);
  emit_report(report, format, out_path);
  std::cout << "target " << to_string(report.spec.target) << ", " << report.points.size()
            << " points -> " << out_path << "\n";
  for (auto& [variant, fit] : report.slopes) {
    if (fit.valid)
      std::cout << "  " << variant << ": slope " << fit.slope << "  ci [" << fit.ci_lo << ", "
                << fit.ci_hi << "]\n";
    else
      std::cout << "  " << variant << ": " << fit.note << "\n";
  }
  return kExitOk;
}

int cmd_verify(const std::string& suite, uint64_t seed, double perturb_eta) {
  VerifyOptions opts;
  opts.seed = seed;
  opts.eta_perturb = perturb_eta;
  auto results = verify_suites(suite, opts);
  bool all_pass = true;
  std::cout << "suite      status  cases  max_err       detail\n";
  for (const auto& r : results) {
    all_pass = all_pass && r.passed;
    char line[128];
    std::snprintf(line, sizeof line, "%-10s %-7s %-6d %-13.3e ", r.name.c_str(),
                  r.passed ? "pass" : "FAIL", r.cases, r.max_err);
    std::cout << line << r.detail << "\n";
  }
  return all_pass ? kExitOk : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SLAB toy stack: progressive re-parameterized BatchNorm + simplified linear attention"};
  app.require_subcommand(1);

  auto* train_cmd = app.add_subcommand("train", "train a toy model from a config file");
  std::string train_config, train_out = "run";
  long train_seed = -1;
  train_cmd->add_option("--config", train_config, "config file path")->required();
  train_cmd->add_option("--out", train_out, "output directory");
  train_cmd->add_option("--seed", train_seed, "seed override");

  auto* fuse_cmd = app.add_subcommand("fuse", "re-parameterize and fold a trained checkpoint");
  std::string fuse_in, fuse_out;
  fuse_cmd->add_option("--checkpoint", fuse_in, "input checkpoint")->required();
  fuse_cmd->add_option("--out", fuse_out, "output checkpoint")->required();

  auto* bench_cmd = app.add_subcommand("bench", "latency sweeps and scaling exponents");
  std::string bench_target = "attention", bench_variants, bench_seq, bench_format = "csv";
  std::string bench_out = "bench.csv", bench_config;
  BenchSpec flag_spec;
  bench_cmd->add_option("--config", bench_config, "config file providing [bench] defaults");
  bench_cmd->add_option("--target", bench_target, "attention|normalization|full-block");
  bench_cmd->add_option("--variants", bench_variants, "comma-separated variant list");
  bench_cmd->add_option("--seq-lens", bench_seq, "comma-separated token counts");
  bench_cmd->add_option("--dim", flag_spec.dim, "feature dimension");
  bench_cmd->add_option("--heads", flag_spec.heads, "head count");
  bench_cmd->add_option("--mlp-ratio", flag_spec.mlp_ratio, "MLP expansion ratio");
  bench_cmd->add_option("--warmup", flag_spec.warmup_iters, "warmup iterations");
  bench_cmd->add_option("--iters", flag_spec.timed_iters, "timed iterations (>= 30)");
  bench_cmd->add_option("--reps", flag_spec.repetitions, "repetitions");
  bench_cmd->add_option("--threads", flag_spec.threads, "threads inside the timed region");
  bench_cmd->add_option("--seed", flag_spec.seed, "seed");
  bench_cmd->add_option("--format", bench_format, "csv|json");
  bench_cmd->add_option("--out", bench_out, "report path");

  auto* verify_cmd = app.add_subcommand("verify", "run verification suites");
  std::string suite = "all";
  uint64_t verify_seed = 2024;
  double perturb_eta = 0.0;
  verify_cmd->add_option("--suite", suite, "all|lemma|sla|fusion|gradcheck");
  verify_cmd->add_option("--seed", verify_seed, "seed");
  verify_cmd->add_option("--perturb-eta", perturb_eta, "debug fault-injection offset")
      ->group("");  // hidden

  try {
    app.parse(argc, argv);
    if (*train_cmd) return cmd_train(train_config, train_out, train_seed);
    if (*fuse_cmd) return cmd_fuse(fuse_in, fuse_out);
    if (*bench_cmd) {
      BenchSpec spec = flag_spec;
      if (!bench_config.empty()) {
        CliConfig cfg = parse_config_file(bench_config);
        spec = cfg.bench;
        // Flags override config values the user passed explicitly.
        if (bench_cmd->count("--dim")) spec.dim = flag_spec.dim;
        if (bench_cmd->count("--heads")) spec.heads = flag_spec.heads;
        if (bench_cmd->count("--mlp-ratio")) spec.mlp_ratio = flag_spec.mlp_ratio;
        if (bench_cmd->count("--warmup")) spec.warmup_iters = flag_spec.warmup_iters;
        if (bench_cmd->count("--iters")) spec.timed_iters = flag_spec.timed_iters;
        if (bench_cmd->count("--reps")) spec.repetitions = flag_spec.repetitions;
        if (bench_cmd->count("--threads")) spec.threads = flag_spec.threads;
        if (bench_cmd->count("--seed")) spec.seed = flag_spec.seed;
      }
      if (bench_cmd->count("--target") || bench_config.empty())
        spec.target = parse_bench_target(bench_target);
      if (!bench_variants.empty()) {
        spec.variants.clear();
        std::stringstream ss(bench_variants);
        std::string cell;
        while (std::getline(ss, cell, ',')) spec.variants.push_back(cell);
      }
      if (!bench_seq.empty()) {
        spec.seq_lens.clear();
        std::stringstream ss(bench_seq);
        std::string cell;
        while (std::getline(ss, cell, ',')) spec.seq_lens.push_back(std::stoi(cell));
      }
      return cmd_bench(spec, bench_format, bench_out);
    }
    if (*verify_cmd) return cmd_verify(suite, verify_seed, perturb_eta);
    return kExitUsage;
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}
