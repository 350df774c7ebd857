#include "slab/verify.hpp"

#include <functional>
#include <random>
#include <sstream>

#include "slab/attention.hpp"
#include "slab/model.hpp"
#include "slab/normalization.hpp"

namespace slab {

namespace {

template <typename T>
double lemma_max_err(int instances, uint64_t seed, double eta_perturb) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> cdist(1, 8), rdist(1, 6);
  double max_err = 0;
  for (int i = 0; i < instances; ++i) {
    int c = cdist(rng), rows = rdist(rng);
    RepBNParams<T> p;
    p.bn.alpha = Tensor<T>::randn({c}, rng);
    p.bn.beta = Tensor<T>::randn({c}, rng);
    p.bn.running_mean = Tensor<T>::randn({c}, rng);
    p.bn.running_var = Tensor<T>::randn({c}, rng);
    for (auto& v : p.bn.running_var.mutable_value()) v = std::abs(v);
    p.eta = Tensor<T>::randn({c}, rng);
    auto x = Tensor<T>::randn({rows, c}, rng, T(2));

    auto lhs = repbn(x, p, Mode::eval);
    RepBNParams<T> p_reparam_side = p;
    if (eta_perturb != 0.0) {
      p_reparam_side.eta = p.eta.detach();
      for (auto& v : p_reparam_side.eta.mutable_value()) v += T(eta_perturb);
    }
    BNParams<T> folded = reparam_repbn_to_bn(p_reparam_side);
    auto rhs = batchnorm(x, folded, Mode::eval);
    for (size_t j = 0; j < lhs.size(); ++j)
      max_err = std::max(max_err, double(std::abs(lhs.data()[j] - rhs.data()[j])));
  }
  return max_err;
}

template <typename T>
double fusion_max_err(uint64_t seed) {
  ModelConfig cfg;
  cfg.depth = 2;
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.norm_kind = NormKind::prepbn;
  cfg.attn_kind = AttnKind::sla;
  cfg.image_size = 4;
  cfg.patch_size = 2;
  cfg.num_classes = 3;
  cfg.prepbn_total_steps = 100;
  std::mt19937_64 rng(seed);
  auto m = Model<T>::build(cfg, rng);
  // Non-trivial norm parameters and statistics, fully transitioned schedule.
  for (auto& nt : m.named_tensors()) {
    auto& v = nt.tensor->mutable_value();
    if (nt.name.find("bn.alpha") != std::string::npos ||
        nt.name.find("ln.scale") != std::string::npos) {
      std::normal_distribution<double> g{1.0, 0.2};
      for (auto& e : v) e = T(g(rng));
    } else if (nt.name.find("bn.beta") != std::string::npos ||
               nt.name.find("eta") != std::string::npos ||
               nt.name.find("ln.shift") != std::string::npos ||
               nt.name.find("running_mean") != std::string::npos) {
      std::normal_distribution<double> g{0.0, 0.5};
      for (auto& e : v) e = T(g(rng));
    } else if (nt.name.find("running_var") != std::string::npos) {
      std::normal_distribution<double> g{0.0, 1.0};
      for (auto& e : v) e = T(std::abs(g(rng)) + 0.1);
    }
  }
  for (auto& b : m.blocks)
    for (auto* n : {&b.norm1, &b.norm2}) n->pre.current_step = n->pre.total_steps;

  int width = cfg.in_channels * cfg.image_size * cfg.image_size;
  std::vector<Tensor<T>> batches;
  for (int i = 0; i < 100; ++i) batches.push_back(Tensor<T>::randn({4, width}, rng));
  std::vector<std::vector<T>> before;
  for (auto& b : batches) before.push_back(model_forward_eval(m, b).value());

  if (fuse_model(m) != FuseOutcome::fused) throw Error("fusion verify: model was already fused");
  double max_err = 0;
  for (size_t i = 0; i < batches.size(); ++i) {
    auto after = model_forward_eval(m, batches[i]);
    for (size_t j = 0; j < after.size(); ++j)
      max_err = std::max(max_err, double(std::abs(after.data()[j] - before[i][j])));
  }
  return max_err;
}

using D = double;
using TD = Tensor<double>;

struct OpCheck {
  std::string name;
  std::function<GradCheckResult(std::mt19937_64&)> run;
};

TD probe_weights(const Shape& s, std::mt19937_64& rng) {
  return TD::randn(s, rng);
}

// Weighted-sum loss so every output coordinate matters.
TD weighted(const TD& out, const TD& w) { return sum(hadamard(out, w)); }

GradCheckResult accumulate(GradCheckResult a, GradCheckResult b) {
  return {std::max(a.max_rel_err, b.max_rel_err), a.probes + b.probes};
}

std::vector<OpCheck> op_checks() {
  std::vector<OpCheck> checks;
  auto add_check = [&](const std::string& name, auto fn) {
    checks.push_back({name, [fn](std::mt19937_64& rng) {
                        GradCheckResult total{};
                        while (total.probes < 120) total = accumulate(total, fn(rng));
                        return total;
                      }});
  };

  add_check("add", [](std::mt19937_64& rng) {
    auto a = TD::randn({3, 4}, rng), b = TD::randn({3, 4}, rng);
    auto w = probe_weights({3, 4}, rng);
    return gradcheck([&] { return weighted(add(a, b), w); }, {&a, &b});
  });
  add_check("sub", [](std::mt19937_64& rng) {
    auto a = TD::randn({3, 4}, rng), b = TD::randn({3, 4}, rng);
    auto w = probe_weights({3, 4}, rng);
    return gradcheck([&] { return weighted(sub(a, b), w); }, {&a, &b});
  });
  add_check("hadamard", [](std::mt19937_64& rng) {
    auto a = TD::randn({3, 4}, rng), b = TD::randn({3, 4}, rng);
    auto w = probe_weights({3, 4}, rng);
    return gradcheck([&] { return weighted(hadamard(a, b), w); }, {&a, &b});
  });
  add_check("scale", [](std::mt19937_64& rng) {
    auto a = TD::randn({4, 5}, rng);
    auto w = probe_weights({4, 5}, rng);
    return gradcheck([&] { return weighted(scale(a, 1.7), w); }, {&a});
  });
  add_check("relu", [](std::mt19937_64& rng) {
    auto a = TD::randn({4, 5}, rng);
    // keep probes away from the kink at 0
    for (auto& v : a.mutable_value()) v = (v >= 0 ? 1 : -1) * (std::abs(v) + 0.2);
    auto w = probe_weights({4, 5}, rng);
    return gradcheck([&] { return weighted(relu(a), w); }, {&a});
  });
  add_check("gelu", [](std::mt19937_64& rng) {
    auto a = TD::randn({4, 5}, rng);
    auto w = probe_weights({4, 5}, rng);
    return gradcheck([&] { return weighted(gelu(a), w); }, {&a});
  });
  add_check("rsqrt_eps", [](std::mt19937_64& rng) {
    auto a = TD::rand_uniform({8}, rng, 0.2, 3.0);
    auto w = probe_weights({8}, rng);
    return gradcheck([&] { return weighted(rsqrt_eps(a, 1e-5), w); }, {&a});
  });
  add_check("reshape", [](std::mt19937_64& rng) {
    auto a = TD::randn({3, 4}, rng);
    auto w = probe_weights({12}, rng);
    return gradcheck([&] { return weighted(reshape(a, {12}), w); }, {&a});
  });
  add_check("transpose2d", [](std::mt19937_64& rng) {
    auto a = TD::randn({3, 5}, rng);
    auto w = probe_weights({5, 3}, rng);
    return gradcheck([&] { return weighted(transpose2d(a), w); }, {&a});
  });
  add_check("matmul", [](std::mt19937_64& rng) {
    auto a = TD::randn({3, 4}, rng), b = TD::randn({4, 5}, rng);
    auto w = probe_weights({3, 5}, rng);
    return gradcheck([&] { return weighted(matmul(a, b), w); }, {&a, &b});
  });
  add_check("sum", [](std::mt19937_64& rng) {
    auto a = TD::randn({4, 5}, rng);
    return gradcheck([&] { return sum(a); }, {&a});
  });
  add_check("sum_axis0", [](std::mt19937_64& rng) {
    auto a = TD::randn({5, 3}, rng);
    auto w = probe_weights({3}, rng);
    return gradcheck([&] { return weighted(sum_axis0(a), w); }, {&a});
  });
  add_check("mean_pool_rows", [](std::mt19937_64& rng) {
    auto a = TD::randn({6, 4}, rng);
    auto w = probe_weights({2, 4}, rng);
    return gradcheck([&] { return weighted(mean_pool_rows(a, 3), w); }, {&a});
  });
  add_check("reduce_moments.mean", [](std::mt19937_64& rng) {
    auto a = TD::randn({5, 3}, rng);
    auto w = probe_weights({3}, rng);
    return gradcheck([&] { return weighted(reduce_moments(a, {0}).first, w); }, {&a});
  });
  add_check("reduce_moments.var", [](std::mt19937_64& rng) {
    auto a = TD::randn({5, 3}, rng);
    auto w = probe_weights({3}, rng);
    return gradcheck([&] { return weighted(reduce_moments(a, {0}).second, w); }, {&a});
  });
  add_check("add_rowvec", [](std::mt19937_64& rng) {
    auto a = TD::randn({4, 3}, rng), v = TD::randn({3}, rng);
    auto w = probe_weights({4, 3}, rng);
    return gradcheck([&] { return weighted(add_rowvec(a, v), w); }, {&a, &v});
  });
  add_check("sub_rowvec", [](std::mt19937_64& rng) {
    auto a = TD::randn({4, 3}, rng), v = TD::randn({3}, rng);
    auto w = probe_weights({4, 3}, rng);
    return gradcheck([&] { return weighted(sub_rowvec(a, v), w); }, {&a, &v});
  });
  add_check("mul_rowvec", [](std::mt19937_64& rng) {
    auto a = TD::randn({4, 3}, rng), v = TD::randn({3}, rng);
    auto w = probe_weights({4, 3}, rng);
    return gradcheck([&] { return weighted(mul_rowvec(a, v), w); }, {&a, &v});
  });
  add_check("div_colvec_eps", [](std::mt19937_64& rng) {
    auto a = TD::randn({4, 3}, rng);
    auto den = TD::rand_uniform({4}, rng, 0.3, 2.0);
    auto w = probe_weights({4, 3}, rng);
    return gradcheck([&] { return weighted(div_colvec_eps(a, den, 1e-6), w); }, {&a, &den});
  });
  add_check("scale_rowblocks", [](std::mt19937_64& rng) {
    auto a = TD::randn({6, 3}, rng);
    auto w = probe_weights({6, 3}, rng);
    return gradcheck(
        [&] { return weighted(scale_rowblocks(a, std::vector<double>{2.0, 0.0, 1.0}, 2), w); },
        {&a});
  });
  add_check("slice_concat_rows", [](std::mt19937_64& rng) {
    auto a = TD::randn({6, 3}, rng);
    auto w = probe_weights({6, 3}, rng);
    return gradcheck(
        [&] {
          auto top = slice_rows(a, 0, 2);
          auto rest = slice_rows(a, 2, 6);
          return weighted(concat_rows({rest, top}), w);
        },
        {&a});
  });
  add_check("slice_concat_cols", [](std::mt19937_64& rng) {
    auto a = TD::randn({4, 6}, rng);
    auto w = probe_weights({4, 6}, rng);
    return gradcheck(
        [&] {
          auto left = slice_cols(a, 0, 2);
          auto right = slice_cols(a, 2, 6);
          return weighted(concat_cols({right, left}), w);
        },
        {&a});
  });
  add_check("gather", [](std::mt19937_64& rng) {
    auto a = TD::randn({3, 4}, rng);
    auto idx = std::make_shared<std::vector<size_t>>(std::vector<size_t>{0, 5, 5, 11, 3, 7});
    auto w = probe_weights({6}, rng);
    return gradcheck([&] { return weighted(gather(a, idx, {6}), w); }, {&a});
  });
  add_check("softmax_lastdim", [](std::mt19937_64& rng) {
    auto a = TD::randn({4, 5}, rng);
    auto w = probe_weights({4, 5}, rng);
    return gradcheck([&] { return weighted(softmax_lastdim(a), w); }, {&a});
  });
  add_check("log_softmax_lastdim", [](std::mt19937_64& rng) {
    auto a = TD::randn({4, 5}, rng);
    auto w = probe_weights({4, 5}, rng);
    return gradcheck([&] { return weighted(log_softmax_lastdim(a), w); }, {&a});
  });
  add_check("depthwise_conv2d", [](std::mt19937_64& rng) {
    auto x = TD::randn({2, 4, 4}, rng);
    auto k = TD::randn({2, 3, 3}, rng);
    auto w = probe_weights({2, 4, 4}, rng);
    return gradcheck([&] { return weighted(depthwise_conv2d(x, k), w); }, {&x, &k});
  });
  add_check("depthwise_conv2d_tokens", [](std::mt19937_64& rng) {
    auto v = TD::randn({12, 3}, rng);
    auto k = TD::randn({3, 3, 3}, rng);
    auto w = probe_weights({12, 3}, rng);
    return gradcheck([&] { return weighted(depthwise_conv2d_tokens(v, k, 3, 4), w); }, {&v, &k});
  });
  add_check("layernorm", [](std::mt19937_64& rng) {
    auto x = TD::randn({4, 5}, rng);
    LNParams<double> p{TD::randn({5}, rng, 0.5, 1.0), TD::randn({5}, rng), 1e-5};
    auto w = probe_weights({4, 5}, rng);
    return gradcheck([&] { return weighted(layernorm(x, p), w); }, {&x, &p.scale, &p.shift});
  });
  add_check("batchnorm.train", [](std::mt19937_64& rng) {
    auto x = TD::randn({6, 3}, rng);
    BNParams<double> p = BNParams<double>::identity(3);
    p.alpha = TD::randn({3}, rng, 0.5, 1.0);
    p.beta = TD::randn({3}, rng);
    auto w = probe_weights({6, 3}, rng);
    return gradcheck([&] { return weighted(batchnorm(x, p, Mode::train), w); },
                     {&x, &p.alpha, &p.beta});
  });
  add_check("repbn.train", [](std::mt19937_64& rng) {
    auto x = TD::randn({6, 3}, rng);
    RepBNParams<double> p = RepBNParams<double>::identity(3);
    p.bn.alpha = TD::randn({3}, rng, 0.5, 1.0);
    p.bn.beta = TD::randn({3}, rng);
    p.eta = TD::randn({3}, rng, 0.5);
    auto w = probe_weights({6, 3}, rng);
    return gradcheck([&] { return weighted(repbn(x, p, Mode::train), w); },
                     {&x, &p.bn.alpha, &p.bn.beta, &p.eta});
  });
  add_check("prepbn.blend", [](std::mt19937_64& rng) {
    auto x = TD::randn({6, 3}, rng);
    PRepBNState<double> st;
    st.ln = LNParams<double>::identity(3);
    st.ln.scale = TD::randn({3}, rng, 0.3, 1.0);
    st.repbn = RepBNParams<double>::identity(3);
    st.repbn.eta = TD::randn({3}, rng, 0.5);
    st.total_steps = 100;
    st.current_step = 50;  // gamma = 0.5: both branches active
    auto w = probe_weights({6, 3}, rng);
    return gradcheck([&] { return weighted(prepbn(x, st, Mode::train), w); },
                     {&x, &st.ln.scale, &st.ln.shift, &st.repbn.bn.alpha, &st.repbn.eta});
  });
  add_check("softmax_attention", [](std::mt19937_64& rng) {
    auto x = TD::randn({4, 4}, rng);
    auto p = AttentionParams<double>::init(4, 2, 3, rng, 0.4, 0.3);
    auto w = probe_weights({4, 4}, rng);
    return gradcheck([&] { return weighted(softmax_attention(x, p), w); },
                     {&x, &p.w_q, &p.w_k, &p.w_v, &p.w_o, &p.b_q, &p.b_o});
  });
  add_check("sla_attention", [](std::mt19937_64& rng) {
    auto x = TD::randn({4, 4}, rng);
    auto p = AttentionParams<double>::init(4, 2, 3, rng, 0.4, 0.3);
    auto w = probe_weights({4, 4}, rng);
    TokenGrid grid{2, 2};
    return gradcheck([&] { return weighted(sla_attention(x, p, grid), w); },
                     {&x, &p.w_q, &p.w_k, &p.w_v, &p.w_o, &p.dwc_kernel, &p.b_v});
  });
  add_check("block_forward", [](std::mt19937_64& rng) {
    ModelConfig cfg;
    cfg.depth = 1;
    cfg.dim = 4;
    cfg.heads = 2;
    cfg.norm_kind = NormKind::prepbn;
    cfg.attn_kind = AttnKind::sla;
    cfg.image_size = 4;
    cfg.patch_size = 2;
    cfg.prepbn_total_steps = 2;
    auto m = Model<double>::build(cfg, rng);
    auto& b = m.blocks[0];
    b.norm1.pre.current_step = 1;  // mid-transition
    b.norm2.pre.current_step = 1;
    auto x = TD::randn({4, 4}, rng);
    auto w = probe_weights({4, 4}, rng);
    return gradcheck(
        [&] {
          return weighted(block_forward(x, b, cfg.attn_kind, cfg.grid(), Mode::train), w);
        },
        {&x, &b.attn.w_q, &b.fc1_w, &b.fc2_b, &b.norm1.pre.repbn.eta});
  });
  return checks;
}

}  // namespace

SuiteResult verify_lemma(const VerifyOptions& opts) {
  SuiteResult r;
  r.name = "lemma";
  r.cases = 1000;
  double err64 = lemma_max_err<double>(r.cases, opts.seed, opts.eta_perturb);
  double err32 = lemma_max_err<float>(r.cases, opts.seed + 1, opts.eta_perturb);
  r.max_err = std::max(err64, err32);
  r.passed = err64 <= 1e-12 && err32 <= 1e-6;
  std::ostringstream os;
  os << "max |RepBN - reparam BN|: f64 " << err64 << " (tol 1e-12), f32 " << err32
     << " (tol 1e-6)";
  r.detail = os.str();
  return r;
}

SuiteResult verify_sla(const VerifyOptions& opts) {
  SuiteResult r;
  r.name = "sla";
  r.cases = 200;
  std::mt19937_64 rng(opts.seed);
  std::uniform_int_distribution<int> ndist(2, 64), hpick(0, 2), ddist(1, 8);
  const int head_choices[3] = {1, 2, 4};
  double max_err = 0;
  for (int i = 0; i < r.cases; ++i) {
    int n = ndist(rng), h = head_choices[hpick(rng)];
    int d = std::min(ddist(rng), 32 / h);
    int c = h * d;
    auto x = Tensor<float>::randn({n, c}, rng, 0.7f);
    auto p = AttentionParams<float>::init(c, h, 3, rng, 0.4f, 0.3f);
    TokenGrid grid{1, n};
    NoGradGuard ng;
    auto fast = sla_attention(x, p, grid);
    auto oracle = sla_naive_oracle(x, p, grid);
    AttentionWorkspace<float> ws;
    std::vector<float> out(size_t(n) * c);
    sla_attention_eval(x.data(), n, p, grid, ws, out.data());
    for (size_t j = 0; j < fast.size(); ++j) {
      max_err = std::max(max_err, double(std::abs(fast.data()[j] - oracle.data()[j])));
      max_err = std::max(max_err, double(std::abs(out[j] - oracle.data()[j])));
    }
  }
  r.max_err = max_err;
  r.passed = max_err <= 1e-6;
  std::ostringstream os;
  os << "max |decoupled - naive O(N^2)|: " << max_err << " (tol 1e-6, f32)";
  r.detail = os.str();
  return r;
}

SuiteResult verify_fusion(const VerifyOptions& opts) {
  SuiteResult r;
  r.name = "fusion";
  r.cases = 100;
  double err32 = fusion_max_err<float>(opts.seed);
  double err64 = fusion_max_err<double>(opts.seed + 1);
  r.max_err = std::max(err32, err64);
  r.passed = err32 <= 1e-4 && err64 <= 1e-10;
  std::ostringstream os;
  os << "max |fused - unfused| logits: f32 " << err32 << " (tol 1e-4), f64 " << err64
     << " (tol 1e-10)";
  r.detail = os.str();
  return r;
}

SuiteResult verify_gradcheck(const VerifyOptions& opts) {
  SuiteResult r;
  r.name = "gradcheck";
  r.passed = true;
  std::string worst;
  for (auto& check : op_checks()) {
    std::mt19937_64 rng(opts.seed ^ std::hash<std::string>{}(check.name));
    GradCheckResult res = check.run(rng);
    ++r.cases;
    if (res.max_rel_err > r.max_err) {
      r.max_err = res.max_rel_err;
      worst = check.name;
    }
    if (res.max_rel_err > 1e-4 || res.probes < 100) {
      r.passed = false;
      r.detail += (r.detail.empty() ? "" : "; ") + check.name + " err " +
                  std::to_string(res.max_rel_err) + " probes " + std::to_string(res.probes);
    }
  }
  if (r.passed) {
    std::ostringstream os;
    os << r.cases << " ops, worst rel err " << r.max_err << " (" << worst << ", tol 1e-4)";
    r.detail = os.str();
  }
  return r;
}

std::vector<SuiteResult> verify_suites(const std::string& which, const VerifyOptions& opts) {
  std::vector<SuiteResult> out;
  bool all = which == "all";
  if (all || which == "lemma") out.push_back(verify_lemma(opts));
  if (all || which == "sla") out.push_back(verify_sla(opts));
  if (all || which == "fusion") out.push_back(verify_fusion(opts));
  if (all || which == "gradcheck") out.push_back(verify_gradcheck(opts));
  if (out.empty())
    throw ConfigError("verify: unknown suite '" + which + "' (all|lemma|sla|fusion|gradcheck)");
  return out;
}

}  // namespace slab
