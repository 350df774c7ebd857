#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "slab/attention.hpp"
#include "slab/normalization.hpp"
#include "slab/tensor.hpp"

// Isotropic pre-norm transformer:
//   x <- x + DropPath(Attn(Norm(x)))
//   x <- x + DropPath(MLP(Norm(x)))
// stacked `depth` times over a patch-embedded token grid, mean-pooled into a
// linear classifier head. No class token and no positional embedding: the
// token grid stays rectangular for the depth-wise convolution, and the stack
// is permutation-equivariant until pooling (which the tests rely on).

namespace slab {

enum class NormKind { layernorm, prepbn, batchnorm };
enum class AttnKind { softmax, sla };

inline const char* to_string(NormKind k) {
  switch (k) {
    case NormKind::layernorm: return "layernorm";
    case NormKind::prepbn: return "prepbn";
    case NormKind::batchnorm: return "batchnorm";
  }
  return "layernorm";
}

inline const char* to_string(AttnKind k) {
  return k == AttnKind::softmax ? "softmax" : "sla";
}

inline NormKind parse_norm_kind(const std::string& s) {
  if (s == "layernorm") return NormKind::layernorm;
  if (s == "prepbn") return NormKind::prepbn;
  if (s == "batchnorm") return NormKind::batchnorm;
  throw ConfigError("unknown norm kind '" + s + "' (layernorm|prepbn|batchnorm)");
}

inline AttnKind parse_attn_kind(const std::string& s) {
  if (s == "softmax") return AttnKind::softmax;
  if (s == "sla") return AttnKind::sla;
  throw ConfigError("unknown attention kind '" + s + "' (softmax|sla)");
}

struct ModelConfig {
  int depth = 4;
  int dim = 64;
  int heads = 4;
  double mlp_ratio = 4.0;
  NormKind norm_kind = NormKind::prepbn;
  AttnKind attn_kind = AttnKind::sla;
  double droppath_rate = 0.0;
  int image_size = 8;
  int patch_size = 2;
  int in_channels = 1;
  int num_classes = 4;
  int dwc_kernel_size = 3;
  long prepbn_total_steps = 1;
  DecaySchedule schedule = DecaySchedule::linear;

  TokenGrid grid() const {
    int g = image_size / patch_size;
    return {g, g};
  }
  int tokens() const { return grid().tokens(); }
  int patch_dim() const { return in_channels * patch_size * patch_size; }
  int mlp_hidden() const { return int(mlp_ratio * dim); }

  void validate() const {
    if (depth < 1) throw ConfigError("model: depth must be >= 1");
    if (dim < 1 || heads < 1 || dim % heads != 0)
      throw ConfigError("model: dim must be divisible by heads");
    if (droppath_rate < 0.0 || droppath_rate >= 1.0)
      throw ConfigError("model: droppath_rate must be in [0,1)");
    if (patch_size < 1 || image_size % patch_size != 0)
      throw ConfigError("model: image_size must be divisible by patch_size");
    if (dwc_kernel_size % 2 == 0) throw ConfigError("model: dwc kernel size must be odd");
    if (prepbn_total_steps < 1) throw ConfigError("model: prepbn_total_steps must be >= 1");
    if (mlp_hidden() < 1) throw ConfigError("model: mlp_ratio too small");
  }
};

// Per-sample Bernoulli residual-branch drop with inverse-keep rescaling.
// `x` holds `samples` consecutive row blocks; each block is kept with
// probability 1-rate and scaled by 1/(1-rate). Identity in eval/recalib.
template <typename T, typename Rng>
Tensor<T> droppath(const Tensor<T>& x, double rate, Mode mode, Rng& rng, int samples = 1) {
  if (rate < 0.0 || rate >= 1.0)
    throw ConfigError("droppath: rate must be in [0,1), got " + std::to_string(rate));
  if (rate == 0.0 || mode != Mode::train) return x;
  int rows_per_sample = x.dim(0) / samples;
  std::vector<T> factors(samples);
  std::uniform_real_distribution<double> u{0.0, 1.0};
  T keep_scale = T(1.0 / (1.0 - rate));
  for (int s = 0; s < samples; ++s) factors[s] = u(rng) < rate ? T(0) : keep_scale;
  return scale_rowblocks(x, std::move(factors), rows_per_sample);
}

template <typename T>
struct Norm {
  NormKind kind = NormKind::layernorm;
  bool fused = false;  // folded into the consumer linear; identity here
  LNParams<T> ln;
  PRepBNState<T> pre;
  BNParams<T> bn;

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    if (fused) return x;
    switch (kind) {
      case NormKind::layernorm: return layernorm(x, ln);
      case NormKind::prepbn: return prepbn(x, pre, mode);
      case NormKind::batchnorm: return batchnorm(x, bn, mode);
    }
    return x;
  }

  static Norm make(NormKind kind, int c, long total_steps, DecaySchedule sched) {
    Norm n;
    n.kind = kind;
    switch (kind) {
      case NormKind::layernorm:
        n.ln = LNParams<T>::identity(c);
        break;
      case NormKind::prepbn:
        n.pre.ln = LNParams<T>::identity(c);
        n.pre.repbn = RepBNParams<T>::identity(c);
        n.pre.total_steps = total_steps;
        n.pre.schedule = sched;
        break;
      case NormKind::batchnorm:
        n.bn = BNParams<T>::identity(c);
        break;
    }
    return n;
  }
};

template <typename T>
struct Block {
  Norm<T> norm1, norm2;
  AttentionParams<T> attn;
  Tensor<T> fc1_w, fc1_b, fc2_w, fc2_b;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T>* tensor;
  bool learnable;
};

template <typename T>
struct Model {
  ModelConfig cfg;
  bool fused = false;
  Tensor<T> patch_w, patch_b;
  std::vector<Block<T>> blocks;
  Tensor<T> head_w, head_b;

  // Patch-gather index tables keyed by batch size.
  mutable std::map<int, std::shared_ptr<std::vector<size_t>>> patch_index_;

  template <typename Rng>
  static Model build(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    T std_init = T(0.02);
    m.patch_w = Tensor<T>::randn({cfg.patch_dim(), cfg.dim}, rng, std_init);
    m.patch_b = Tensor<T>::zeros({cfg.dim});
    int hidden = cfg.mlp_hidden();
    for (int i = 0; i < cfg.depth; ++i) {
      Block<T> b;
      b.norm1 = Norm<T>::make(cfg.norm_kind, cfg.dim, cfg.prepbn_total_steps, cfg.schedule);
      b.norm2 = Norm<T>::make(cfg.norm_kind, cfg.dim, cfg.prepbn_total_steps, cfg.schedule);
      b.attn = AttentionParams<T>::init(cfg.dim, cfg.heads, cfg.dwc_kernel_size, rng, std_init,
                                        std_init);
      b.fc1_w = Tensor<T>::randn({cfg.dim, hidden}, rng, std_init);
      b.fc1_b = Tensor<T>::zeros({hidden});
      b.fc2_w = Tensor<T>::randn({hidden, cfg.dim}, rng, std_init);
      b.fc2_b = Tensor<T>::zeros({cfg.dim});
      m.blocks.push_back(std::move(b));
    }
    m.head_w = Tensor<T>::randn({cfg.dim, cfg.num_classes}, rng, std_init);
    m.head_b = Tensor<T>::zeros({cfg.num_classes});
    m.mark_learnable();
    return m;
  }

  static Model skeleton(const ModelConfig& cfg, bool fused_model) {
    std::mt19937_64 rng(0);
    Model m = build(cfg, rng);
    if (fused_model) {
      m.fused = true;
      for (auto& b : m.blocks) {
        b.norm1.fused = true;
        b.norm2.fused = true;
      }
    }
    for (auto& nt : m.named_tensors()) {
      auto& v = nt.tensor->mutable_value();
      std::fill(v.begin(), v.end(), T(0));
    }
    return m;
  }

  void mark_learnable() {
    for (auto& nt : named_tensors())
      nt.tensor->set_requires_grad(nt.learnable);
  }

  std::vector<NamedTensor<T>> named_tensors() {
    std::vector<NamedTensor<T>> out;
    auto addn = [&](const std::string& name, Tensor<T>& t, bool learnable) {
      out.push_back({name, &t, learnable});
    };
    addn("patch_embed.w", patch_w, true);
    addn("patch_embed.b", patch_b, true);
    for (size_t i = 0; i < blocks.size(); ++i) {
      std::string p = "blocks." + std::to_string(i) + ".";
      auto& b = blocks[i];
      auto add_norm = [&](const std::string& np, Norm<T>& n) {
        if (n.fused) return;
        switch (n.kind) {
          case NormKind::layernorm:
            addn(np + "ln.scale", n.ln.scale, true);
            addn(np + "ln.shift", n.ln.shift, true);
            break;
          case NormKind::prepbn:
            addn(np + "ln.scale", n.pre.ln.scale, true);
            addn(np + "ln.shift", n.pre.ln.shift, true);
            addn(np + "bn.alpha", n.pre.repbn.bn.alpha, true);
            addn(np + "bn.beta", n.pre.repbn.bn.beta, true);
            addn(np + "bn.running_mean", n.pre.repbn.bn.running_mean, false);
            addn(np + "bn.running_var", n.pre.repbn.bn.running_var, false);
            addn(np + "eta", n.pre.repbn.eta, true);
            break;
          case NormKind::batchnorm:
            addn(np + "bn.alpha", n.bn.alpha, true);
            addn(np + "bn.beta", n.bn.beta, true);
            addn(np + "bn.running_mean", n.bn.running_mean, false);
            addn(np + "bn.running_var", n.bn.running_var, false);
            break;
        }
      };
      add_norm(p + "norm1.", b.norm1);
      add_norm(p + "norm2.", b.norm2);
      addn(p + "attn.w_q", b.attn.w_q, true);
      addn(p + "attn.b_q", b.attn.b_q, true);
      addn(p + "attn.w_k", b.attn.w_k, true);
      addn(p + "attn.b_k", b.attn.b_k, true);
      addn(p + "attn.w_v", b.attn.w_v, true);
      addn(p + "attn.b_v", b.attn.b_v, true);
      addn(p + "attn.w_o", b.attn.w_o, true);
      addn(p + "attn.b_o", b.attn.b_o, true);
      addn(p + "attn.dwc_kernel", b.attn.dwc_kernel, true);
      addn(p + "mlp.fc1.w", b.fc1_w, true);
      addn(p + "mlp.fc1.b", b.fc1_b, true);
      addn(p + "mlp.fc2.w", b.fc2_w, true);
      addn(p + "mlp.fc2.b", b.fc2_b, true);
    }
    addn("head.w", head_w, true);
    addn("head.b", head_b, true);
    return out;
  }

  size_t param_count() {
    size_t n = 0;
    for (auto& nt : named_tensors()) n += nt.tensor->size();
    return n;
  }

  void on_optimizer_step() {
    for (auto& b : blocks) {
      if (b.norm1.kind == NormKind::prepbn && !b.norm1.fused) b.norm1.pre.on_optimizer_step();
      if (b.norm2.kind == NormKind::prepbn && !b.norm2.fused) b.norm2.pre.on_optimizer_step();
    }
  }

  // Blend weight of the first progressive norm; 0 when there is none.
  double gamma_now() const {
    for (const auto& b : blocks)
      if (b.norm1.kind == NormKind::prepbn && !b.norm1.fused) return gamma(b.norm1.pre);
    return 0.0;
  }

  bool has_prepbn() const {
    for (const auto& b : blocks)
      if ((b.norm1.kind == NormKind::prepbn || b.norm2.kind == NormKind::prepbn) &&
          !b.norm1.fused)
        return true;
    return false;
  }

  bool has_batch_stats() const {
    for (const auto& b : blocks)
      if (!b.norm1.fused &&
          (b.norm1.kind == NormKind::prepbn || b.norm1.kind == NormKind::batchnorm))
        return true;
    return false;
  }

  std::shared_ptr<const std::vector<size_t>> patch_indices(int batch) const {
    auto it = patch_index_.find(batch);
    if (it != patch_index_.end()) return it->second;
    int p = cfg.patch_size, ch = cfg.in_channels, hw = cfg.image_size;
    int g = hw / p;
    auto idx = std::make_shared<std::vector<size_t>>();
    idx->reserve(size_t(batch) * g * g * ch * p * p);
    for (int s = 0; s < batch; ++s) {
      size_t base = size_t(s) * ch * hw * hw;
      for (int gy = 0; gy < g; ++gy)
        for (int gx = 0; gx < g; ++gx)
          for (int c = 0; c < ch; ++c)
            for (int py = 0; py < p; ++py)
              for (int px = 0; px < p; ++px)
                idx->push_back(base + size_t(c) * hw * hw + size_t(gy * p + py) * hw +
                               size_t(gx * p + px));
    }
    patch_index_[batch] = idx;
    return idx;
  }
};

// ---------------------------------------------------------------------------
// forward passes

// One block over `batch` stacked samples of `tokens` rows each. Norms and the
// MLP act per token so they see the whole stack; attention is evaluated per
// sample so tokens never attend across samples.
template <typename T, typename Rng>
Tensor<T> block_forward_batch(const Tensor<T>& x, Block<T>& b, AttnKind attn_kind,
                              TokenGrid grid, int batch, Mode mode, double droppath_rate,
                              Rng& rng) {
  int tokens = grid.tokens();
  if (x.rank() != 2 || x.dim(0) != batch * tokens)
    throw ShapeMismatch("block_forward: " + shape_str(x.shape()) + " for batch " +
                        std::to_string(batch) + " x " + std::to_string(tokens) + " tokens");
  auto h1 = b.norm1.forward(x, mode);
  std::vector<Tensor<T>> per_sample;
  per_sample.reserve(batch);
  for (int s = 0; s < batch; ++s) {
    auto xs = batch == 1 ? h1 : slice_rows(h1, s * tokens, (s + 1) * tokens);
    per_sample.push_back(attn_kind == AttnKind::softmax ? softmax_attention(xs, b.attn)
                                                        : sla_attention(xs, b.attn, grid));
  }
  auto attn_out = batch == 1 ? per_sample[0] : concat_rows(per_sample);
  auto x2 = add(x, droppath(attn_out, droppath_rate, mode, rng, batch));

  auto h2 = b.norm2.forward(x2, mode);
  auto mlp = add_rowvec(matmul(gelu(add_rowvec(matmul(h2, b.fc1_w), b.fc1_b)), b.fc2_w), b.fc2_b);
  return add(x2, droppath(mlp, droppath_rate, mode, rng, batch));
}

// Single-sample block forward (the spec-level op).
template <typename T>
Tensor<T> block_forward(const Tensor<T>& x, Block<T>& b, AttnKind attn_kind, TokenGrid grid,
                        Mode mode, double droppath_rate = 0.0, uint64_t droppath_seed = 0) {
  std::mt19937_64 rng(droppath_seed);
  return block_forward_batch(x, b, attn_kind, grid, 1, mode, droppath_rate, rng);
}

// Token features before pooling: batch x (ch*H*W) images -> (batch*N) x C.
template <typename T, typename Rng>
Tensor<T> model_forward_features(Model<T>& m, const Tensor<T>& images, Mode mode, Rng& rng) {
  if (images.rank() != 2 || images.dim(1) != m.cfg.in_channels * m.cfg.image_size * m.cfg.image_size)
    throw ShapeMismatch("model_forward: images " + shape_str(images.shape()) + ", expected width " +
                        std::to_string(m.cfg.in_channels * m.cfg.image_size * m.cfg.image_size));
  int batch = images.dim(0);
  int tokens = m.cfg.tokens();
  auto patches = gather(images, m.patch_indices(batch),
                        {batch * tokens, m.cfg.patch_dim()});
  auto x = add_rowvec(matmul(patches, m.patch_w), m.patch_b);
  for (auto& b : m.blocks)
    x = block_forward_batch(x, b, m.cfg.attn_kind, m.cfg.grid(), batch, mode,
                            m.cfg.droppath_rate, rng);
  return x;
}

template <typename T, typename Rng>
Tensor<T> model_forward(Model<T>& m, const Tensor<T>& images, Mode mode, Rng& rng) {
  auto features = model_forward_features(m, images, mode, rng);
  auto pooled = mean_pool_rows(features, m.cfg.tokens());
  return add_rowvec(matmul(pooled, m.head_w), m.head_b);
}

template <typename T>
Tensor<T> model_forward_eval(Model<T>& m, const Tensor<T>& images) {
  NoGradGuard ng;
  std::mt19937_64 rng(0);
  return model_forward(m, images, Mode::eval, rng);
}

// ---------------------------------------------------------------------------
// FLOPs accounting (per-sample multiply-accumulate counts)

struct FlopsTable {
  uint64_t patch_embed = 0;
  uint64_t attn_proj = 0;   // QKV + output projection, all blocks
  uint64_t attn_core = 0;   // similarity + mixing terms, all blocks
  uint64_t attn_dwc = 0;    // depth-wise convolution terms, all blocks
  uint64_t mlp = 0;         // all blocks
  uint64_t head = 0;

  uint64_t attention_total() const { return attn_proj + attn_core + attn_dwc; }
  uint64_t total() const { return patch_embed + attention_total() + mlp + head; }

  std::vector<std::pair<std::string, uint64_t>> rows() const {
    return {{"patch_embed", patch_embed}, {"attn_proj", attn_proj}, {"attn_core", attn_core},
            {"attn_dwc", attn_dwc},       {"mlp", mlp},             {"head", head}};
  }
};

// Analytic counts. Softmax attention's core term is 2*N^2*C (scores + mixing);
// SLA's is 2*N*C^2/h + N*C (K^T V and Q(K^T V) plus the denominator dot), with
// the DWC adding N*C*k^2. Normalization layers perform no multiply-accumulate
// and contribute nothing, which is why the table is identical across norms.

inline uint64_t attention_proj_macs(uint64_t n, uint64_t c) { return 4 * n * c * c; }

inline uint64_t attention_core_macs(uint64_t n, uint64_t c, uint64_t heads, AttnKind kind) {
  if (kind == AttnKind::softmax) return 2 * n * n * c;
  uint64_t d = c / heads;
  return 2 * n * c * d + n * c;
}

inline uint64_t attention_dwc_macs(uint64_t n, uint64_t c, uint64_t ksize, AttnKind kind) {
  return kind == AttnKind::sla ? n * c * ksize * ksize : 0;
}

inline uint64_t mlp_macs(uint64_t n, uint64_t c, uint64_t hidden) { return 2 * n * c * hidden; }

inline FlopsTable count_flops(const ModelConfig& cfg, int depth_override = -1) {
  uint64_t n = uint64_t(cfg.tokens()), c = uint64_t(cfg.dim), h = uint64_t(cfg.heads);
  uint64_t k = uint64_t(cfg.dwc_kernel_size);
  uint64_t depth = depth_override >= 0 ? uint64_t(depth_override) : uint64_t(cfg.depth);
  FlopsTable f;
  f.patch_embed = n * uint64_t(cfg.patch_dim()) * c;
  f.attn_proj = depth * attention_proj_macs(n, c);
  f.attn_core = depth * attention_core_macs(n, c, h, cfg.attn_kind);
  f.attn_dwc = depth * attention_dwc_macs(n, c, k, cfg.attn_kind);
  f.mlp = depth * mlp_macs(n, c, uint64_t(cfg.mlp_hidden()));
  f.head = c * uint64_t(cfg.num_classes);
  return f;
}

// ---------------------------------------------------------------------------
// inference-time fusion

enum class FuseOutcome { fused, already_fused };

// Re-parameterizes every progressive norm (gamma must be 0) into a plain BN,
// then folds that BN into the branch consumer linears: norm1 into the Q/K/V
// projections, norm2 into the first MLP linear. The residual path bypasses
// the norm, so folding into the branch consumers is exact. No standalone
// normalization op remains afterwards.
template <typename T>
FuseOutcome fuse_model(Model<T>& m) {
  if (m.fused) return FuseOutcome::already_fused;
  if (m.cfg.norm_kind != NormKind::prepbn)
    throw NotConverged("fuse_model: model norm kind is " +
                       std::string(to_string(m.cfg.norm_kind)) + ", expected prepbn");
  for (auto& b : m.blocks) {
    for (auto* norm : {&b.norm1, &b.norm2}) {
      double g = gamma(norm->pre);
      if (g > 0.0)
        throw NotConverged("fuse_model: gamma is " + std::to_string(g) +
                           ", transition not complete");
    }
  }
  for (auto& b : m.blocks) {
    BNParams<T> bn1 = reparam_repbn_to_bn(b.norm1.pre.repbn);
    for (auto wb : {std::pair{&b.attn.w_q, &b.attn.b_q}, std::pair{&b.attn.w_k, &b.attn.b_k},
                    std::pair{&b.attn.w_v, &b.attn.b_v}}) {
      auto fused = fuse_bn_into_linear(bn1, *wb.first, *wb.second);
      *wb.first = std::move(fused.first);
      *wb.second = std::move(fused.second);
    }
    BNParams<T> bn2 = reparam_repbn_to_bn(b.norm2.pre.repbn);
    auto fused = fuse_bn_into_linear(bn2, b.fc1_w, b.fc1_b);
    b.fc1_w = std::move(fused.first);
    b.fc1_b = std::move(fused.second);
    b.norm1.fused = b.norm2.fused = true;
    b.norm1.kind = b.norm2.kind = NormKind::batchnorm;
    b.norm1.pre = PRepBNState<T>{};
    b.norm2.pre = PRepBNState<T>{};
  }
  m.fused = true;
  m.cfg.norm_kind = NormKind::batchnorm;
  m.mark_learnable();
  return FuseOutcome::fused;
}

}  // namespace slab
