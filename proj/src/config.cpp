#include "slab/config.hpp"

#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace slab {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

struct Section {
  std::string name;
  std::map<std::string, std::string> kv;
  mutable std::set<std::string> consumed;

  bool has(const std::string& key) const {
    if (!kv.count(key)) return false;
    consumed.insert(key);
    return true;
  }

  const std::string& raw(const std::string& key) const { return kv.at(key); }

  template <typename T, typename Parse>
  T get(const std::string& key, T fallback, Parse parse) const {
    if (!has(key)) return fallback;
    try {
      return parse(raw(key));
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError("[" + name + "] key '" + key + "': cannot parse value '" + raw(key) +
                        "'");
    }
  }

  int get_int(const std::string& key, int fallback) const {
    return get(key, fallback, [](const std::string& v) {
      size_t pos;
      int out = std::stoi(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return out;
    });
  }
  long get_long(const std::string& key, long fallback) const {
    return get(key, fallback, [](const std::string& v) { return std::stol(v); });
  }
  uint64_t get_u64(const std::string& key, uint64_t fallback) const {
    return get(key, fallback, [](const std::string& v) { return std::stoull(v); });
  }
  double get_double(const std::string& key, double fallback) const {
    return get(key, fallback, [](const std::string& v) { return std::stod(v); });
  }
  std::string get_string(const std::string& key, std::string fallback) const {
    return get(key, std::move(fallback), [](const std::string& v) { return v; });
  }
  std::vector<int> get_ints(const std::string& key, std::vector<int> fallback) const {
    return get(key, std::move(fallback), [](const std::string& v) {
      std::vector<int> out;
      std::stringstream ss(v);
      std::string cell;
      while (std::getline(ss, cell, ',')) {
        cell = trim(cell);
        if (!cell.empty()) out.push_back(std::stoi(cell));
      }
      return out;
    });
  }
  std::vector<std::string> get_strings(const std::string& key,
                                       std::vector<std::string> fallback) const {
    return get(key, std::move(fallback), [](const std::string& v) {
      std::vector<std::string> out;
      std::stringstream ss(v);
      std::string cell;
      while (std::getline(ss, cell, ',')) {
        cell = trim(cell);
        if (!cell.empty()) out.push_back(cell);
      }
      return out;
    });
  }

  void finish() const {
    for (const auto& [key, value] : kv)
      if (!consumed.count(key))
        throw ConfigError("[" + name + "] unknown key '" + key + "'");
  }
};

std::map<std::string, Section> parse_sections(const std::string& text) {
  static const std::set<std::string> known = {"model", "train", "bench", "data"};
  std::map<std::string, Section> sections;
  std::istringstream in(text);
  std::string line, current;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
      current = trim(t.substr(1, t.size() - 2));
      if (!known.count(current))
        throw ConfigError("unknown section '[" + current + "]' (model|train|bench|data)");
      sections[current].name = current;
      continue;
    }
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    if (current.empty())
      throw ConfigError("line " + std::to_string(lineno) + ": key before any section");
    std::string key = trim(t.substr(0, eq)), value = trim(t.substr(eq + 1));
    auto& sec = sections[current];
    sec.name = current;
    if (sec.kv.count(key))
      throw ConfigError("[" + current + "] duplicate key '" + key + "'");
    sec.kv[key] = value;
  }
  return sections;
}

}  // namespace

CliConfig default_config() { return CliConfig{}; }

CliConfig parse_config_text(const std::string& text) {
  CliConfig cfg = default_config();
  auto sections = parse_sections(text);

  if (auto it = sections.find("model"); it != sections.end()) {
    const Section& s = it->second;
    auto& m = cfg.model;
    m.depth = s.get_int("depth", m.depth);
    m.dim = s.get_int("dim", m.dim);
    m.heads = s.get_int("heads", m.heads);
    m.mlp_ratio = s.get_double("mlp_ratio", m.mlp_ratio);
    m.norm_kind = parse_norm_kind(s.get_string("norm", to_string(m.norm_kind)));
    m.attn_kind = parse_attn_kind(s.get_string("attention", to_string(m.attn_kind)));
    m.droppath_rate = s.get_double("droppath", m.droppath_rate);
    m.image_size = s.get_int("image_size", m.image_size);
    m.patch_size = s.get_int("patch_size", m.patch_size);
    m.in_channels = s.get_int("in_channels", m.in_channels);
    m.num_classes = s.get_int("num_classes", m.num_classes);
    m.dwc_kernel_size = s.get_int("dwc_kernel", m.dwc_kernel_size);
    m.schedule = parse_schedule(s.get_string("schedule", to_string(m.schedule)));
    s.finish();
  }
  if (auto it = sections.find("train"); it != sections.end()) {
    const Section& s = it->second;
    auto& t = cfg.train;
    t.epochs = s.get_int("epochs", t.epochs);
    t.batch_size = s.get_int("batch_size", t.batch_size);
    t.base_lr = s.get_double("base_lr", t.base_lr);
    t.warmup_epochs = s.get_int("warmup_epochs", t.warmup_epochs);
    t.weight_decay = s.get_double("weight_decay", t.weight_decay);
    t.droppath_rate = s.get_double("droppath", cfg.model.droppath_rate);
    t.prepbn_decay_steps = s.get_long("decay_steps", t.prepbn_decay_steps);
    t.recalib_epochs = s.get_int("recalib_epochs", t.recalib_epochs);
    t.label_smoothing = s.get_double("label_smoothing", t.label_smoothing);
    t.seed = s.get_u64("seed", t.seed);
    s.finish();
  } else {
    cfg.train.droppath_rate = cfg.model.droppath_rate;
  }
  if (auto it = sections.find("data"); it != sections.end()) {
    const Section& s = it->second;
    auto& d = cfg.data;
    d.source = parse_data_source(s.get_string("source", to_string(d.source)));
    d.train_fraction = s.get_double("train_fraction", d.train_fraction);
    d.num_samples = s.get_int("num_samples", d.num_samples);
    d.noise = s.get_double("noise", d.noise);
    d.seed = s.get_u64("seed", d.seed);
    d.path = s.get_string("path", d.path);
    s.finish();
  }
  // Geometry and the label count always mirror the model section.
  cfg.data.image_size = cfg.model.image_size;
  cfg.data.in_channels = cfg.model.in_channels;
  cfg.data.num_classes = cfg.model.num_classes;

  if (auto it = sections.find("bench"); it != sections.end()) {
    const Section& s = it->second;
    auto& b = cfg.bench;
    b.target = parse_bench_target(s.get_string("target", to_string(b.target)));
    b.variants = s.get_strings("variants", b.variants);
    b.seq_lens = s.get_ints("seq_lens", b.seq_lens);
    b.dim = s.get_int("dim", b.dim);
    b.heads = s.get_int("heads", b.heads);
    b.mlp_ratio = s.get_double("mlp_ratio", b.mlp_ratio);
    b.warmup_iters = s.get_int("warmup_iters", b.warmup_iters);
    b.timed_iters = s.get_int("timed_iters", b.timed_iters);
    b.repetitions = s.get_int("repetitions", b.repetitions);
    b.threads = s.get_int("threads", b.threads);
    b.seed = s.get_u64("seed", b.seed);
    s.finish();
  }

  cfg.model.validate();
  cfg.train.validate();
  cfg.data.validate();
  return cfg;
}

CliConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

std::string config_snapshot(const CliConfig& cfg) {
  std::ostringstream o;
  o << "[model]\n"
    << "depth = " << cfg.model.depth << "\n"
    << "dim = " << cfg.model.dim << "\n"
    << "heads = " << cfg.model.heads << "\n"
    << "mlp_ratio = " << cfg.model.mlp_ratio << "\n"
    << "norm = " << to_string(cfg.model.norm_kind) << "\n"
    << "attention = " << to_string(cfg.model.attn_kind) << "\n"
    << "droppath = " << cfg.model.droppath_rate << "\n"
    << "image_size = " << cfg.model.image_size << "\n"
    << "patch_size = " << cfg.model.patch_size << "\n"
    << "in_channels = " << cfg.model.in_channels << "\n"
    << "num_classes = " << cfg.model.num_classes << "\n"
    << "dwc_kernel = " << cfg.model.dwc_kernel_size << "\n"
    << "schedule = " << to_string(cfg.model.schedule) << "\n\n";
  o << "[train]\n"
    << "epochs = " << cfg.train.epochs << "\n"
    << "batch_size = " << cfg.train.batch_size << "\n"
    << "base_lr = " << cfg.train.base_lr << "\n"
    << "warmup_epochs = " << cfg.train.warmup_epochs << "\n"
    << "weight_decay = " << cfg.train.weight_decay << "\n"
    << "droppath = " << cfg.train.droppath_rate << "\n"
    << "decay_steps = " << cfg.train.prepbn_decay_steps << "\n"
    << "recalib_epochs = " << cfg.train.recalib_epochs << "\n"
    << "label_smoothing = " << cfg.train.label_smoothing << "\n"
    << "seed = " << cfg.train.seed << "\n\n";
  o << "[data]\n"
    << "source = " << to_string(cfg.data.source) << "\n"
    << "train_fraction = " << cfg.data.train_fraction << "\n"
    << "num_samples = " << cfg.data.num_samples << "\n"
    << "noise = " << cfg.data.noise << "\n"
    << "seed = " << cfg.data.seed << "\n";
  if (!cfg.data.path.empty()) o << "path = " << cfg.data.path << "\n";
  o << "\n[bench]\n"
    << "target = " << to_string(cfg.bench.target) << "\n";
  if (!cfg.bench.variants.empty()) {
    o << "variants = ";
    for (size_t i = 0; i < cfg.bench.variants.size(); ++i)
      o << (i ? "," : "") << cfg.bench.variants[i];
    o << "\n";
  }
  if (!cfg.bench.seq_lens.empty()) {
    o << "seq_lens = ";
    for (size_t i = 0; i < cfg.bench.seq_lens.size(); ++i)
      o << (i ? "," : "") << cfg.bench.seq_lens[i];
    o << "\n";
  }
  o << "dim = " << cfg.bench.dim << "\n"
    << "heads = " << cfg.bench.heads << "\n"
    << "mlp_ratio = " << cfg.bench.mlp_ratio << "\n"
    << "warmup_iters = " << cfg.bench.warmup_iters << "\n"
    << "timed_iters = " << cfg.bench.timed_iters << "\n"
    << "repetitions = " << cfg.bench.repetitions << "\n"
    << "threads = " << cfg.bench.threads << "\n"
    << "seed = " << cfg.bench.seed << "\n";
  return o.str();
}

}  // namespace slab
