#pragma once

#include <bit>
#include <cstring>
#include <string>
#include <vector>

#include <json.hpp>

#include "slab/model.hpp"

// Checkpoint container: magic "SLABCKPT1", a little-endian u64 header length,
// a JSON header describing config, tensor names/shapes/offsets, precision and
// schedule state, then the raw little-endian value blobs in header order. The
// header is self-describing; loading needs no external config.

namespace slab {

inline constexpr char kCheckpointMagic[] = "SLABCKPT1";  // 9 bytes on disk

struct RawCheckpoint {
  nlohmann::json header;
  std::string payload;
};

void write_checkpoint_file(const std::string& path, const nlohmann::json& header,
                           const std::string& payload);
RawCheckpoint read_checkpoint_file(const std::string& path);

// Header precision field without materializing a model.
std::string checkpoint_precision(const std::string& path);

template <typename T>
constexpr const char* precision_name();
template <>
constexpr const char* precision_name<float>() { return "f32"; }
template <>
constexpr const char* precision_name<double>() { return "f64"; }

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"depth", c.depth},
          {"dim", c.dim},
          {"heads", c.heads},
          {"mlp_ratio", c.mlp_ratio},
          {"norm_kind", to_string(c.norm_kind)},
          {"attn_kind", to_string(c.attn_kind)},
          {"droppath_rate", c.droppath_rate},
          {"image_size", c.image_size},
          {"patch_size", c.patch_size},
          {"in_channels", c.in_channels},
          {"num_classes", c.num_classes},
          {"dwc_kernel_size", c.dwc_kernel_size},
          {"prepbn_total_steps", c.prepbn_total_steps},
          {"schedule", to_string(c.schedule)}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.depth = j.at("depth").get<int>();
  c.dim = j.at("dim").get<int>();
  c.heads = j.at("heads").get<int>();
  c.mlp_ratio = j.at("mlp_ratio").get<double>();
  c.norm_kind = parse_norm_kind(j.at("norm_kind").get<std::string>());
  c.attn_kind = parse_attn_kind(j.at("attn_kind").get<std::string>());
  c.droppath_rate = j.at("droppath_rate").get<double>();
  c.image_size = j.at("image_size").get<int>();
  c.patch_size = j.at("patch_size").get<int>();
  c.in_channels = j.at("in_channels").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.dwc_kernel_size = j.at("dwc_kernel_size").get<int>();
  c.prepbn_total_steps = j.at("prepbn_total_steps").get<long>();
  c.schedule = parse_schedule(j.at("schedule").get<std::string>());
  return c;
}

template <typename T>
void save_checkpoint(Model<T>& m, const std::string& path) {
  static_assert(std::endian::native == std::endian::little,
                "checkpoint payload is little-endian");
  auto named = m.named_tensors();
  nlohmann::json tensors = nlohmann::json::array();
  std::string payload;
  size_t offset = 0;
  for (auto& nt : named) {
    size_t bytes = nt.tensor->size() * sizeof(T);
    tensors.push_back({{"name", nt.name},
                       {"shape", nt.tensor->shape()},
                       {"offset", offset},
                       {"bytes", bytes}});
    payload.append(reinterpret_cast<const char*>(nt.tensor->data()), bytes);
    offset += bytes;
  }
  nlohmann::json schedule = nlohmann::json::array();
  for (size_t i = 0; i < m.blocks.size(); ++i) {
    auto record = [&](const char* which, const Norm<T>& n) {
      if (n.kind == NormKind::prepbn && !n.fused)
        schedule.push_back({{"block", i},
                            {"norm", which},
                            {"total_steps", n.pre.total_steps},
                            {"current_step", n.pre.current_step}});
    };
    record("norm1", m.blocks[i].norm1);
    record("norm2", m.blocks[i].norm2);
  }
  nlohmann::json header = {{"version", 1},
                           {"precision", precision_name<T>()},
                           {"fused", m.fused},
                           {"config", model_config_to_json(m.cfg)},
                           {"schedule", schedule},
                           {"tensors", tensors}};
  write_checkpoint_file(path, header, payload);
}

template <typename T>
Model<T> load_checkpoint(const std::string& path) {
  RawCheckpoint raw = read_checkpoint_file(path);
  const auto& h = raw.header;
  std::string prec = h.at("precision").get<std::string>();
  if (prec != precision_name<T>())
    throw ConfigError("checkpoint " + path + " holds " + prec + " tensors, requested " +
                      precision_name<T>());
  ModelConfig cfg = model_config_from_json(h.at("config"));
  bool fused = h.at("fused").get<bool>();
  Model<T> m = Model<T>::skeleton(cfg, fused);

  auto named = m.named_tensors();
  size_t matched = 0;
  for (const auto& td : h.at("tensors")) {
    std::string name = td.at("name").get<std::string>();
    NamedTensor<T>* slot = nullptr;
    for (auto& nt : named)
      if (nt.name == name) {
        slot = &nt;
        break;
      }
    if (!slot) throw CorruptCheckpoint("checkpoint names unknown tensor '" + name + "'");
    Shape shape = td.at("shape").get<Shape>();
    if (shape != slot->tensor->shape())
      throw CorruptCheckpoint("tensor '" + name + "' shape " + shape_str(shape) +
                              " does not match model " + shape_str(slot->tensor->shape()));
    size_t offset = td.at("offset").get<size_t>();
    size_t bytes = td.at("bytes").get<size_t>();
    if (bytes != slot->tensor->size() * sizeof(T))
      throw CorruptCheckpoint("tensor '" + name + "' byte span mismatch");
    if (offset + bytes > raw.payload.size())
      throw CorruptCheckpoint("payload truncated at tensor '" + name + "'");
    std::memcpy(slot->tensor->mutable_value().data(), raw.payload.data() + offset, bytes);
    ++matched;
  }
  if (matched != named.size())
    throw CorruptCheckpoint("checkpoint covers " + std::to_string(matched) + " of " +
                            std::to_string(named.size()) + " model tensors");

  for (const auto& sd : h.at("schedule")) {
    size_t bi = sd.at("block").get<size_t>();
    if (bi >= m.blocks.size()) throw CorruptCheckpoint("schedule entry for missing block");
    auto& norm = sd.at("norm").get<std::string>() == "norm1" ? m.blocks[bi].norm1
                                                             : m.blocks[bi].norm2;
    norm.pre.total_steps = sd.at("total_steps").get<long>();
    norm.pre.current_step = sd.at("current_step").get<long>();
  }
  return m;
}

}  // namespace slab
