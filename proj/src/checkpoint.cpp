#include "slab/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

namespace slab {

namespace {
constexpr size_t kMagicLen = 9;
}

void write_checkpoint_file(const std::string& path, const nlohmann::json& header,
                           const std::string& payload) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  std::string htext = header.dump();
  uint64_t hlen = htext.size();
  out.write(kCheckpointMagic, kMagicLen);
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(htext.data(), std::streamsize(htext.size()));
  out.write(payload.data(), std::streamsize(payload.size()));
  if (!out) throw IoError("short write to '" + path + "'");
}

RawCheckpoint read_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  char magic[kMagicLen];
  if (!in.read(magic, kMagicLen) || std::memcmp(magic, kCheckpointMagic, kMagicLen) != 0)
    throw CorruptCheckpoint("'" + path + "' has no checkpoint magic");
  uint64_t hlen = 0;
  if (!in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen)))
    throw CorruptCheckpoint("'" + path + "' truncated in header length");
  std::string htext(hlen, '\0');
  if (!in.read(htext.data(), std::streamsize(hlen)))
    throw CorruptCheckpoint("'" + path + "' truncated in header");
  RawCheckpoint raw;
  try {
    raw.header = nlohmann::json::parse(htext);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpoint("'" + path + "' header is not valid JSON: " + e.what());
  }
  std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  raw.payload = std::move(payload);
  return raw;
}

std::string checkpoint_precision(const std::string& path) {
  RawCheckpoint raw = read_checkpoint_file(path);
  return raw.header.at("precision").get<std::string>();
}

}  // namespace slab
