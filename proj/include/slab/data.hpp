#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "slab/common.hpp"

// Toy datasets. synthetic-clusters draws each sample as a class-specific mean
// pattern plus Gaussian noise, which a small model learns comfortably;
// image-folder reads class-per-subdirectory PGM/PPM files; csv-tokens reads
// "label,v0,v1,..." rows. Everything is deterministic given the seed.

namespace slab {

enum class DataSource { synthetic_clusters, image_folder, csv_tokens };

inline const char* to_string(DataSource s) {
  switch (s) {
    case DataSource::synthetic_clusters: return "synthetic-clusters";
    case DataSource::image_folder: return "image-folder";
    case DataSource::csv_tokens: return "csv-tokens";
  }
  return "synthetic-clusters";
}

inline DataSource parse_data_source(const std::string& s) {
  if (s == "synthetic-clusters") return DataSource::synthetic_clusters;
  if (s == "image-folder") return DataSource::image_folder;
  if (s == "csv-tokens") return DataSource::csv_tokens;
  throw ConfigError("unknown data source '" + s +
                    "' (synthetic-clusters|image-folder|csv-tokens)");
}

struct DatasetSpec {
  DataSource source = DataSource::synthetic_clusters;
  double train_fraction = 0.8;
  int image_size = 8;
  int in_channels = 1;
  int num_classes = 4;
  int num_samples = 1280;  // synthetic only
  double noise = 0.3;      // synthetic cluster noise stddev
  uint64_t seed = 7;
  std::string path;  // image-folder / csv-tokens

  void validate() const {
    if (train_fraction <= 0.0 || train_fraction >= 1.0)
      throw ConfigError("data: train_fraction must be in (0,1)");
    if (image_size < 1 || in_channels < 1 || num_classes < 2)
      throw ConfigError("data: bad geometry or label count");
    if (source == DataSource::synthetic_clusters && num_samples < num_classes)
      throw ConfigError("data: num_samples must cover every class");
    if (source != DataSource::synthetic_clusters && path.empty())
      throw ConfigError("data: path required for non-synthetic sources");
  }
};

struct Dataset {
  int image_size = 0, in_channels = 0, num_classes = 0;
  int sample_width = 0;                     // in_channels * image_size^2
  std::vector<std::vector<float>> samples;  // flattened [ch][H][W]
  std::vector<int> labels;
  std::vector<int> train_idx, test_idx;

  size_t size() const { return samples.size(); }
};

namespace detail {

inline void split_dataset(Dataset& d, double train_fraction, uint64_t seed) {
  std::vector<int> order(d.samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed ^ 0x5eedULL);
  std::shuffle(order.begin(), order.end(), rng);
  size_t n_train = size_t(double(order.size()) * train_fraction);
  if (n_train == 0) n_train = 1;
  if (n_train >= order.size()) n_train = order.size() - 1;
  d.train_idx.assign(order.begin(), order.begin() + n_train);
  d.test_idx.assign(order.begin() + n_train, order.end());
}

inline Dataset make_synthetic_clusters(const DatasetSpec& spec) {
  Dataset d;
  d.image_size = spec.image_size;
  d.in_channels = spec.in_channels;
  d.num_classes = spec.num_classes;
  d.sample_width = spec.in_channels * spec.image_size * spec.image_size;
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> gauss{0.0, 1.0};
  std::vector<std::vector<float>> means(spec.num_classes);
  for (auto& m : means) {
    m.resize(d.sample_width);
    for (auto& v : m) v = float(gauss(rng));
  }
  d.samples.reserve(spec.num_samples);
  d.labels.reserve(spec.num_samples);
  for (int i = 0; i < spec.num_samples; ++i) {
    int label = i % spec.num_classes;
    std::vector<float> s(d.sample_width);
    for (int j = 0; j < d.sample_width; ++j)
      s[j] = means[label][j] + float(spec.noise * gauss(rng));
    d.samples.push_back(std::move(s));
    d.labels.push_back(label);
  }
  split_dataset(d, spec.train_fraction, spec.seed);
  return d;
}

// Minimal binary PGM (P5) / PPM (P6) reader.
inline std::vector<float> read_pnm(const std::string& path, int expect_channels, int expect_size) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image '" + path + "'");
  std::string magic;
  in >> magic;
  int channels = magic == "P5" ? 1 : magic == "P6" ? 3 : 0;
  if (channels == 0) throw IoError("'" + path + "' is not a binary PGM/PPM file");
  auto next_int = [&]() {
    int v;
    while (in >> std::ws && in.peek() == '#') in.ignore(1 << 16, '\n');
    if (!(in >> v)) throw IoError("'" + path + "' has a malformed header");
    return v;
  };
  int w = next_int(), h = next_int(), maxval = next_int();
  in.ignore(1);
  if (w != expect_size || h != expect_size || channels != expect_channels)
    throw ConfigError("image '" + path + "' is " + std::to_string(w) + "x" + std::to_string(h) +
                      "x" + std::to_string(channels) + ", expected " +
                      std::to_string(expect_size) + "x" + std::to_string(expect_size) + "x" +
                      std::to_string(expect_channels));
  std::vector<unsigned char> raw(size_t(w) * h * channels);
  if (!in.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size())))
    throw IoError("'" + path + "' pixel data truncated");
  // interleaved -> channel planes, scaled to [0,1]
  std::vector<float> out(raw.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c)
        out[size_t(c) * w * h + size_t(y) * w + x] =
            float(raw[(size_t(y) * w + x) * channels + c]) / float(maxval);
  return out;
}

inline Dataset make_image_folder(const DatasetSpec& spec) {
  namespace fs = std::filesystem;
  Dataset d;
  d.image_size = spec.image_size;
  d.in_channels = spec.in_channels;
  d.sample_width = spec.in_channels * spec.image_size * spec.image_size;
  if (!fs::is_directory(spec.path)) throw IoError("'" + spec.path + "' is not a directory");
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(spec.path))
    if (e.is_directory()) class_dirs.push_back(e.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw EmptyStream("'" + spec.path + "' holds no class directories");
  d.num_classes = int(class_dirs.size());
  for (size_t label = 0; label < class_dirs.size(); ++label) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(class_dirs[label]))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      d.samples.push_back(read_pnm(f.string(), spec.in_channels, spec.image_size));
      d.labels.push_back(int(label));
    }
  }
  if (d.samples.size() < 2) throw EmptyStream("'" + spec.path + "' holds too few images");
  split_dataset(d, spec.train_fraction, spec.seed);
  return d;
}

inline Dataset make_csv_tokens(const DatasetSpec& spec) {
  Dataset d;
  d.image_size = spec.image_size;
  d.in_channels = spec.in_channels;
  d.num_classes = spec.num_classes;
  d.sample_width = spec.in_channels * spec.image_size * spec.image_size;
  std::ifstream in(spec.path);
  if (!in) throw IoError("cannot open '" + spec.path + "'");
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<float> row;
    while (std::getline(ss, cell, ',')) row.push_back(std::stof(cell));
    if (int(row.size()) != d.sample_width + 1)
      throw ConfigError("'" + spec.path + "' line " + std::to_string(lineno) + " has " +
                        std::to_string(row.size() - 1) + " values, expected " +
                        std::to_string(d.sample_width));
    int label = int(row[0]);
    if (label < 0 || label >= spec.num_classes)
      throw ConfigError("'" + spec.path + "' line " + std::to_string(lineno) +
                        " label out of range");
    d.labels.push_back(label);
    d.samples.emplace_back(row.begin() + 1, row.end());
  }
  if (d.samples.size() < 2) throw EmptyStream("'" + spec.path + "' holds too few rows");
  split_dataset(d, spec.train_fraction, spec.seed);
  return d;
}

}  // namespace detail

inline Dataset load_dataset(const DatasetSpec& spec) {
  spec.validate();
  switch (spec.source) {
    case DataSource::synthetic_clusters: return detail::make_synthetic_clusters(spec);
    case DataSource::image_folder: return detail::make_image_folder(spec);
    case DataSource::csv_tokens: return detail::make_csv_tokens(spec);
  }
  throw ConfigError("data: unreachable source");
}

}  // namespace slab
