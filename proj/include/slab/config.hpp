#pragma once

#include <string>

#include "slab/bench.hpp"
#include "slab/data.hpp"
#include "slab/model.hpp"
#include "slab/training.hpp"

// Structured-text run configuration with [model], [train], [bench] and [data]
// sections. Every key is optional with defaults that scale the full-size
// recipe down to toy scale; unknown sections or keys are hard errors so typos
// surface before any work starts. Dataset geometry and the class count always
// come from [model].

namespace slab {

struct CliConfig {
  ModelConfig model;
  TrainConfig train;
  DatasetSpec data;
  BenchSpec bench;
};

CliConfig default_config();

CliConfig parse_config_text(const std::string& text);
CliConfig parse_config_file(const std::string& path);

// Fully resolved snapshot, loadable by parse_config_file.
std::string config_snapshot(const CliConfig& cfg);

}  // namespace slab
