#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dsfed/federation.hpp"

namespace dsfed {

/// Everything a CLI invocation needs: the experiment itself plus the seed list
/// and sweep grid used by `ablate` and `sweep`.
struct RunnerConfig {
  ExperimentConfig exp;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::string sweep_param = "selection_rate";
  std::vector<double> sweep_values{0.2, 0.5, 0.8, 1.0};

  void validate() const;
};

// Format:
//
//   # comment
//   seed = 3
//   [federation]
//   lambda = 0.5
//   [model.lightweight]
//   widths = 8, 8, 1
//
// A section header prefixes every following key with "section.". Unknown keys
// and malformed values are ConfigErrors carrying the source and line.
RunnerConfig parse_config(const std::string& text, const std::string& source = "<config>");
RunnerConfig load_config(const std::string& path);

/// Applies one "dotted.key=value" override.
void apply_override(RunnerConfig& cfg, const std::string& assignment);
void set_value(RunnerConfig& cfg, const std::string& key, const std::string& value);

/// Fully resolved (key, value) pairs in a fixed order; feeding them back
/// through set_value reproduces the config.
std::vector<std::pair<std::string, std::string>> config_entries(const RunnerConfig& cfg);
std::string dump_config(const RunnerConfig& cfg);

}  // namespace dsfed
