#pragma once

// Run configuration read from an INI file plus section.key=value overrides.
// The canonical serialization is hashed with FNV-1a to identify the run.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "crl/episode.hpp"
#include "crl/planted.hpp"
#include "crl/ppo.hpp"
#include "crl/steering.hpp"

namespace crl {

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir;      // empty: resolved by the command-line tool
  std::string task_dir;        // empty: build the planted task from `planted`
  std::string feature_labels;  // optional index<TAB>label file
  PlantedTaskSpec planted;
  AgentMode mode = AgentMode::kCrlToken;
  SteeringConfig steering;
  PpoConfig ppo;
  std::vector<int> sweep_layers{1, 2};
  std::vector<double> sweep_coefficients{0.0, 10.0, 20.0, 40.0};
  int sweep_steps = 100;

  bool operator==(const RunConfig&) const = default;
};

using ConfigOverride = std::pair<std::string, std::string>;  // "section.key", value

// Parses `text` (named `origin` in messages), applies overrides, fills
// defaults and validates. Throws kConfig listing every problem found, with
// line numbers for problems tied to a line.
RunConfig parse_config(const std::string& text, const std::vector<ConfigOverride>& overrides = {},
                       const std::string& origin = "<config>");
RunConfig load_config(const std::string& path, const std::vector<ConfigOverride>& overrides = {});

// Applies overrides to defaults only.
RunConfig default_config(const std::vector<ConfigOverride>& overrides = {});

// Canonical text: every key, fixed order, doubles at round-trip precision.
std::string serialize_config(const RunConfig& config);
std::uint64_t config_hash(const RunConfig& config);

// All semantic violations joined into one kConfig error.
void validate(const RunConfig& config);

// "section.key=value" → override; throws kConfig when malformed.
ConfigOverride parse_override(const std::string& text);

}  // namespace crl
