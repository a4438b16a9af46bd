#pragma once

// Run configuration: one JSON document, validated against the defaults of its
// experiment. Unknown keys and type mismatches are rejected with key paths.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "rbflow/coupling.hpp"
#include "rbflow/estimators.hpp"
#include "rbflow/sampling.hpp"
#include "rbflow/targets.hpp"
#include "rbflow/train.hpp"

namespace rbflow {

constexpr int kConfigSchemaVersion = 1;

struct RunConfig {
  std::string experiment = "tetra";  // "tetra" | "crystal"
  std::uint64_t seed = 0;

  TetraField field;
  double tetra_temperature = 0.01;

  CrystalParams crystal;
  double base_temperature = 2.5;
  double target_temperature = 1.0;
  int ladder_rungs = 5;

  McmcConfig sampler;
  FlowArchitecture arch;
  TrainConfig train;

  int sample_count = 10000;
  int bootstrap = 10;
  MbarOptions mbar;

  int hist_bins = 64;
  std::vector<std::array<int, 2>> hist_pairs;

  /// Seeds of the individual stages, derived from `seed`.
  std::uint64_t stage_seed(int stage) const { return derive_seed(seed, static_cast<std::uint64_t>(stage)); }
};

/// Full default document for an experiment ("tetra" or "crystal").
std::string default_config_json(const std::string& experiment);

/// Parses and validates; errors are ValidationError naming the key path.
RunConfig config_from_json(const std::string& text);
RunConfig config_read(const std::string& path);
RunConfig default_config(const std::string& experiment);

/// Resolved configuration as JSON (every key present), for provenance.
std::string config_to_json(const RunConfig& cfg);

}  // namespace rbflow
