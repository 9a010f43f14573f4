#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "civc/harness.hpp"

namespace civc::cli {

/// Everything a config file can express: one experiment plus the seed list used by sweeps.
struct RunConfig {
  harness::ExperimentConfig experiment;
  std::vector<std::uint64_t> seeds{0, 1, 2};

  bool operator==(const RunConfig&) const = default;
};

/// Flat key = value file. Top-level keys: method, seed, seeds. Sections: [dataio], [model],
/// [distill], [memory], [harness]. Unknown keys and malformed values throw ConfigError.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

/// Every key with its resolved value, sections in fixed order.
std::string serialize_config(const RunConfig& config);

/// "section.key=value" or "key=value" for top-level keys. Call finalize() after the last one.
void apply_override(RunConfig& config, const std::string& assignment);

/// Derives dependent fields and validates; throws ConfigError.
void finalize(RunConfig& config);

/// FNV-1a 64 of the serialized config, as 16 hex digits.
std::string config_hash(const RunConfig& config);

/// Names of every accepted key, "section.key" form.
std::vector<std::string> config_keys();

}  // namespace civc::cli
