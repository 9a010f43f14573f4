#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "civc/config_file.hpp"

namespace civc::cli {

struct CommandOptions {
  std::filesystem::path config_path;
  std::vector<std::string> overrides;  // "key=value", applied in order
  std::optional<std::filesystem::path> out_dir;
  std::optional<std::vector<std::uint64_t>> seeds;
};

/// $CIVC_OUT_ROOT when set, else "runs".
std::filesystem::path default_out_root();

/// "0,1,2" -> {0, 1, 2}; throws ConfigError.
std::vector<std::uint64_t> parse_seed_list(const std::string& text);

/// Label grouping runs that share a benchmark layout, e.g. "synthetic-8c-4s".
std::string benchmark_id(const dataio::BenchmarkConfig& config);

/// Runs one experiment into `dir`: manifest.json, config.toml, results and summary.
/// Throws on failure after marking the manifest as failed.
harness::RunOutput execute_run(const RunConfig& config, const std::filesystem::path& dir, std::ostream& log);

/// Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
int cmd_run(const CommandOptions& options, std::ostream& out, std::ostream& err);
int cmd_ablation(const CommandOptions& options, std::ostream& out, std::ostream& err);
int cmd_report(const std::filesystem::path& results_dir, const std::optional<std::filesystem::path>& out_dir,
               std::ostream& out, std::ostream& err);

/// Mean and sample standard deviation (0 for a single value).
struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};
MeanStd mean_std(const std::vector<double>& values);

}  // namespace civc::cli
