#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "civc/commands.hpp"
#include "civc/errors.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Class-incremental video classification on a synthetic motion benchmark.\n"
               "Output root defaults to $CIVC_OUT_ROOT, or ./runs when unset.",
               "civc"};
  app.require_subcommand(1);
  app.set_version_flag("--version", CIVC_VERSION);

  civc::cli::CommandOptions options;
  std::string out_dir, seeds;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", options.config_path, "Experiment config file")->required();
    cmd->add_option("--set", options.overrides, "Override a key, e.g. --set method=ft or --set memory.beta=1.05")
        ->take_all()
        ->allow_extra_args(false);
    cmd->add_option("--out", out_dir, "Output directory");
    cmd->add_option("--seeds", seeds, "Comma-separated seed list, e.g. 0,1,2");
  };

  auto* run = app.add_subcommand("run", "Run one experiment (one per seed with --seeds)");
  add_common(run);
  auto* ablation = app.add_subcommand("ablation", "Run fused, decomposed-pool, decomposed-traj and dual-gra over the seed list");
  add_common(ablation);
  auto* report = app.add_subcommand("report", "Tabulate results.jsonl files and plot accuracy curves");
  std::string results_dir;
  report->add_option("results_dir", results_dir, "Directory searched recursively for results.jsonl")->required();
  report->add_option("--out", out_dir, "Where report.csv and the plots go (default: results_dir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (!out_dir.empty()) options.out_dir = out_dir;
    if (!seeds.empty()) options.seeds = civc::cli::parse_seed_list(seeds);
  } catch (const civc::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }

  if (*run) return civc::cli::cmd_run(options, std::cout, std::cerr);
  if (*ablation) return civc::cli::cmd_ablation(options, std::cout, std::cerr);
  std::optional<std::filesystem::path> report_out;
  if (!out_dir.empty()) report_out = out_dir;
  return civc::cli::cmd_report(results_dir, report_out, std::cout, std::cerr);
}
