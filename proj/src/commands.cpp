#include "civc/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "civc/errors.hpp"

#ifndef CIVC_VERSION
#define CIVC_VERSION "unknown"
#endif

namespace civc::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::vector<harness::Method> kAblationMethods{harness::Method::fused, harness::Method::decomposed_pool,
                                                    harness::Method::decomposed_traj, harness::Method::dual_gra};

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

RunConfig resolve(const CommandOptions& options) {
  RunConfig config = load_config(options.config_path);
  for (const auto& o : options.overrides) apply_override(config, o);
  if (options.seeds) config.seeds = *options.seeds;
  finalize(config);
  return config;
}

json config_object(const RunConfig& config) {
  // "key = value" lines of the serialized form, keyed by their dotted name
  json out = json::object();
  std::istringstream in(serialize_config(config));
  std::string line, section;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.front() == '[') {
      section = line.substr(1, line.size() - 2);
      continue;
    }
    const auto eq = line.find(" = ");
    out[(section.empty() ? "" : section + ".") + line.substr(0, eq)] = line.substr(eq + 3);
  }
  return out;
}

void write_manifest(const fs::path& dir, const RunConfig& config, const std::string& started,
                    const std::string& finished, const std::string& status) {
  json m{{"schema_version", 1},
         {"config_hash", config_hash(config)},
         {"code_version", CIVC_VERSION},
         {"seed", config.experiment.seed},
         {"method", harness::to_string(config.experiment.method)},
         {"benchmark", benchmark_id(config.experiment.benchmark)},
         {"status", status},
         {"started_at", started},
         {"finished_at", finished},
         {"outputs",
          {{"config", "config.toml"},
           {"results", "results.jsonl"},
           {"summary", "summary.json"},
           {"train_log", "train_log.jsonl"},
           {"checkpoints", "checkpoints"},
           {"memory", "memory"}}},
         {"config", config_object(config)}};
  harness::write_atomic(dir / "manifest.json", m.dump(2) + "\n");
}

struct RunRecord {
  fs::path dir;
  std::string method;
  std::string benchmark;
  std::string seed;
  std::vector<json> sessions;
};

std::vector<RunRecord> collect_runs(const fs::path& root) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(root))
    if (entry.is_regular_file() && entry.path().filename() == "results.jsonl") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  std::vector<RunRecord> runs;
  for (const auto& file : files) {
    RunRecord r;
    r.dir = file.parent_path();
    r.method = "unknown";
    r.benchmark = "unknown";
    r.seed = "";
    if (std::ifstream mf(r.dir / "manifest.json"); mf) {
      const json m = json::parse(mf);
      r.method = m.value("method", r.method);
      r.benchmark = m.value("benchmark", r.benchmark);
      if (m.contains("seed")) r.seed = std::to_string(m.at("seed").get<std::uint64_t>());
    } else if (std::ifstream sf(r.dir / "summary.json"); sf) {
      r.method = json::parse(sf).value("method", r.method);
    }
    std::ifstream in(file);
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) r.sessions.push_back(json::parse(line));
    runs.push_back(std::move(r));
  }
  return runs;
}

std::string svg_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

/// Seen-class accuracy against session index, one polyline per method (mean over its runs).
std::string curve_svg(const std::string& title, const std::map<std::string, std::vector<double>>& curves) {
  const double W = 640, H = 420, left = 60, right = 170, top = 40, bottom = 50;
  const double pw = W - left - right, ph = H - top - bottom;
  std::size_t sessions = 1;
  for (const auto& [m, c] : curves) sessions = std::max(sessions, c.size());
  auto x = [&](std::size_t i) { return left + (sessions == 1 ? pw / 2 : pw * static_cast<double>(i) / (sessions - 1)); };
  auto y = [&](double acc) { return top + ph * (1.0 - acc / 100.0); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"};

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << left + pw / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">" << svg_escape(title) << "</text>\n";
  for (int a = 0; a <= 100; a += 20) {
    s << "<line x1=\"" << left << "\" x2=\"" << left + pw << "\" y1=\"" << y(a) << "\" y2=\"" << y(a)
      << "\" stroke=\"#ddd\"/>\n";
    s << "<text x=\"" << left - 8 << "\" y=\"" << y(a) + 4 << "\" text-anchor=\"end\">" << a << "</text>\n";
  }
  for (std::size_t i = 0; i < sessions; ++i)
    s << "<text x=\"" << x(i) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">" << i + 1 << "</text>\n";
  s << "<line x1=\"" << left << "\" x2=\"" << left << "\" y1=\"" << top << "\" y2=\"" << top + ph << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << left << "\" x2=\"" << left + pw << "\" y1=\"" << top + ph << "\" y2=\"" << top + ph << "\" stroke=\"black\"/>\n";
  s << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">session</text>\n";
  s << "<text transform=\"translate(16," << top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">accuracy on seen classes (%)</text>\n";
  std::size_t k = 0;
  for (const auto& [method, curve] : curves) {
    const char* color = colors[k % 7];
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < curve.size(); ++i) s << (i ? " " : "") << fixed(x(i)) << "," << fixed(y(curve[i]));
    s << "\"/>\n";
    for (std::size_t i = 0; i < curve.size(); ++i)
      s << "<circle cx=\"" << fixed(x(i)) << "\" cy=\"" << fixed(y(curve[i])) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    const double ly = top + 10 + 18.0 * static_cast<double>(k);
    s << "<line x1=\"" << left + pw + 15 << "\" x2=\"" << left + pw + 35 << "\" y1=\"" << ly << "\" y2=\"" << ly
      << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    s << "<text x=\"" << left + pw + 40 << "\" y=\"" << ly + 4 << "\">" << svg_escape(method) << "</text>\n";
    ++k;
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace

fs::path default_out_root() {
  const char* env = std::getenv("CIVC_OUT_ROOT");
  return (env && *env) ? fs::path(env) : fs::path("runs");
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      if (item.empty() || item.front() == '-') throw std::invalid_argument(item);
      out.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw ConfigError("--seeds: '" + item + "' is not a non-negative integer");
    }
  }
  if (out.empty()) throw ConfigError("--seeds: empty list");
  return out;
}

std::string benchmark_id(const dataio::BenchmarkConfig& c) {
  const int base = c.base_classes > 0 ? c.base_classes : c.classes_per_session;
  const int sessions = 1 + (c.num_classes - base) / c.classes_per_session;
  return "synthetic-" + std::to_string(c.num_classes) + "c-" + std::to_string(sessions) + "s";
}

MeanStd mean_std(const std::vector<double>& values) {
  MeanStd r;
  if (values.empty()) return r;
  r.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - r.mean) * (v - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return r;
}

harness::RunOutput execute_run(const RunConfig& config, const fs::path& dir, std::ostream& log) {
  fs::create_directories(dir);
  const std::string started = utc_now();
  const std::string hash = config_hash(config);
  write_manifest(dir, config, started, "", "running");
  harness::write_atomic(dir / "config.toml", serialize_config(config));

  harness::RunOptions options;
  options.out_dir = dir;
  options.config_hash = hash;
  options.hooks.on_session = [&](const harness::SessionResult& r, const model::Model&, const memory::ExemplarStore&) {
    log << "  session " << r.session_index << ": classes " << r.num_classes << ", acc " << fixed(r.acc_seen)
        << "%, acc on first " << fixed(r.acc_on_first) << "%, mem " << r.mem_bytes << " B\n"
        << std::flush;
  };
  try {
    auto output = harness::run_benchmark(config.experiment, options);
    write_manifest(dir, config, started, utc_now(), "ok");
    return output;
  } catch (...) {
    write_manifest(dir, config, started, utc_now(), "failed");
    throw;
  }
}

int cmd_run(const CommandOptions& options, std::ostream& out, std::ostream& err) {
  RunConfig config;
  try {
    config = resolve(options);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  }
  const bool many = options.seeds.has_value();
  const std::vector<std::uint64_t> seeds = many ? *options.seeds : std::vector<std::uint64_t>{config.experiment.seed};
  const std::string method = harness::to_string(config.experiment.method);
  try {
    for (std::uint64_t seed : seeds) {
      RunConfig run = config;
      run.experiment.seed = seed;
      fs::path dir;
      if (options.out_dir) dir = many ? *options.out_dir / ("seed_" + std::to_string(seed)) : *options.out_dir;
      else dir = default_out_root() / (method + "-seed" + std::to_string(seed));
      out << method << " seed " << seed << " -> " << dir.string() << "\n";
      const auto result = execute_run(run, dir, out);
      out << "  final acc " << fixed(result.summary.final_acc) << "%, forgetting " << fixed(result.summary.forgetting)
          << ", mem " << result.summary.mem_bytes << " B\n";
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "run failed: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

int cmd_ablation(const CommandOptions& options, std::ostream& out, std::ostream& err) {
  RunConfig config;
  try {
    config = resolve(options);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  }
  const fs::path root = options.out_dir ? *options.out_dir : default_out_root() / "ablation";
  json rows = json::array();
  std::string csv = "method,acc_mean,acc_std,forget_mean,forget_std,mem_mean_bytes,runs\n";
  std::string table = "| method | Acc (%) | Forget (%) | Mem (MB) |\n|---|---|---|---|\n";
  try {
    for (harness::Method method : kAblationMethods) {
      std::vector<double> acc, forget, mem;
      for (std::uint64_t seed : config.seeds) {
        RunConfig run = config;
        run.experiment.method = method;
        run.experiment.seed = seed;
        const fs::path dir = root / harness::to_string(method) / ("seed_" + std::to_string(seed));
        out << harness::to_string(method) << " seed " << seed << " -> " << dir.string() << "\n";
        const auto result = execute_run(run, dir, out);
        acc.push_back(result.summary.final_acc);
        forget.push_back(result.summary.forgetting);
        mem.push_back(static_cast<double>(result.summary.mem_bytes));
      }
      const auto a = mean_std(acc), f = mean_std(forget), m = mean_std(mem);
      const std::string name = harness::to_string(method);
      rows.push_back({{"method", name},
                      {"acc_mean", a.mean},
                      {"acc_std", a.std},
                      {"forget_mean", f.mean},
                      {"forget_std", f.std},
                      {"mem_mean_bytes", m.mean},
                      {"acc", acc},
                      {"forget", forget},
                      {"mem_bytes", mem}});
      csv += name + "," + fixed(a.mean, 4) + "," + fixed(a.std, 4) + "," + fixed(f.mean, 4) + "," + fixed(f.std, 4) +
             "," + fixed(m.mean, 1) + "," + std::to_string(acc.size()) + "\n";
      table += "| " + name + " | " + fixed(a.mean) + " ± " + fixed(a.std) + " | " + fixed(f.mean) + " ± " +
               fixed(f.std) + " | " + fixed(m.mean / 1e6, 3) + " |\n";
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "ablation failed: " << e.what() << "\n";
    return 1;
  }
  harness::write_atomic(root / "ablation.json", json{{"schema_version", 1}, {"seeds", config.seeds}, {"rows", rows}}.dump(2) + "\n");
  harness::write_atomic(root / "ablation.csv", csv);
  harness::write_atomic(root / "ablation.md", table);
  out << "\n" << table;
  return 0;
}

int cmd_report(const fs::path& results_dir, const std::optional<fs::path>& out_dir, std::ostream& out,
               std::ostream& err) {
  if (!fs::is_directory(results_dir)) {
    err << "report: '" << results_dir.string() << "' is not a directory\n";
    return 2;
  }
  std::vector<RunRecord> runs;
  try {
    runs = collect_runs(results_dir);
  } catch (const std::exception& e) {
    err << "report: cannot read results: " << e.what() << "\n";
    return 1;
  }
  if (runs.empty()) {
    err << "report: no results.jsonl under '" << results_dir.string() << "'\n";
    return 2;
  }
  const fs::path dest = out_dir ? *out_dir : results_dir;

  std::string csv = "benchmark,method,seed,run,session,num_classes,acc_seen,acc_on_first\n";
  // benchmark -> method -> per-session accuracies of every run
  std::map<std::string, std::map<std::string, std::vector<std::vector<double>>>> grouped;
  for (const auto& run : runs) {
    std::vector<double> curve;
    const std::string rel = fs::relative(run.dir, results_dir).generic_string();
    for (const auto& s : run.sessions) {
      const double acc = s.at("acc_seen").get<double>();
      csv += run.benchmark + "," + run.method + "," + run.seed + "," + rel + "," +
             std::to_string(s.at("session_index").get<int>()) + "," + std::to_string(s.at("num_classes").get<int>()) +
             "," + fixed(acc, 4) + "," + fixed(s.at("acc_on_first").get<double>(), 4) + "\n";
      curve.push_back(acc);
    }
    grouped[run.benchmark][run.method].push_back(curve);
  }
  try {
    harness::write_atomic(dest / "report.csv", csv);
    for (const auto& [benchmark, methods] : grouped) {
      std::map<std::string, std::vector<double>> curves;
      for (const auto& [method, list] : methods) {
        std::size_t n = 0;
        for (const auto& c : list) n = std::max(n, c.size());
        std::vector<double> mean(n, 0.0), count(n, 0.0);
        for (const auto& c : list)
          for (std::size_t i = 0; i < c.size(); ++i) {
            mean[i] += c[i];
            count[i] += 1.0;
          }
        for (std::size_t i = 0; i < n; ++i) mean[i] /= count[i];
        curves[method] = mean;
      }
      harness::write_atomic(dest / ("curves_" + benchmark + ".svg"), curve_svg(benchmark, curves));
    }
  } catch (const std::exception& e) {
    err << "report: " << e.what() << "\n";
    return 1;
  }
  out << "report: " << runs.size() << " runs -> " << (dest / "report.csv").string() << "\n";
  return 0;
}

}  // namespace civc::cli
