#include "civc/config_file.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "civc/errors.hpp"

namespace civc::cli {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& raw, const char* expected) {
  throw ConfigError(key + ": expected " + expected + ", got '" + raw + "'");
}

long long to_integer(const std::string& key, const std::string& raw) {
  long long v = 0;
  const auto* end = raw.data() + raw.size();
  const auto [ptr, ec] = std::from_chars(raw.data(), end, v);
  if (raw.empty() || ec != std::errc() || ptr != end) bad_value(key, raw, "an integer");
  return v;
}

int to_int(const std::string& key, const std::string& raw) {
  const long long v = to_integer(key, raw);
  if (v < INT32_MIN || v > INT32_MAX) bad_value(key, raw, "a 32-bit integer");
  return static_cast<int>(v);
}

std::uint64_t to_u64(const std::string& key, const std::string& raw) {
  std::uint64_t v = 0;
  const auto* end = raw.data() + raw.size();
  const auto [ptr, ec] = std::from_chars(raw.data(), end, v);
  if (raw.empty() || ec != std::errc() || ptr != end) bad_value(key, raw, "a non-negative integer");
  return v;
}

double to_double(const std::string& key, const std::string& raw) {
  std::istringstream in(raw);
  in.imbue(std::locale::classic());
  double v = 0.0;
  in >> v;
  if (raw.empty() || in.fail() || !in.eof()) bad_value(key, raw, "a number");
  return v;
}

bool to_bool(const std::string& key, const std::string& raw) {
  if (raw == "true") return true;
  if (raw == "false") return false;
  bad_value(key, raw, "true or false");
}

std::string to_text(const std::string& raw) {
  if (raw.size() >= 2 && raw.front() == '"' && raw.back() == '"') return raw.substr(1, raw.size() - 2);
  return raw;
}

std::vector<std::string> to_list(const std::string& key, const std::string& raw) {
  if (raw.size() < 2 || raw.front() != '[' || raw.back() != ']') bad_value(key, raw, "a [list]");
  std::vector<std::string> out;
  const std::string body = trim(raw.substr(1, raw.size() - 2));
  if (body.empty()) return out;
  std::stringstream ss(body);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  std::string s = buf;
  // keep a decimal point so the value reads back as a number, never as an integer literal
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

std::string quoted(const std::string& s) { return "\"" + s + "\""; }

template <typename T, typename F>
std::string fmt_list(const std::vector<T>& values, F fmt) {
  std::string out = "[";
  for (std::size_t i = 0; i < values.size(); ++i) out += (i ? ", " : "") + fmt(values[i]);
  return out + "]";
}

struct Field {
  std::string section;  // empty for top-level
  std::string name;
  std::function<void(RunConfig&, const std::string& key, const std::string& raw)> set;
  std::function<std::string(const RunConfig&)> get;

  std::string key() const { return section.empty() ? name : section + "." + name; }
};

#define CIVC_INT(SEC, NAME, EXPR)                                                                     \
  Field {                                                                                             \
    SEC, NAME, [](RunConfig& c, const std::string& k, const std::string& r) { c.EXPR = to_int(k, r); }, \
        [](const RunConfig& c) { return std::to_string(c.EXPR); }                                      \
  }
#define CIVC_DOUBLE(SEC, NAME, EXPR)                                                                     \
  Field {                                                                                                \
    SEC, NAME, [](RunConfig& c, const std::string& k, const std::string& r) { c.EXPR = to_double(k, r); }, \
        [](const RunConfig& c) { return fmt_double(c.EXPR); }                                             \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({"", "method",
                 [](RunConfig& c, const std::string&, const std::string& r) {
                   c.experiment.method = harness::parse_method(to_text(r));
                 },
                 [](const RunConfig& c) { return quoted(harness::to_string(c.experiment.method)); }});
    f.push_back({"", "seed",
                 [](RunConfig& c, const std::string& k, const std::string& r) { c.experiment.seed = to_u64(k, r); },
                 [](const RunConfig& c) { return std::to_string(c.experiment.seed); }});
    f.push_back({"", "seeds",
                 [](RunConfig& c, const std::string& k, const std::string& r) {
                   c.seeds.clear();
                   for (const auto& item : to_list(k, r)) c.seeds.push_back(to_u64(k, item));
                 },
                 [](const RunConfig& c) {
                   return fmt_list(c.seeds, [](std::uint64_t s) { return std::to_string(s); });
                 }});

    f.push_back(CIVC_INT("dataio", "num_classes", experiment.benchmark.num_classes));
    f.push_back(CIVC_INT("dataio", "train_per_class", experiment.benchmark.train_per_class));
    f.push_back(CIVC_INT("dataio", "test_per_class", experiment.benchmark.test_per_class));
    f.push_back(CIVC_INT("dataio", "height", experiment.benchmark.frame.height));
    f.push_back(CIVC_INT("dataio", "width", experiment.benchmark.frame.width));
    f.push_back(CIVC_INT("dataio", "channels", experiment.benchmark.frame.channels));
    f.push_back(CIVC_INT("dataio", "raw_frames", experiment.benchmark.raw_frames));
    f.push_back(CIVC_INT("dataio", "base_classes", experiment.benchmark.base_classes));
    f.push_back(CIVC_INT("dataio", "classes_per_session", experiment.benchmark.classes_per_session));
    f.push_back(CIVC_DOUBLE("dataio", "noise_std", experiment.benchmark.noise_std));
    f.push_back({"dataio", "class_order",
                 [](RunConfig& c, const std::string& k, const std::string& r) {
                   const auto v = to_text(r);
                   if (v == "fixed") c.experiment.benchmark.class_order = dataio::ClassOrder::fixed;
                   else if (v == "shuffled") c.experiment.benchmark.class_order = dataio::ClassOrder::shuffled;
                   else bad_value(k, r, "fixed or shuffled");
                 },
                 [](const RunConfig& c) {
                   return quoted(c.experiment.benchmark.class_order == dataio::ClassOrder::fixed ? "fixed" : "shuffled");
                 }});

    f.push_back(CIVC_INT("model", "segments", experiment.backbone.segments));
    f.push_back({"model", "widths",
                 [](RunConfig& c, const std::string& k, const std::string& r) {
                   auto& w = c.experiment.backbone.widths;
                   w.clear();
                   for (const auto& item : to_list(k, r)) w.push_back(to_int(k, item));
                 },
                 [](const RunConfig& c) {
                   return fmt_list(c.experiment.backbone.widths, [](int v) { return std::to_string(v); });
                 }});
    f.push_back({"model", "pool_after",
                 [](RunConfig& c, const std::string& k, const std::string& r) {
                   auto& p = c.experiment.backbone.pool_after;
                   p.clear();
                   for (const auto& item : to_list(k, r)) p.push_back(to_bool(k, item));
                 },
                 [](const RunConfig& c) {
                   std::vector<bool> p = c.experiment.backbone.pool_after;
                   return fmt_list(std::vector<int>(p.begin(), p.end()),
                                   [](int v) { return std::string(v ? "true" : "false"); });
                 }});
    f.push_back(CIVC_INT("model", "shift_div", experiment.backbone.shift_div));

    f.push_back(CIVC_DOUBLE("distill", "alpha", experiment.weights.alpha));
    f.push_back(CIVC_DOUBLE("distill", "gamma", experiment.weights.gamma));
    f.push_back(CIVC_DOUBLE("distill", "lambda", experiment.weights.lambda));
    f.push_back(CIVC_DOUBLE("distill", "temperature", experiment.weights.temperature));
    f.push_back(CIVC_INT("distill", "delta_t", experiment.weights.delta_t));
    f.push_back(CIVC_INT("distill", "temporal_dim", experiment.temporal_dim));
    f.push_back({"distill", "pool",
                 [](RunConfig& c, const std::string&, const std::string& r) {
                   c.experiment.pool = distill::parse_pool_op(to_text(r));
                 },
                 [](const RunConfig& c) { return quoted(distill::to_string(c.experiment.pool)); }});

    f.push_back(CIVC_INT("memory", "exemplars_per_class", experiment.memory.exemplars_per_class));
    f.push_back(CIVC_DOUBLE("memory", "beta", experiment.memory.beta));
    f.push_back({"memory", "threshold_form",
                 [](RunConfig& c, const std::string&, const std::string& r) {
                   c.experiment.memory.threshold_form = memory::parse_threshold_form(to_text(r));
                 },
                 [](const RunConfig& c) { return quoted(memory::to_string(c.experiment.memory.threshold_form)); }});
    f.push_back(CIVC_INT("memory", "bytes_per_value", experiment.memory.bytes_per_value));

    f.push_back(CIVC_INT("harness", "base_epochs", experiment.training.base.epochs));
    f.push_back(CIVC_DOUBLE("harness", "base_lr", experiment.training.base.learning_rate));
    f.push_back({"harness", "base_milestones",
                 [](RunConfig& c, const std::string& k, const std::string& r) {
                   auto& m = c.experiment.training.base.milestones;
                   m.clear();
                   for (const auto& item : to_list(k, r)) m.push_back(to_int(k, item));
                 },
                 [](const RunConfig& c) {
                   return fmt_list(c.experiment.training.base.milestones, [](int v) { return std::to_string(v); });
                 }});
    f.push_back(CIVC_INT("harness", "incremental_epochs", experiment.training.incremental.epochs));
    f.push_back(CIVC_DOUBLE("harness", "incremental_lr", experiment.training.incremental.learning_rate));
    f.push_back({"harness", "incremental_milestones",
                 [](RunConfig& c, const std::string& k, const std::string& r) {
                   auto& m = c.experiment.training.incremental.milestones;
                   m.clear();
                   for (const auto& item : to_list(k, r)) m.push_back(to_int(k, item));
                 },
                 [](const RunConfig& c) {
                   return fmt_list(c.experiment.training.incremental.milestones,
                                   [](int v) { return std::to_string(v); });
                 }});
    f.push_back({"harness", "lr_factor",
                 [](RunConfig& c, const std::string& k, const std::string& r) {
                   c.experiment.training.base.factor = c.experiment.training.incremental.factor = to_double(k, r);
                 },
                 [](const RunConfig& c) { return fmt_double(c.experiment.training.base.factor); }});
    f.push_back(CIVC_INT("harness", "batch_size", experiment.training.batch_size));
    f.push_back(CIVC_DOUBLE("harness", "momentum", experiment.training.momentum));
    f.push_back(CIVC_DOUBLE("harness", "weight_decay", experiment.training.weight_decay));
    f.push_back(CIVC_DOUBLE("harness", "grad_clip", experiment.training.grad_clip));
    return f;
  }();
  return table;
}

#undef CIVC_INT
#undef CIVC_DOUBLE

const Field& find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key() == key) return f;
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

void finalize(RunConfig& config) {
  config.experiment.backbone.input = config.experiment.benchmark.frame;
  if (config.seeds.empty()) throw ConfigError("seeds: list must not be empty");
  config.experiment.validate();
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.push_back(f.key());
  return out;
}

RunConfig parse_config(const std::string& text) {
  RunConfig config;
  std::set<std::string> seen;
  std::string section;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(line_no) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      static const std::set<std::string> sections{"dataio", "model", "distill", "memory", "harness"};
      if (!sections.contains(section)) throw ConfigError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = (section.empty() ? "" : section + ".") + trim(line.substr(0, eq));
    if (!seen.insert(key).second) throw ConfigError(where + "duplicate key '" + key + "'");
    try {
      find_field(key).set(config, key, trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  finalize(config);
  return config;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return parse_config(buf.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string serialize_config(const RunConfig& config) {
  std::string out;
  std::string section;
  for (const auto& f : fields()) {
    if (f.section != section) {
      section = f.section;
      out += "\n[" + section + "]\n";
    }
    out += f.name + " = " + f.get(config) + "\n";
  }
  return out;
}

void apply_override(RunConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + assignment + "'");
  const std::string key = trim(assignment.substr(0, eq));
  find_field(key).set(config, key, trim(assignment.substr(eq + 1)));
}

std::string config_hash(const RunConfig& config) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : serialize_config(config)) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace civc::cli
