#include "civc/dataio.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "civc/errors.hpp"

namespace civc::dataio {

namespace {

struct PairEntry {
  ShapeKind shape;
  MotionKind motion;
};

// Each entry expands to two classes: the motion and its time reversal.
constexpr std::array<PairEntry, 16> kPairs = {{
    {ShapeKind::square, MotionKind::left},        {ShapeKind::circle, MotionKind::left},
    {ShapeKind::triangle, MotionKind::left},      {ShapeKind::bar, MotionKind::left},
    {ShapeKind::square, MotionKind::up},          {ShapeKind::circle, MotionKind::up},
    {ShapeKind::triangle, MotionKind::up},        {ShapeKind::bar, MotionKind::up},
    {ShapeKind::square, MotionKind::grow},        {ShapeKind::circle, MotionKind::grow},
    {ShapeKind::triangle, MotionKind::grow},      {ShapeKind::bar, MotionKind::grow},
    {ShapeKind::square, MotionKind::clockwise},   {ShapeKind::circle, MotionKind::clockwise},
    {ShapeKind::triangle, MotionKind::clockwise}, {ShapeKind::bar, MotionKind::clockwise},
}};

constexpr int kSupersample = 4;

bool is_translation(MotionKind m) {
  return m == MotionKind::left || m == MotionKind::right || m == MotionKind::up ||
         m == MotionKind::down;
}
bool is_orbit(MotionKind m) {
  return m == MotionKind::clockwise || m == MotionKind::counterclockwise;
}

// Largest distance from the shape center to its boundary along either axis.
double half_extent(ShapeKind shape, double size) {
  return shape == ShapeKind::bar ? 0.75 * size : 0.5 * size;
}

bool inside(ShapeKind shape, double dy, double dx, double size, bool vertical) {
  const double half = 0.5 * size;
  switch (shape) {
    case ShapeKind::square:
      return std::abs(dy) <= half && std::abs(dx) <= half;
    case ShapeKind::circle:
      return dy * dy + dx * dx <= half * half;
    case ShapeKind::triangle:
      // apex up, base down, height and base both equal to size
      return dy >= -half && dy <= half && std::abs(dx) <= 0.5 * (dy + half);
    case ShapeKind::bar: {
      const double along = vertical ? dy : dx;
      const double across = vertical ? dx : dy;
      return std::abs(along) <= 0.75 * size && std::abs(across) <= 1.0;
    }
  }
  return false;
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b),
                    static_cast<std::uint32_t>(c)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

}  // namespace

MotionKind reversed(MotionKind motion) {
  switch (motion) {
    case MotionKind::left: return MotionKind::right;
    case MotionKind::right: return MotionKind::left;
    case MotionKind::up: return MotionKind::down;
    case MotionKind::down: return MotionKind::up;
    case MotionKind::clockwise: return MotionKind::counterclockwise;
    case MotionKind::counterclockwise: return MotionKind::clockwise;
    case MotionKind::grow: return MotionKind::shrink;
    case MotionKind::shrink: return MotionKind::grow;
  }
  return motion;
}

const char* to_string(ShapeKind shape) {
  switch (shape) {
    case ShapeKind::square: return "square";
    case ShapeKind::circle: return "circle";
    case ShapeKind::triangle: return "triangle";
    case ShapeKind::bar: return "bar";
  }
  return "?";
}

const char* to_string(MotionKind motion) {
  switch (motion) {
    case MotionKind::left: return "left";
    case MotionKind::right: return "right";
    case MotionKind::up: return "up";
    case MotionKind::down: return "down";
    case MotionKind::clockwise: return "clockwise";
    case MotionKind::counterclockwise: return "counterclockwise";
    case MotionKind::grow: return "grow";
    case MotionKind::shrink: return "shrink";
  }
  return "?";
}

std::string ClassSpec::name() const {
  return std::string(to_string(shape)) + "-" + to_string(motion);
}

void BenchmarkConfig::validate() const {
  if (num_classes < 1 || num_classes > 2 * static_cast<int>(kPairs.size()))
    throw ConfigError("dataio.num_classes must be in [1, 32]");
  if (train_per_class < 1) throw ConfigError("dataio.train_per_class must be >= 1");
  if (test_per_class < 1) throw ConfigError("dataio.test_per_class must be >= 1");
  if (frame.height < 4 || frame.width < 4) throw ConfigError("dataio frame size must be >= 4");
  if (frame.channels < 1) throw ConfigError("dataio.channels must be >= 1");
  if (raw_frames < 2) throw ConfigError("dataio.raw_frames must be >= 2");
  if (noise_std < 0.0) throw ConfigError("dataio.noise_std must be >= 0");
  std::set<int> all;
  for (int c = 0; c < num_classes; ++c) all.insert(c);
  split_sessions(all, base_classes, classes_per_session);
}

std::vector<ClassSpec> class_catalog(int num_classes) {
  require(num_classes >= 0 && num_classes <= 2 * static_cast<int>(kPairs.size()),
          "class_catalog: at most 32 classes");
  std::vector<ClassSpec> out;
  for (const auto& pair : kPairs) {
    if (static_cast<int>(out.size()) >= num_classes) break;
    out.push_back({pair.shape, pair.motion});
    if (static_cast<int>(out.size()) >= num_classes) break;
    out.push_back({pair.shape, reversed(pair.motion)});
  }
  return out;
}

MotionParams draw_motion_params(const ClassSpec& spec, const BenchmarkConfig& cfg,
                                std::mt19937_64& rng) {
  MotionParams p;
  const double mid_t = 0.5 * (cfg.raw_frames - 1);
  const double max_h = cfg.frame.height - 1;
  const double max_w = cfg.frame.width - 1;
  p.foreground = uniform(rng, 0.7, 0.95);
  p.background = uniform(rng, 0.05, 0.3);
  p.vertical = uniform(rng, 0.0, 1.0) < 0.5;

  if (is_translation(spec.motion)) {
    p.size = uniform(rng, 3.5, 5.0);
    p.rate = uniform(rng, 0.45, 0.7);
    const double extent = half_extent(spec.shape, p.size);
    const bool horizontal = spec.motion == MotionKind::left || spec.motion == MotionKind::right;
    const double along_max = horizontal ? max_w : max_h;
    const double across_max = horizontal ? max_h : max_w;
    const double lo = extent + p.rate * mid_t;
    const double hi = along_max - extent - p.rate * mid_t;
    const double along = lo <= hi ? uniform(rng, lo, hi) : 0.5 * along_max;
    const double across = extent <= across_max - extent
                              ? uniform(rng, extent, across_max - extent)
                              : 0.5 * across_max;
    p.center_w = horizontal ? along : across;
    p.center_h = horizontal ? across : along;
  } else if (is_orbit(spec.motion)) {
    p.size = uniform(rng, 3.5, 4.5);
    p.radius = uniform(rng, 0.2, 0.28) * std::min(cfg.frame.height, cfg.frame.width);
    p.rate = uniform(rng, 0.12, 0.18);
    p.phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    p.center_h = 0.5 * max_h + uniform(rng, -1.0, 1.0);
    p.center_w = 0.5 * max_w + uniform(rng, -1.0, 1.0);
  } else {
    p.size = uniform(rng, 0.38, 0.5) * std::min(cfg.frame.height, cfg.frame.width);
    p.rate = uniform(rng, 0.4, 0.5) * 7.5 / std::max(mid_t, 1.0);
    p.center_h = 0.5 * max_h + uniform(rng, -1.5, 1.5);
    p.center_w = 0.5 * max_w + uniform(rng, -1.5, 1.5);
  }
  return p;
}

std::vector<Frame> render_motion(const ClassSpec& spec, const MotionParams& params,
                                 const FrameShape& shape, int raw_frames) {
  require(raw_frames >= 1, "render_motion: raw_frames must be >= 1");
  const double mid_t = 0.5 * (raw_frames - 1);
  std::vector<Frame> frames;
  frames.reserve(raw_frames);
  for (int t = 0; t < raw_frames; ++t) {
    const double offset = t - mid_t;
    double ch = params.center_h;
    double cw = params.center_w;
    double size = params.size;
    switch (spec.motion) {
      case MotionKind::left: cw = params.center_w - params.rate * offset; break;
      case MotionKind::right: cw = params.center_w + params.rate * offset; break;
      case MotionKind::up: ch = params.center_h - params.rate * offset; break;
      case MotionKind::down: ch = params.center_h + params.rate * offset; break;
      case MotionKind::clockwise:
      case MotionKind::counterclockwise: {
        // rows grow downward, so increasing angle reads as counterclockwise on screen
        const double step = params.rate * offset;
        const double angle = spec.motion == MotionKind::counterclockwise ? params.phase + step
                                                                          : params.phase - step;
        ch = params.center_h - params.radius * std::sin(angle);
        cw = params.center_w + params.radius * std::cos(angle);
        break;
      }
      case MotionKind::grow: size = params.size + params.rate * offset; break;
      case MotionKind::shrink: size = params.size - params.rate * offset; break;
    }
    size = std::max(size, 1.0);

    Frame frame(shape.values());
    for (int h = 0; h < shape.height; ++h) {
      for (int w = 0; w < shape.width; ++w) {
        int hits = 0;
        for (int sh = 0; sh < kSupersample; ++sh) {
          for (int sw = 0; sw < kSupersample; ++sw) {
            const double y = h + (sh + 0.5) / kSupersample - 0.5;
            const double x = w + (sw + 0.5) / kSupersample - 0.5;
            if (inside(spec.shape, y - ch, x - cw, size, params.vertical)) ++hits;
          }
        }
        const double cover = static_cast<double>(hits) / (kSupersample * kSupersample);
        const auto value =
            static_cast<float>(params.background + cover * (params.foreground - params.background));
        for (int c = 0; c < shape.channels; ++c)
          frame[(static_cast<std::size_t>(h) * shape.width + w) * shape.channels + c] = value;
      }
    }
    frames.push_back(std::move(frame));
  }
  return frames;
}

std::vector<std::vector<int>> split_sessions(const std::set<int>& all_classes, int base_count,
                                             int per_session) {
  if (base_count < 0) throw ConfigError("base_classes must be >= 0");
  if (per_session < 1) throw ConfigError("classes_per_session must be >= 1");
  const int total = static_cast<int>(all_classes.size());
  if (base_count > total) throw ConfigError("base_classes exceeds the number of classes");
  if ((total - base_count) % per_session != 0)
    throw ConfigError("number of classes minus base_classes (" +
                      std::to_string(total - base_count) +
                      ") is not divisible by classes_per_session (" +
                      std::to_string(per_session) + ")");
  std::vector<int> ordered(all_classes.begin(), all_classes.end());
  std::vector<std::vector<int>> sessions;
  std::size_t cursor = 0;
  if (base_count > 0) {
    sessions.emplace_back(ordered.begin(), ordered.begin() + base_count);
    cursor = static_cast<std::size_t>(base_count);
  }
  while (cursor < ordered.size()) {
    sessions.emplace_back(ordered.begin() + static_cast<std::ptrdiff_t>(cursor),
                          ordered.begin() + static_cast<std::ptrdiff_t>(cursor + per_session));
    cursor += static_cast<std::size_t>(per_session);
  }
  return sessions;
}

SessionStream generate_synthetic_benchmark(const BenchmarkConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SessionStream stream;
  stream.shape = cfg.frame;
  stream.classes = class_catalog(cfg.num_classes);
  if (cfg.class_order == ClassOrder::shuffled) {
    std::mt19937_64 order_rng(stream_seed(seed, 0xC1A55, 0, 0));
    std::shuffle(stream.classes.begin(), stream.classes.end(), order_rng);
  }

  std::set<int> all;
  for (int c = 0; c < cfg.num_classes; ++c) all.insert(c);
  const auto layout = split_sessions(all, cfg.base_classes, cfg.classes_per_session);

  const int per_class = cfg.train_per_class + cfg.test_per_class;
  for (const auto& labels : layout) {
    Session session;
    session.labels = labels;
    for (int label : labels) {
      const ClassSpec& spec = stream.classes[static_cast<std::size_t>(label)];
      for (int i = 0; i < per_class; ++i) {
        std::mt19937_64 rng(stream_seed(seed, static_cast<std::uint64_t>(label),
                                        static_cast<std::uint64_t>(i), 1));
        const MotionParams params = draw_motion_params(spec, cfg, rng);
        Video video;
        video.id = static_cast<std::uint32_t>(label * per_class + i);
        video.label = label;
        video.shape = cfg.frame;
        video.frames = render_motion(spec, params, cfg.frame, cfg.raw_frames);
        if (cfg.noise_std > 0.0) {
          std::normal_distribution<double> noise(0.0, cfg.noise_std);
          for (auto& frame : video.frames)
            for (auto& v : frame)
              v = static_cast<float>(std::clamp(v + noise(rng), 0.0, 1.0));
        }
        (i < cfg.train_per_class ? session.train : session.test).push_back(std::move(video));
      }
    }
    stream.sessions.push_back(std::move(session));
  }
  return stream;
}

std::vector<int> segment_indices(int raw_frames, int segments, SampleMode mode,
                                 std::mt19937_64* rng) {
  require(segments >= 1, "sample_segments: T must be >= 1");
  require(raw_frames >= 1, "sample_segments: video has no frames");
  require(mode == SampleMode::eval || rng != nullptr, "sample_segments: train mode needs an rng");
  std::vector<int> out(static_cast<std::size_t>(segments));
  for (int i = 0; i < segments; ++i) {
    // center of segment i, ties rounded toward the later frame
    const long center = (static_cast<long>(2 * i + 1) * raw_frames) / (2L * segments);
    int index = static_cast<int>(std::min<long>(center, raw_frames - 1));
    if (mode == SampleMode::train) {
      const int start = static_cast<int>(static_cast<long>(i) * raw_frames / segments);
      const int end = static_cast<int>(static_cast<long>(i + 1) * raw_frames / segments);
      if (end > start) index = std::uniform_int_distribution<int>(start, end - 1)(*rng);
    }
    out[static_cast<std::size_t>(i)] = index;
  }
  return out;
}

Clip sample_segments(const Video& video, int segments, SampleMode mode, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto indices = segment_indices(video.length(), segments, mode, &rng);
  Clip clip;
  clip.shape = video.shape;
  clip.label = video.label;
  clip.source_id = video.id;
  clip.frames.reserve(indices.size());
  for (int index : indices) clip.frames.push_back(video.frames[static_cast<std::size_t>(index)]);
  return clip;
}

// ---------------------------------------------------------------------------
// cache

namespace {

constexpr int kCacheSchema = 1;

std::string video_file(std::uint32_t id) { return "video_" + std::to_string(id) + ".bin"; }

void write_frames(const std::filesystem::path& path, const std::vector<Frame>& frames) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& frame : frames)
    out.write(reinterpret_cast<const char*>(frame.data()),
              static_cast<std::streamsize>(frame.size() * sizeof(float)));
}

std::vector<Frame> read_frames(const std::filesystem::path& path, int count, std::size_t values) {
  const auto expected = static_cast<std::uintmax_t>(count) * values * sizeof(float);
  if (!std::filesystem::exists(path) || std::filesystem::file_size(path) != expected)
    throw std::runtime_error("benchmark cache: bad or missing " + path.string());
  std::ifstream in(path, std::ios::binary);
  std::vector<Frame> frames(static_cast<std::size_t>(count), Frame(values));
  for (auto& frame : frames)
    in.read(reinterpret_cast<char*>(frame.data()),
            static_cast<std::streamsize>(values * sizeof(float)));
  return frames;
}

nlohmann::json video_record(const Video& v) {
  return {{"id", v.id}, {"label", v.label}, {"frames", v.length()}, {"file", video_file(v.id)}};
}

}  // namespace

void save_benchmark(const SessionStream& stream, const std::filesystem::path& dir,
                    const std::string& config_hash) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["schema_version"] = kCacheSchema;
  manifest["config_hash"] = config_hash;
  manifest["shape"] = {{"height", stream.shape.height},
                       {"width", stream.shape.width},
                       {"channels", stream.shape.channels}};
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& spec : stream.classes)
    classes.push_back({{"shape", static_cast<int>(spec.shape)},
                       {"motion", static_cast<int>(spec.motion)},
                       {"name", spec.name()}});
  manifest["classes"] = classes;
  nlohmann::json sessions = nlohmann::json::array();
  for (const auto& session : stream.sessions) {
    nlohmann::json s;
    s["labels"] = session.labels;
    s["train"] = nlohmann::json::array();
    s["test"] = nlohmann::json::array();
    for (const auto& v : session.train) {
      s["train"].push_back(video_record(v));
      write_frames(dir / video_file(v.id), v.frames);
    }
    for (const auto& v : session.test) {
      s["test"].push_back(video_record(v));
      write_frames(dir / video_file(v.id), v.frames);
    }
    sessions.push_back(std::move(s));
  }
  manifest["sessions"] = sessions;
  const auto tmp = dir / "manifest.json.tmp";
  {
    std::ofstream out(tmp);
    out << manifest.dump(1) << '\n';
  }
  std::filesystem::rename(tmp, dir / "manifest.json");
}

SessionStream load_benchmark(const std::filesystem::path& dir, std::string* config_hash) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("benchmark cache: no manifest in " + dir.string());
  const auto manifest = nlohmann::json::parse(in);
  if (manifest.at("schema_version").get<int>() != kCacheSchema)
    throw std::runtime_error("benchmark cache: unsupported schema version");
  if (config_hash) *config_hash = manifest.at("config_hash").get<std::string>();

  SessionStream stream;
  stream.shape.height = manifest.at("shape").at("height").get<int>();
  stream.shape.width = manifest.at("shape").at("width").get<int>();
  stream.shape.channels = manifest.at("shape").at("channels").get<int>();
  for (const auto& c : manifest.at("classes"))
    stream.classes.push_back({static_cast<ShapeKind>(c.at("shape").get<int>()),
                              static_cast<MotionKind>(c.at("motion").get<int>())});
  auto load_video = [&](const nlohmann::json& rec) {
    Video v;
    v.id = rec.at("id").get<std::uint32_t>();
    v.label = rec.at("label").get<int>();
    v.shape = stream.shape;
    v.frames = read_frames(dir / rec.at("file").get<std::string>(), rec.at("frames").get<int>(),
                           stream.shape.values());
    return v;
  };
  for (const auto& s : manifest.at("sessions")) {
    Session session;
    session.labels = s.at("labels").get<std::vector<int>>();
    for (const auto& rec : s.at("train")) session.train.push_back(load_video(rec));
    for (const auto& rec : s.at("test")) session.test.push_back(load_video(rec));
    stream.sessions.push_back(std::move(session));
  }
  return stream;
}

}  // namespace civc::dataio
