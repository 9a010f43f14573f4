#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace civc::dataio {

/// One raw frame, laid out as H x W x C with intensities in [0,1].
using Frame = std::vector<float>;

struct FrameShape {
  int height = 16;
  int width = 16;
  int channels = 1;

  std::size_t values() const {
    return static_cast<std::size_t>(height) * width * channels;
  }
  bool operator==(const FrameShape&) const = default;
};

enum class ShapeKind { square, circle, triangle, bar };
enum class MotionKind { left, right, up, down, clockwise, counterclockwise, grow, shrink };

/// A class is a (shape, motion) combination. Classes 2i and 2i+1 are time reversals of each other.
struct ClassSpec {
  ShapeKind shape = ShapeKind::square;
  MotionKind motion = MotionKind::left;

  std::string name() const;
  bool operator==(const ClassSpec&) const = default;
};

MotionKind reversed(MotionKind motion);
const char* to_string(ShapeKind shape);
const char* to_string(MotionKind motion);

enum class ClassOrder { fixed, shuffled };

struct BenchmarkConfig {
  int num_classes = 8;
  int train_per_class = 30;
  int test_per_class = 10;
  FrameShape frame;
  int raw_frames = 16;
  int base_classes = 0;
  int classes_per_session = 2;
  double noise_std = 0.05;
  ClassOrder class_order = ClassOrder::fixed;

  /// Throws ConfigError when the layout or sizes are unusable.
  void validate() const;
  bool operator==(const BenchmarkConfig&) const = default;
};

struct Video {
  std::uint32_t id = 0;
  int label = 0;
  FrameShape shape;
  std::vector<Frame> frames;

  int length() const { return static_cast<int>(frames.size()); }
  bool operator==(const Video&) const = default;
};

struct Session {
  std::vector<Video> train;
  std::vector<Video> test;
  std::vector<int> labels;  // ascending

  bool operator==(const Session&) const = default;
};

struct SessionStream {
  std::vector<ClassSpec> classes;  // indexed by label
  std::vector<Session> sessions;
  FrameShape shape;

  bool operator==(const SessionStream&) const = default;
};

struct Clip {
  std::vector<Frame> frames;
  FrameShape shape;
  int label = 0;
  std::uint32_t source_id = 0;

  int length() const { return static_cast<int>(frames.size()); }
  bool operator==(const Clip&) const = default;
};

enum class SampleMode { train, eval };

/// The first `num_classes` classes of the built-in catalog (up to 32), direction pairs adjacent.
std::vector<ClassSpec> class_catalog(int num_classes);

/// Per-video trajectory parameters. Positions are in pixel-index coordinates.
struct MotionParams {
  double center_h = 0.0;
  double center_w = 0.0;
  double size = 4.0;      // shape size at the temporal midpoint
  double rate = 0.5;      // px/frame for translation, rad/frame for orbits, px/frame for growth
  double radius = 0.0;    // orbit radius
  double phase = 0.0;     // orbit angle at the temporal midpoint
  double foreground = 0.85;
  double background = 0.15;
  bool vertical = false;  // bar orientation
};

MotionParams draw_motion_params(const ClassSpec& spec, const BenchmarkConfig& cfg,
                                std::mt19937_64& rng);

/// Noise-free rendering. Reversing the frames of a class equals rendering its reverse class
/// with the same parameters.
std::vector<Frame> render_motion(const ClassSpec& spec, const MotionParams& params,
                                 const FrameShape& shape, int raw_frames);

SessionStream generate_synthetic_benchmark(const BenchmarkConfig& cfg, std::uint64_t seed);

/// Partition `all_classes` (ascending) into session label sets.
/// base_count = 0 means every session holds per_session classes.
std::vector<std::vector<int>> split_sessions(const std::set<int>& all_classes, int base_count,
                                             int per_session);

/// Raw-frame indices picked for each of the T segments.
std::vector<int> segment_indices(int raw_frames, int segments, SampleMode mode,
                                 std::mt19937_64* rng = nullptr);

Clip sample_segments(const Video& video, int segments, SampleMode mode, std::uint64_t seed = 0);

/// Benchmark cache: manifest.json plus one raw float32 file per video.
void save_benchmark(const SessionStream& stream, const std::filesystem::path& dir,
                    const std::string& config_hash);
SessionStream load_benchmark(const std::filesystem::path& dir, std::string* config_hash = nullptr);

}  // namespace civc::dataio
