#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "civc/dataio.hpp"
#include "civc/model.hpp"

namespace civc::memory {

using dataio::Frame;
using dataio::Video;

/// How the key-frame threshold aggregates consecutive-frame distances.
enum class ThresholdForm { mean, sum };

const char* to_string(ThresholdForm form);
ThresholdForm parse_threshold_form(const std::string& text);

struct MemoryConfig {
  int exemplars_per_class = 10;
  double beta = 0.9;
  ThresholdForm threshold_form = ThresholdForm::mean;
  bool compress = true;  // false keeps every frame of a selected exemplar
  int bytes_per_value = 4;

  void validate() const;
  bool operator==(const MemoryConfig&) const = default;
};

struct Exemplar {
  std::uint32_t source_id = 0;
  int label = 0;
  dataio::FrameShape shape;
  std::vector<Frame> keyframes;
  std::vector<int> keyframe_indices;  // strictly ascending, starts at 0
  int original_length = 0;

  bool operator==(const Exemplar&) const = default;
};

struct BudgetStats {
  std::uint64_t total_bytes = 0;
  std::map<int, std::uint64_t> per_class;

  bool operator==(const BudgetStats&) const = default;
};

struct ExemplarStore {
  std::map<int, std::vector<Exemplar>> entries;
  BudgetStats budget;
  int bytes_per_value = 4;

  std::size_t exemplar_count() const;
  bool operator==(const ExemplarStore&) const = default;
};

std::vector<double> class_mean(const std::vector<std::vector<double>>& features);

/// Indices into `features` of the K items nearest the mean, nearest first; ties go to the
/// smaller id.
std::vector<std::size_t> rank_by_class_mean(const std::vector<std::vector<double>>& features,
                                            const std::vector<std::uint32_t>& ids, int k);

/// Per class, the ids of the K videos whose pooled eval-clip features are nearest the class mean.
std::map<int, std::vector<std::uint32_t>> select_exemplars(const std::vector<Video>& videos,
                                                           const model::Backbone& backbone, int k);

/// Sum of squared differences over all pixels and channels.
double frame_distance(const Frame& a, const Frame& b);

/// beta * mean (or sum) of consecutive-frame distances; 0 for a single-frame video.
double keyframe_threshold(const Video& video, double beta,
                          ThresholdForm form = ThresholdForm::mean);

/// Greedy scan: a frame becomes a key-frame when its distance to the newest key-frame
/// strictly exceeds the threshold.
std::vector<int> select_keyframes(const Video& video, double beta,
                                  ThresholdForm form = ThresholdForm::mean);

Exemplar make_exemplar(const Video& video, std::vector<int> keyframe_indices);

/// Eval mode maps each segment center to the nearest key-frame (ties to the earlier one).
/// Train mode draws a random position inside each segment first.
dataio::Clip reconstruct_clip(const Exemplar& exemplar, int segments,
                              dataio::SampleMode mode = dataio::SampleMode::eval,
                              std::mt19937_64* rng = nullptr);

/// Selects and compresses exemplars for the classes in `session_videos` and appends them.
/// Classes already in the store are a contract violation.
ExemplarStore update_memory(const ExemplarStore& store, const std::vector<Video>& session_videos,
                            const model::Backbone& backbone, const MemoryConfig& config);

/// Bytes of stored frame data, recounted from the entries (indices and metadata excluded).
std::uint64_t memory_bytes(const ExemplarStore& store);
BudgetStats recount_budget(const ExemplarStore& store);

/// manifest.json plus one binary file of key-frames per exemplar.
void save_store(const ExemplarStore& store, const std::filesystem::path& dir);
ExemplarStore load_store(const std::filesystem::path& dir);

}  // namespace civc::memory
