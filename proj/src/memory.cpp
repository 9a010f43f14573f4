#include "civc/memory.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "civc/errors.hpp"

namespace civc::memory {

namespace {

constexpr int kStoreSchema = 1;

std::uint64_t frame_bytes(const dataio::FrameShape& shape, int bytes_per_value) {
  return static_cast<std::uint64_t>(shape.values()) * static_cast<std::uint64_t>(bytes_per_value);
}

std::string exemplar_file(int label, std::uint32_t id) {
  return "class_" + std::to_string(label) + "_video_" + std::to_string(id) + ".bin";
}

}  // namespace

const char* to_string(ThresholdForm form) { return form == ThresholdForm::mean ? "mean" : "sum"; }

ThresholdForm parse_threshold_form(const std::string& text) {
  if (text == "mean") return ThresholdForm::mean;
  if (text == "sum") return ThresholdForm::sum;
  throw ConfigError("unknown threshold form '" + text + "' (expected mean or sum)");
}

void MemoryConfig::validate() const {
  if (exemplars_per_class < 1) throw ConfigError("memory.exemplars_per_class must be >= 1");
  if (!(beta >= 0.0)) throw ConfigError("memory.beta must be >= 0");
  if (bytes_per_value < 1) throw ConfigError("memory.bytes_per_value must be >= 1");
}

std::size_t ExemplarStore::exemplar_count() const {
  std::size_t n = 0;
  for (const auto& [label, list] : entries) n += list.size();
  return n;
}

std::vector<double> class_mean(const std::vector<std::vector<double>>& features) {
  require(!features.empty(), "class_mean: empty feature list");
  std::vector<double> mean(features.front().size(), 0.0);
  for (const auto& f : features) {
    require(f.size() == mean.size(), "class_mean: feature dimensions differ");
    for (std::size_t d = 0; d < f.size(); ++d) mean[d] += f[d];
  }
  for (auto& v : mean) v /= static_cast<double>(features.size());
  return mean;
}

std::vector<std::size_t> rank_by_class_mean(const std::vector<std::vector<double>>& features,
                                            const std::vector<std::uint32_t>& ids, int k) {
  if (k < 1) throw ConfigError("exemplars per class must be >= 1");
  require(features.size() == ids.size(), "rank_by_class_mean: ids and features differ in count");
  const auto mean = class_mean(features);
  std::vector<double> dist(features.size());
  for (std::size_t i = 0; i < features.size(); ++i) dist[i] = std::sqrt(squared_distance(features[i], mean));
  std::vector<std::size_t> order(features.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (dist[a] != dist[b]) return dist[a] < dist[b];
    return ids[a] < ids[b];
  });
  order.resize(std::min(order.size(), static_cast<std::size_t>(k)));
  return order;
}

std::map<int, std::vector<std::uint32_t>> select_exemplars(const std::vector<Video>& videos,
                                                           const model::Backbone& backbone, int k) {
  if (k < 1) throw ConfigError("exemplars per class must be >= 1");
  std::map<int, std::vector<std::vector<double>>> features;
  std::map<int, std::vector<std::uint32_t>> ids;
  for (const auto& video : videos) {
    const auto clip = dataio::sample_segments(video, backbone.config.segments, dataio::SampleMode::eval);
    features[video.label].push_back(model::global_average(model::extract_features(backbone, clip)));
    ids[video.label].push_back(video.id);
  }
  std::map<int, std::vector<std::uint32_t>> out;
  for (const auto& [label, feats] : features) {
    const auto& class_ids = ids[label];
    for (std::size_t i : rank_by_class_mean(feats, class_ids, k)) out[label].push_back(class_ids[i]);
  }
  return out;
}

double frame_distance(const Frame& a, const Frame& b) {
  require(a.size() == b.size(), "frame_distance: frame shapes differ");
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    sum += d * d;
  }
  return sum;
}

double keyframe_threshold(const Video& video, double beta, ThresholdForm form) {
  require(beta >= 0.0, "keyframe_threshold: beta must be >= 0");
  if (video.length() < 2) return 0.0;
  double sum = 0.0;
  for (int i = 0; i + 1 < video.length(); ++i)
    sum += frame_distance(video.frames[static_cast<std::size_t>(i)], video.frames[static_cast<std::size_t>(i + 1)]);
  if (form == ThresholdForm::mean) sum /= static_cast<double>(video.length() - 1);
  return beta * sum;
}

std::vector<int> select_keyframes(const Video& video, double beta, ThresholdForm form) {
  require(video.length() >= 1, "select_keyframes: empty video");
  const double threshold = keyframe_threshold(video, beta, form);
  std::vector<int> keys{0};
  for (int t = 1; t < video.length(); ++t) {
    if (frame_distance(video.frames[static_cast<std::size_t>(keys.back())], video.frames[static_cast<std::size_t>(t)]) >
        threshold)
      keys.push_back(t);
  }
  return keys;
}

Exemplar make_exemplar(const Video& video, std::vector<int> keyframe_indices) {
  require(!keyframe_indices.empty() && keyframe_indices.front() == 0,
          "make_exemplar: key-frames must start at frame 0");
  require(std::adjacent_find(keyframe_indices.begin(), keyframe_indices.end(),
                             [](int a, int b) { return a >= b; }) == keyframe_indices.end(),
          "make_exemplar: key-frame indices must be strictly ascending");
  require(keyframe_indices.back() < video.length(), "make_exemplar: key-frame index out of range");
  Exemplar ex;
  ex.source_id = video.id;
  ex.label = video.label;
  ex.shape = video.shape;
  ex.original_length = video.length();
  for (int i : keyframe_indices) ex.keyframes.push_back(video.frames[static_cast<std::size_t>(i)]);
  ex.keyframe_indices = std::move(keyframe_indices);
  return ex;
}

dataio::Clip reconstruct_clip(const Exemplar& exemplar, int segments, dataio::SampleMode mode,
                              std::mt19937_64* rng) {
  require(!exemplar.keyframes.empty(), "reconstruct_clip: exemplar has no key-frames");
  const auto positions = dataio::segment_indices(exemplar.original_length, segments, mode, rng);
  dataio::Clip clip;
  clip.shape = exemplar.shape;
  clip.label = exemplar.label;
  clip.source_id = exemplar.source_id;
  clip.frames.reserve(positions.size());
  const auto& keys = exemplar.keyframe_indices;
  for (int pos : positions) {
    // first key-frame index >= pos; the earlier neighbour wins ties
    auto it = std::lower_bound(keys.begin(), keys.end(), pos);
    std::size_t pick;
    if (it == keys.end()) {
      pick = keys.size() - 1;
    } else if (it == keys.begin()) {
      pick = 0;
    } else {
      const auto after = static_cast<std::size_t>(it - keys.begin());
      pick = (pos - keys[after - 1] <= *it - pos) ? after - 1 : after;
    }
    clip.frames.push_back(exemplar.keyframes[pick]);
  }
  return clip;
}

BudgetStats recount_budget(const ExemplarStore& store) {
  BudgetStats stats;
  for (const auto& [label, list] : store.entries) {
    std::uint64_t bytes = 0;
    for (const auto& ex : list)
      bytes += static_cast<std::uint64_t>(ex.keyframes.size()) * frame_bytes(ex.shape, store.bytes_per_value);
    stats.per_class[label] = bytes;
    stats.total_bytes += bytes;
  }
  return stats;
}

std::uint64_t memory_bytes(const ExemplarStore& store) { return recount_budget(store).total_bytes; }

ExemplarStore update_memory(const ExemplarStore& store, const std::vector<Video>& session_videos,
                            const model::Backbone& backbone, const MemoryConfig& config) {
  config.validate();
  ExemplarStore out = store;
  out.bytes_per_value = config.bytes_per_value;
  for (const auto& video : session_videos)
    if (out.entries.contains(video.label))
      throw ContractViolation("update_memory: class " + std::to_string(video.label) +
                              " is already stored");

  std::map<std::uint32_t, const Video*> by_id;
  for (const auto& video : session_videos) by_id[video.id] = &video;

  const auto selected = select_exemplars(session_videos, backbone, config.exemplars_per_class);
  for (const auto& [label, ids] : selected) {
    auto& list = out.entries[label];
    for (std::uint32_t id : ids) {
      const Video& video = *by_id.at(id);
      std::vector<int> keys;
      if (config.compress) {
        keys = select_keyframes(video, config.beta, config.threshold_form);
      } else {
        keys.resize(static_cast<std::size_t>(video.length()));
        std::iota(keys.begin(), keys.end(), 0);
      }
      list.push_back(make_exemplar(video, std::move(keys)));
    }
  }
  out.budget = recount_budget(out);
  return out;
}

void save_store(const ExemplarStore& store, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["schema_version"] = kStoreSchema;
  manifest["bytes_per_value"] = store.bytes_per_value;
  manifest["total_bytes"] = store.budget.total_bytes;
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& [label, list] : store.entries) {
    nlohmann::json records = nlohmann::json::array();
    for (const auto& ex : list) {
      const std::string file = exemplar_file(label, ex.source_id);
      records.push_back({{"source_id", ex.source_id},
                         {"label", ex.label},
                         {"keyframe_indices", ex.keyframe_indices},
                         {"original_length", ex.original_length},
                         {"shape", {ex.shape.height, ex.shape.width, ex.shape.channels}},
                         {"bytes", ex.keyframes.size() * frame_bytes(ex.shape, store.bytes_per_value)},
                         {"file", file}});
      std::ofstream out(dir / file, std::ios::binary);
      if (!out) throw std::runtime_error("cannot write exemplar file in " + dir.string());
      for (const auto& frame : ex.keyframes)
        out.write(reinterpret_cast<const char*>(frame.data()),
                  static_cast<std::streamsize>(frame.size() * sizeof(float)));
    }
    classes.push_back({{"label", label},
                       {"bytes", store.budget.per_class.count(label) ? store.budget.per_class.at(label) : 0},
                       {"exemplars", records}});
  }
  manifest["classes"] = classes;
  const auto tmp = dir / "manifest.json.tmp";
  {
    std::ofstream out(tmp);
    out << manifest.dump(1) << '\n';
  }
  std::filesystem::rename(tmp, dir / "manifest.json");
}

ExemplarStore load_store(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("exemplar store: no manifest in " + dir.string());
  const auto manifest = nlohmann::json::parse(in);
  if (manifest.at("schema_version").get<int>() != kStoreSchema)
    throw std::runtime_error("exemplar store: unsupported schema version");
  ExemplarStore store;
  store.bytes_per_value = manifest.at("bytes_per_value").get<int>();
  if (store.bytes_per_value != static_cast<int>(sizeof(float)))
    throw std::runtime_error("exemplar store: frames are stored as float32");
  for (const auto& cls : manifest.at("classes")) {
    const int label = cls.at("label").get<int>();
    auto& list = store.entries[label];
    for (const auto& rec : cls.at("exemplars")) {
      Exemplar ex;
      ex.source_id = rec.at("source_id").get<std::uint32_t>();
      ex.label = rec.at("label").get<int>();
      ex.keyframe_indices = rec.at("keyframe_indices").get<std::vector<int>>();
      ex.original_length = rec.at("original_length").get<int>();
      const auto shape = rec.at("shape").get<std::vector<int>>();
      ex.shape = {shape.at(0), shape.at(1), shape.at(2)};
      const auto bytes = rec.at("bytes").get<std::uint64_t>();
      if (bytes != ex.keyframe_indices.size() * frame_bytes(ex.shape, store.bytes_per_value))
        throw std::runtime_error("exemplar store: byte count disagrees with key-frame count");
      const auto path = dir / rec.at("file").get<std::string>();
      if (!std::filesystem::exists(path) || std::filesystem::file_size(path) != bytes)
        throw std::runtime_error("exemplar store: " + path.string() + " has the wrong size");
      std::ifstream data(path, std::ios::binary);
      for (std::size_t i = 0; i < ex.keyframe_indices.size(); ++i) {
        Frame frame(ex.shape.values());
        data.read(reinterpret_cast<char*>(frame.data()),
                  static_cast<std::streamsize>(frame.size() * sizeof(float)));
        ex.keyframes.push_back(std::move(frame));
      }
      list.push_back(std::move(ex));
    }
  }
  store.budget = recount_budget(store);
  if (store.budget.total_bytes != manifest.at("total_bytes").get<std::uint64_t>())
    throw std::runtime_error("exemplar store: total bytes disagree with the manifest");
  return store;
}

}  // namespace civc::memory
