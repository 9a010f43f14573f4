#include <doctest.h>

#include <filesystem>
#include <random>

#include "civc/dataio.hpp"
#include "civc/errors.hpp"
#include "civc/memory.hpp"

using namespace civc;
using namespace civc::memory;

namespace {

Video make_video(std::vector<Frame> frames, dataio::FrameShape shape, int label = 0, std::uint32_t id = 0) {
  Video v;
  v.id = id;
  v.label = label;
  v.shape = shape;
  v.frames = std::move(frames);
  return v;
}

Video random_video(std::mt19937_64& rng, int length = 16, std::uint32_t id = 0) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<Frame> frames(static_cast<std::size_t>(length), Frame(16));
  for (auto& f : frames)
    for (auto& v : f) v = u(rng);
  return make_video(std::move(frames), {4, 4, 1}, 0, id);
}

std::uint64_t recount(const ExemplarStore& store) {
  std::uint64_t total = 0;
  for (const auto& [label, list] : store.entries)
    for (const auto& ex : list)
      for (const auto& f : ex.keyframes) total += f.size() * static_cast<std::uint64_t>(store.bytes_per_value);
  return total;
}

dataio::BenchmarkConfig tiny_benchmark() {
  dataio::BenchmarkConfig cfg;
  cfg.num_classes = 4;
  cfg.train_per_class = 12;
  cfg.test_per_class = 2;
  return cfg;
}

}  // namespace

TEST_CASE("class mean") {
  CHECK(class_mean({{1.0, 2.0}}) == std::vector<double>{1.0, 2.0});
  CHECK(class_mean({{1.0, -2.0}, {-1.0, 2.0}}) == std::vector<double>{0.0, 0.0});
  const auto m = class_mean({{1.0, 2.0}, {3.0, 5.0}, {-1.0, 2.0}});
  CHECK(m[0] == doctest::Approx(1.0));
  CHECK(m[1] == doctest::Approx(3.0));
  CHECK_THROWS_AS(class_mean({}), ContractViolation);
}

TEST_CASE("ranking by distance to the class mean") {
  const std::vector<std::vector<double>> feats{{0.0}, {1.0}, {10.0}};
  CHECK(rank_by_class_mean(feats, {5, 6, 7}, 2) == std::vector<std::size_t>{1, 0});
  CHECK(rank_by_class_mean(feats, {5, 6, 7}, 10) == std::vector<std::size_t>{1, 0, 2});
  // equidistant from the mean: the smaller id wins
  CHECK(rank_by_class_mean({{-1.0}, {1.0}}, {9, 4}, 1) == std::vector<std::size_t>{1});
  CHECK(rank_by_class_mean({{-1.0}, {1.0}}, {3, 4}, 1) == std::vector<std::size_t>{0});
  CHECK_THROWS_AS(rank_by_class_mean(feats, {5, 6, 7}, 0), ConfigError);
}

TEST_CASE("frame distance") {
  const Frame a(256, 0.25f), b(256, 1.25f);
  CHECK(frame_distance(a, a) == 0.0);
  CHECK(frame_distance(a, b) == doctest::Approx(256.0));
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (int trial = 0; trial < 20; ++trial) {
    Frame x(4), y(4);
    double want = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
      x[i] = u(rng);
      y[i] = u(rng);
      want += (double(x[i]) - y[i]) * (double(x[i]) - y[i]);
    }
    CHECK(frame_distance(x, y) == doctest::Approx(want).epsilon(1e-12));
  }
  CHECK_THROWS_AS(frame_distance(Frame(4), Frame(5)), ContractViolation);
}

TEST_CASE("key-frame threshold and selection") {
  const dataio::FrameShape pair{1, 2, 1};
  // consecutive distances 4, 4, 4; d(f0, f2) = 8
  const auto ramp = make_video({{0, 0}, {2, 0}, {2, 2}, {2, 4}}, pair);
  CHECK(keyframe_threshold(ramp, 1.0) == doctest::Approx(4.0));
  CHECK(keyframe_threshold(ramp, 1.0, ThresholdForm::sum) == doctest::Approx(12.0));
  CHECK(select_keyframes(ramp, 1.0) == std::vector<int>{0, 2});
  CHECK(select_keyframes(ramp, 0.0) == std::vector<int>{0, 1, 2, 3});
  CHECK(keyframe_threshold(ramp, 0.0) == 0.0);

  const auto still = make_video(std::vector<Frame>(5, Frame{0.3f, 0.3f}), pair);
  CHECK(keyframe_threshold(still, 0.9) == 0.0);
  CHECK(select_keyframes(still, 0.9) == std::vector<int>{0});
  CHECK(select_keyframes(still, 0.0) == std::vector<int>{0});

  const auto single = make_video({{1, 1}}, pair);
  CHECK(keyframe_threshold(single, 0.9) == 0.0);
  CHECK(select_keyframes(single, 0.9) == std::vector<int>{0});
}

TEST_CASE("key-frame count is nonincreasing in beta") {
  std::mt19937_64 rng(3);
  dataio::BenchmarkConfig cfg;
  const auto catalog = dataio::class_catalog(32);
  for (int v = 0; v < 50; ++v) {
    const auto& spec = catalog[static_cast<std::size_t>(v % 32)];
    const auto frames = dataio::render_motion(spec, dataio::draw_motion_params(spec, cfg, rng), cfg.frame, cfg.raw_frames);
    const auto video = make_video(frames, cfg.frame);
    std::size_t previous = static_cast<std::size_t>(video.length()) + 1;
    for (int i = 0; i < 10; ++i) {
      const auto kf = select_keyframes(video, 0.25 * i);
      CHECK(kf.front() == 0);
      CHECK(kf.back() < video.length());
      CHECK(kf.size() <= previous);
      previous = kf.size();
    }
  }
}

TEST_CASE("exemplar construction and reconstruction") {
  std::mt19937_64 rng(4);
  const auto video = random_video(rng);
  const auto ex = make_exemplar(video, {0, 8});
  CHECK(ex.keyframes.size() == 2);
  CHECK(ex.original_length == 16);
  const auto clip = reconstruct_clip(ex, 4);
  REQUIRE(clip.length() == 4);
  CHECK(clip.frames[0] == video.frames[0]);
  CHECK(clip.frames[1] == video.frames[8]);  // center 6 lies nearer index 8
  CHECK(clip.frames[2] == video.frames[8]);
  CHECK(clip.frames[3] == video.frames[8]);

  // equidistant center goes to the earlier key-frame
  CHECK(reconstruct_clip(make_exemplar(video, {0, 4}), 8).frames[1] == video.frames[4]);
  CHECK(reconstruct_clip(make_exemplar(video, {0, 6}), 8).frames[1] == video.frames[0]);
  CHECK(reconstruct_clip(make_exemplar(video, {0, 2}), 8).frames[0] == video.frames[0]);
  CHECK(reconstruct_clip(make_exemplar(video, {0, 2, 4}), 16).frames[3] == video.frames[2]);
  CHECK(reconstruct_clip(make_exemplar(video, {0, 2}), 16).frames[1] == video.frames[0]);

  std::vector<int> all(16);
  for (int i = 0; i < 16; ++i) all[i] = i;
  for (int T : {4, 8, 16}) {
    const auto full = reconstruct_clip(make_exemplar(video, all), T);
    CHECK(full.frames == dataio::sample_segments(video, T, dataio::SampleMode::eval).frames);
  }
  const auto one = reconstruct_clip(make_exemplar(video, {0}), 8);
  for (const auto& f : one.frames) CHECK(f == video.frames[0]);

  std::mt19937_64 clip_rng(5);
  CHECK(reconstruct_clip(ex, 8, dataio::SampleMode::train, &clip_rng).length() == 8);

  CHECK_THROWS_AS(make_exemplar(video, {1, 3}), ContractViolation);
  CHECK_THROWS_AS(make_exemplar(video, {0, 3, 3}), ContractViolation);
  CHECK_THROWS_AS(make_exemplar(video, {0, 16}), ContractViolation);
  CHECK_THROWS_AS(make_exemplar(video, {}), ContractViolation);
}

TEST_CASE("memory bytes") {
  ExemplarStore store;
  CHECK(memory_bytes(store) == 0);
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<Frame> frames(3, Frame(256));
  for (auto& f : frames)
    for (auto& v : f) v = u(rng);
  const auto video = make_video(frames, {16, 16, 1});
  store.entries[0].push_back(make_exemplar(video, {0, 1, 2}));
  CHECK(memory_bytes(store) == 3072);
  CHECK(recount_budget(store).total_bytes == 3072);
  CHECK(recount_budget(store).per_class.at(0) == 3072);
}

TEST_CASE("update_memory over a generated session") {
  const auto stream = dataio::generate_synthetic_benchmark(tiny_benchmark(), 2);
  const auto backbone = model::init_backbone(model::BackboneConfig{}, 3);
  MemoryConfig cfg;
  cfg.exemplars_per_class = 5;

  const auto first = update_memory({}, stream.sessions[0].train, backbone, cfg);
  CHECK(first.entries.size() == 2);
  for (const auto& [label, list] : first.entries) {
    CHECK(list.size() == 5);
    for (const auto& ex : list) {
      CHECK(ex.label == label);
      CHECK(ex.keyframe_indices.front() == 0);
    }
  }
  CHECK(first.budget == recount_budget(first));
  CHECK(memory_bytes(first) == recount(first));

  const auto second = update_memory(first, stream.sessions[1].train, backbone, cfg);
  CHECK(second.entries.size() == 4);
  CHECK(second.entries.at(0) == first.entries.at(0));
  CHECK(memory_bytes(second) == recount(second));
  CHECK_THROWS_AS(update_memory(second, stream.sessions[1].train, backbone, cfg), ContractViolation);

  // the selection only depends on the ranking, compression only on beta
  MemoryConfig raw = cfg;
  raw.compress = false;
  const auto uncompressed = update_memory({}, stream.sessions[0].train, backbone, raw);
  MemoryConfig zero = cfg;
  zero.beta = 0.0;
  const auto beta0 = update_memory({}, stream.sessions[0].train, backbone, zero);
  CHECK(memory_bytes(beta0) == memory_bytes(uncompressed));
  CHECK(memory_bytes(first) < memory_bytes(uncompressed));
  MemoryConfig huge = cfg;
  huge.beta = 1e9;
  const auto squeezed = update_memory({}, stream.sessions[0].train, backbone, huge);
  CHECK(memory_bytes(squeezed) == squeezed.exemplar_count() * 256 * 4);

  // full retention replays the original eval clip exactly
  for (const auto& [label, list] : uncompressed.entries)
    for (const auto& ex : list) {
      const auto it = std::find_if(stream.sessions[0].train.begin(), stream.sessions[0].train.end(),
                                   [&](const Video& v) { return v.id == ex.source_id; });
      REQUIRE(it != stream.sessions[0].train.end());
      CHECK(reconstruct_clip(ex, 8).frames == dataio::sample_segments(*it, 8, dataio::SampleMode::eval).frames);
    }

  MemoryConfig big = cfg;
  big.exemplars_per_class = 100;
  for (const auto& [label, list] : update_memory({}, stream.sessions[0].train, backbone, big).entries)
    CHECK(list.size() == 12);
}

TEST_CASE("exemplar store round-trip") {
  const auto stream = dataio::generate_synthetic_benchmark(tiny_benchmark(), 8);
  const auto backbone = model::init_backbone(model::BackboneConfig{}, 1);
  const auto store = update_memory({}, stream.sessions[0].train, backbone, MemoryConfig{});
  const auto dir = std::filesystem::temp_directory_path() / "civc_test_store";
  std::filesystem::remove_all(dir);
  save_store(store, dir);
  CHECK(load_store(dir) == store);

  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.path().extension() == ".bin") {
      std::filesystem::resize_file(entry.path(), 12);
      break;
    }
  CHECK_THROWS(load_store(dir));
  std::filesystem::remove_all(dir);
  CHECK_THROWS(load_store(dir));
}

TEST_CASE("memory config validation") {
  MemoryConfig cfg;
  cfg.exemplars_per_class = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.beta = -0.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK(parse_threshold_form("sum") == ThresholdForm::sum);
  CHECK_THROWS_AS(parse_threshold_form("median"), ConfigError);
}
