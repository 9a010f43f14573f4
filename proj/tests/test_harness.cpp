#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "civc/errors.hpp"
#include "civc/harness.hpp"
#include "small_config.hpp"

using namespace civc;
using namespace civc::harness;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("schedule milestones") {
  Schedule s{50, 0.1, {35, 45}, 0.1};
  CHECK(s.lr_at(0) == doctest::Approx(0.1));
  CHECK(s.lr_at(34) == doctest::Approx(0.1));
  CHECK(s.lr_at(35) == doctest::Approx(0.01));
  CHECK(s.lr_at(45) == doctest::Approx(0.001));
  s.milestones = {10, 5};
  CHECK_THROWS_AS(s.validate("base"), ConfigError);
}

TEST_CASE("presets") {
  CHECK(preset_for(Method::ft).transfer == distill::TransferMode::none);
  CHECK_FALSE(preset_for(Method::ft).replay);
  CHECK(preset_for(Method::joint).offline);
  CHECK(preset_for(Method::fused).transfer == distill::TransferMode::fused);
  CHECK_FALSE(preset_for(Method::fused).compress);
  CHECK(preset_for(Method::decomposed_pool).transfer == distill::TransferMode::pool);
  CHECK(preset_for(Method::decomposed_traj).transfer == distill::TransferMode::traj);
  CHECK(preset_for(Method::dual_gra).compress);
  CHECK(preset_for(Method::full).transfer == distill::TransferMode::traj);
  CHECK(preset_for(Method::full).compress);
  for (Method m : all_methods()) CHECK(parse_method(to_string(m)) == m);
  CHECK_THROWS_AS(parse_method("icarl"), ConfigError);
}

TEST_CASE("experiment config validation") {
  auto cfg = test::small_experiment();
  CHECK_NOTHROW(cfg.validate());
  cfg.backbone.input.height = 8;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = test::small_experiment();
  cfg.weights.delta_t = cfg.backbone.segments;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = test::small_experiment();
  cfg.training.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = test::small_experiment();
  cfg.training.grad_clip = -1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("forgetting is first minus last accuracy on session one") {
  std::vector<SessionResult> results(3);
  results[0].acc_on_first = 90.0;
  results[1].acc_on_first = 70.0;
  results[2].acc_on_first = 45.0;
  CHECK(forgetting_rate(results) == doctest::Approx(45.0));
  CHECK(forgetting_rate({results[0]}) == 0.0);
  CHECK_THROWS_AS(forgetting_rate({}), ContractViolation);
}

TEST_CASE("every preset runs end to end with consistent bookkeeping") {
  for (Method m : all_methods()) {
    auto cfg = test::small_experiment();
    cfg.method = m;
    CAPTURE(to_string(m));
    std::vector<std::uint64_t> recounts;
    RunOptions options;
    options.hooks.on_session = [&](const SessionResult& r, const model::Model& model,
                                   const memory::ExemplarStore& store) {
      CHECK(model.head.num_classes() == (preset_for(m).offline ? 4 : r.num_classes));
      CHECK(memory::recount_budget(store) == store.budget);
      for (const auto& [label, list] : store.entries) CHECK(list.size() <= 3u);
      recounts.push_back(memory::memory_bytes(store));
    };
    const auto out = run_benchmark(cfg, options);
    REQUIRE(out.sessions.size() == 2);
    for (std::size_t k = 0; k < out.sessions.size(); ++k) {
      const auto& r = out.sessions[k];
      CHECK(r.session_index == static_cast<int>(k) + 1);
      CHECK(r.num_classes == 2 * (static_cast<int>(k) + 1));
      CHECK(r.acc_per_session.size() == k + 1);
      CHECK(r.acc_on_first == r.acc_per_session.front());
      // equal-size test sets: the union accuracy is the plain mean of the per-session accuracies
      double weighted = 0.0;
      for (double a : r.acc_per_session) weighted += a;
      CHECK(r.acc_seen == doctest::Approx(weighted / static_cast<double>(r.acc_per_session.size())));
      if (!preset_for(m).offline) {
        CHECK(r.mem_bytes == recounts[k]);
        CHECK(r.loss_trace.size() == static_cast<std::size_t>(k == 0 ? 3 : 2));
      }
      for (const auto& e : r.loss_trace) CHECK(std::isfinite(e.loss.total));
    }
    CHECK(out.summary.final_acc == out.sessions.back().acc_seen);
    CHECK(out.summary.forgetting == doctest::Approx(forgetting_rate(out.sessions)));
    CHECK(out.summary.acc_curve.size() == 2);
    if (!preset_for(m).replay && !preset_for(m).offline) CHECK(out.summary.mem_bytes == 0);
    if (preset_for(m).offline) CHECK(out.summary.mem_bytes == 4u * 4u * 256u * 16u * 4u);
  }
}

TEST_CASE("distillation stays off in the base session") {
  auto cfg = test::small_experiment();
  cfg.method = Method::fused;
  const auto out = run_benchmark(cfg);
  for (const auto& e : out.sessions[0].loss_trace) {
    CHECK(e.loss.fkd == 0.0);
    CHECK(e.loss.c_kd == 0.0);
  }
  bool distilled = false;
  for (const auto& e : out.sessions[1].loss_trace) distilled = distilled || e.loss.c_kd > 0.0;
  CHECK(distilled);
}

TEST_CASE("compressed memory is smaller than full-frame memory") {
  auto cfg = test::small_experiment();
  cfg.method = Method::fused;
  const auto fused = run_benchmark(cfg);
  cfg.method = Method::dual_gra;
  const auto dual = run_benchmark(cfg);
  CHECK(dual.summary.mem_bytes < fused.summary.mem_bytes);
  CHECK(fused.sessions.back().exemplars == dual.sessions.back().exemplars);
}

TEST_CASE("incremental training rejects a replaying method without memory") {
  auto cfg = test::small_experiment();
  cfg.method = Method::fused;
  const auto stream = dataio::generate_synthetic_benchmark(cfg.benchmark, cfg.seed);
  const auto base = train_base_session(stream.sessions[0].train, 2, cfg);
  CHECK_THROWS_AS(train_incremental_session(base, stream.sessions[1], nullptr, cfg), ConfigError);
  dataio::Session gap = stream.sessions[1];
  gap.labels = {3, 4};
  memory::ExemplarStore empty;
  CHECK_THROWS_AS(train_incremental_session(base, gap, &empty, cfg), ContractViolation);
}

TEST_CASE("identical config and seed give identical artifacts") {
  auto cfg = test::small_experiment();
  cfg.method = Method::full;
  const auto root = std::filesystem::temp_directory_path() / "civc_test_determinism";
  std::filesystem::remove_all(root);
  RunOptions a, b;
  a.out_dir = root / "a";
  b.out_dir = root / "b";
  run_benchmark(cfg, a);
  run_benchmark(cfg, b);
  for (const char* name : {"summary.json", "results.jsonl", "train_log.jsonl"})
    CHECK(slurp(root / "a" / name) == slurp(root / "b" / name));
  CHECK(slurp(root / "a" / "checkpoints" / "session_2.ckpt") == slurp(root / "b" / "checkpoints" / "session_2.ckpt"));
  CHECK(std::filesystem::exists(root / "a" / "memory" / "session_2" / "manifest.json"));

  cfg.seed = 1;
  RunOptions c;
  c.out_dir = root / "c";
  run_benchmark(cfg, c);
  CHECK(slurp(root / "a" / "train_log.jsonl") != slurp(root / "c" / "train_log.jsonl"));
  std::filesystem::remove_all(root);
}

TEST_CASE("evaluation over the union") {
  auto cfg = test::small_experiment();
  const auto stream = dataio::generate_synthetic_benchmark(cfg.benchmark, 0);
  const auto m = train_base_session(stream.sessions[0].train, 2, cfg);
  std::vector<std::vector<dataio::Video>> sets{stream.sessions[0].test, {stream.sessions[0].test.front()}};
  const auto e = evaluate(m, sets);
  REQUIRE(e.per_set.size() == 2);
  CHECK(e.per_set_size == std::vector<std::size_t>{stream.sessions[0].test.size(), 1});
  const double hits = e.per_set[0] / 100.0 * e.per_set_size[0] + e.per_set[1] / 100.0;
  CHECK(e.overall == doctest::Approx(100.0 * hits / (e.per_set_size[0] + 1)));
}
