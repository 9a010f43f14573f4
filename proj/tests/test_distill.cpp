#include <doctest.h>

#include <cmath>
#include <random>

#include "civc/distill.hpp"
#include "civc/errors.hpp"
#include "civc/trajectory.hpp"
#include "oracles.hpp"

using namespace civc;
using namespace civc::distill;

namespace {

std::vector<double> random_filter(int dt, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> w(static_cast<std::size_t>(2 * dt + 1));
  for (auto& v : w) v = u(rng);
  return w;
}

double squared(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

}  // namespace

TEST_CASE("cross-entropy values") {
  const std::vector<double> uniform(4, 0.3);
  CHECK(ce_loss(uniform, 2) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(ce_loss(std::vector<double>{1.0, 0.0, 0.0}, 0) == doctest::Approx(0.5514).epsilon(1e-4));
  CHECK(ce_loss(std::vector<double>{40.0, 0.0, 0.0}, 0) < 1e-15);
  CHECK_THROWS_AS(ce_loss(uniform, 4), ContractViolation);
  CHECK_THROWS_AS(ce_loss(uniform, -1), ContractViolation);

  const std::vector<std::vector<double>> batch{{1.0, 0.0, 0.0}, {0.0, 0.0, 0.0}};
  const std::vector<int> labels{0, 1};
  CHECK(ce_loss(batch, labels) == doctest::Approx((0.5514469 + std::log(3.0)) / 2).epsilon(1e-6));
}

TEST_CASE("classifier distillation values") {
  const std::vector<double> teacher{2.0, 0.0}, student{0.0, 2.0};
  CHECK(classifier_kd_loss(student, teacher, 2, 2.0) == doctest::Approx(1.0443).epsilon(1e-4));
  CHECK(classifier_kd_loss(student, teacher, 0, 2.0) == 0.0);

  // only the first n_old logits take part
  const std::vector<double> s3{0.0, 2.0, 9.0}, t3{2.0, 0.0, -4.0};
  CHECK(classifier_kd_loss(s3, t3, 2, 2.0) == doctest::Approx(1.0443).epsilon(1e-4));
  CHECK_THROWS_AS(classifier_kd_loss(s3, t3, 4, 2.0), ContractViolation);
}

TEST_CASE("classifier distillation is stationary at the teacher") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 3.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> logits(6);
    for (auto& v : logits) v = n(rng);
    std::vector<double> grad(6, 0.0);
    const int n_old = 1 + trial % 5;
    const double loss = classifier_kd_loss(logits, logits, n_old, 2.0, grad);
    double entropy = 0.0, z = 0.0;
    for (int s = 0; s < n_old; ++s) z += std::exp(logits[s] / 2.0);
    for (int s = 0; s < n_old; ++s) {
      const double p = std::exp(logits[s] / 2.0) / z;
      entropy -= p * std::log(p);
    }
    CHECK(loss == doctest::Approx(entropy).epsilon(1e-10));
    double norm = 0.0;
    for (double g : grad) norm += g * g;
    CHECK(std::sqrt(norm) < 1e-6);
  }
}

TEST_CASE("fused feature distillation") {
  std::mt19937_64 rng(1);
  const auto a = oracle::random_map(2, 2, 2, 2, rng);
  CHECK(fused_feature_kd(a, a) == 0.0);
  auto b = a;
  for (auto& v : b.data) v += 1.0;
  CHECK(fused_feature_kd(b, a) == doctest::Approx(16.0).epsilon(1e-12));
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = oracle::random_map(2, 2, 2, 2, rng), y = oracle::random_map(2, 2, 2, 2, rng);
    CHECK(std::abs(fused_feature_kd(x, y) - oracle::fused_kd(x, y)) < 1e-12);
  }
  CHECK_THROWS_AS(fused_feature_kd(a, FeatureMap(2, 2, 2, 3)), ContractViolation);
}

TEST_CASE("pooling decomposition matches loop oracles") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = oracle::random_map(2, 2, 2, 2, rng);
    CHECK(oracle::max_abs_diff(phi_sf_pool(x).data, oracle::mean_over_t(x)) < 1e-12);
    CHECK(oracle::max_abs_diff(phi_sf_pool(x, PoolOp::max).data, oracle::max_over_t(x)) < 1e-12);
    const auto parts = phi_tf_pool(x);
    CHECK(oracle::max_abs_diff(parts.over_width.data, oracle::mean_over_w(x)) < 1e-12);
    CHECK(oracle::max_abs_diff(parts.over_height.data, oracle::mean_over_h(x)) < 1e-12);
    REQUIRE(parts.stacked().has_value());
    CHECK(parts.stacked()->shape == std::vector<int>{2, 2, 2, 2});
  }

  const auto single = oracle::random_map(3, 1, 2, 2, rng);
  CHECK(phi_sf_pool(single).data == single.data);
  const FeatureMap flat(2, 3, 2, 2, 1.5);
  for (double v : phi_sf_pool(flat).data) CHECK(v == 1.5);
  for (double v : phi_tf_pool(flat).over_width.data) CHECK(v == 1.5);
  for (double v : phi_tf_pool(flat).over_height.data) CHECK(v == 1.5);

  const auto point = oracle::random_map(4, 1, 1, 1, rng);
  CHECK(phi_tf_pool(point).over_width.data == point.data);
  CHECK(phi_tf_pool(point).over_height.data == point.data);

  CHECK_FALSE(phi_tf_pool(oracle::random_map(1, 2, 2, 3, rng)).stacked().has_value());
}

TEST_CASE("trajectory tracking") {
  const auto right = oracle::uniform_fields(4, 4, 4, {{0, 1}, {0, 1}, {0, 1}, {0, 0}}, {{0, 0}, {0, -1}, {0, -1}, {0, -1}});
  CHECK(traj_track({1, 1}, right, 0, 2) == GridPoint{1, 3});
  CHECK(traj_track({1, 1}, right, 1, 0) == GridPoint{1, 1});
  CHECK(traj_track({1, 3}, right, 2, -2) == GridPoint{1, 1});
  CHECK(traj_track({2, 2}, right, 0, 3) == GridPoint{2, 3});  // clamped at the border
  CHECK_THROWS_AS(traj_track({0, 0}, right, 2, 2), ContractViolation);
  CHECK_THROWS_AS(traj_track({0, 0}, right, 0, -1), ContractViolation);

  const model::MotionFields zero(4, 3, 3);
  for (int tau = -2; tau <= 3; ++tau)
    if (tau >= 0) CHECK(traj_track({1.5, 0.25}, zero, 0, tau) == GridPoint{1.5, 0.25});

  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    const auto f = oracle::random_fields(4, 3, 4, rng, 1.5);
    std::uniform_real_distribution<double> h(0.0, 2.0), w(0.0, 3.0);
    const GridPoint p{h(rng), w(rng)};
    const int t = trial % 4;
    for (int tau = -t; t + tau < 4; ++tau) {
      const auto got = traj_track(p, f, t, tau);
      const auto want = oracle::track({p.h, p.w}, f, t, tau);
      CHECK(std::abs(got.h - want.h) < 1e-12);
      CHECK(std::abs(got.w - want.w) < 1e-12);
    }
  }
}

TEST_CASE("traj_align matches the brute-force oracle on every small shape") {
  std::mt19937_64 rng(17);
  double worst = 0.0;
  for (int c = 1; c <= 2; ++c)
    for (int t = 2; t <= 3; ++t)
      for (int h = 1; h <= 2; ++h)
        for (int w = 1; w <= 2; ++w)
          for (int dt = 1; dt < t; ++dt)
            for (int trial = 0; trial < 40; ++trial) {
              const auto x = oracle::random_map(c, t, h, w, rng);
              const auto fields = trial % 2 ? oracle::random_integer_fields(t, h, w, rng)
                                            : oracle::random_fields(t, h, w, rng, 1.0);
              const auto filter = random_filter(dt, rng);
              const auto got = traj_align(x, fields, filter, dt);
              const auto want = oracle::traj_align(x, fields, filter, dt);
              worst = std::max(worst, oracle::max_abs_diff(got.data, want.data));
            }
  CHECK(worst < 1e-6);
}

TEST_CASE("traj_align reductions") {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 30; ++trial) {
    const auto x = oracle::random_map(2, 4, 3, 3, rng);
    const auto fields = oracle::random_fields(4, 3, 3, rng, 2.0);
    for (int dt : {1, 2}) {
      std::vector<double> one_hot(static_cast<std::size_t>(2 * dt + 1), 0.0);
      one_hot[static_cast<std::size_t>(dt)] = 1.0;
      CHECK(traj_align(x, fields, one_hot, dt).data == x.data);
    }
  }

  // zero motion, averaging filter: centered box filter with clamped ends
  const auto x = oracle::random_map(1, 3, 2, 2, rng);
  const model::MotionFields zero(3, 2, 2);
  const auto box = traj_align(x, zero, averaging_filter(1), 1);
  for (int h = 0; h < 2; ++h)
    for (int w = 0; w < 2; ++w) {
      CHECK(box.at(0, 0, h, w) == doctest::Approx((2 * x.at(0, 0, h, w) + x.at(0, 1, h, w)) / 3));
      CHECK(box.at(0, 1, h, w) == doctest::Approx((x.at(0, 0, h, w) + x.at(0, 1, h, w) + x.at(0, 2, h, w)) / 3));
    }

  // time-constant map with zero motion
  FeatureMap still(2, 4, 3, 3);
  const auto slice = oracle::random_map(2, 1, 3, 3, rng);
  for (int c = 0; c < 2; ++c)
    for (int t = 0; t < 4; ++t)
      for (int h = 0; h < 3; ++h)
        for (int w = 0; w < 3; ++w) still.at(c, t, h, w) = slice.at(c, 0, h, w);
  const model::MotionFields none(4, 3, 3);
  CHECK(phi_sf_traj(still, none, averaging_filter(1), 1) == phi_sf_pool(still));
  const auto proj = Projection::random(descriptor_size(1), 8, 5);
  for (double v : phi_tf_traj(none, proj, 1).data) CHECK(v == 0.0);
}

TEST_CASE("traj_align hand-traced sample") {
  // 1x3x2x2 map, constant (0,+1) forward field, w = (0,0,1)
  std::mt19937_64 rng(4);
  const auto x = oracle::random_map(1, 3, 2, 2, rng);
  const auto fields = oracle::uniform_fields(3, 2, 2, {{0, 1}, {0, 1}, {0, 0}}, {{0, 0}, {0, -1}, {0, -1}});
  const std::vector<double> last{0.0, 0.0, 1.0};
  const auto out = traj_align(x, fields, last, 1);
  CHECK(out.at(0, 0, 0, 0) == x.at(0, 1, 0, 1));
  CHECK_THROWS_AS(traj_align(x, fields, std::vector<double>{1.0, 0.0}, 1), ContractViolation);
  CHECK_THROWS_AS(traj_align(x, fields, averaging_filter(3), 3), ContractViolation);
}

TEST_CASE("phi_tf_traj: descriptor order, appearance invariance, oracle") {
  // single point, constant (0,+1) forward and (0,-1) backward motion
  const auto fields = oracle::uniform_fields(3, 1, 1, {{0, 1}, {0, 1}, {0, 0}}, {{0, 0}, {0, -1}, {0, -1}});
  const auto plan = plan_trajectories(fields, 1);
  const auto desc = trajectory_descriptor(fields, plan, 1, 0, 0);
  CHECK(desc == std::vector<double>{0, 1, 0, 0, 0, 1, 0, -1, 0, 0, 0, -1});
  const auto proj = Projection::random(12, 8, 77);
  const auto out = phi_tf_traj(fields, proj, 1);
  for (int o = 0; o < 8; ++o) {
    double want = 0.0;
    for (int d = 0; d < 12; ++d) want += proj.weight[o * 12 + d] * desc[d];
    CHECK(out.at(o, 1, 0, 0) == doctest::Approx(want).epsilon(1e-14));
  }

  std::mt19937_64 rng(41);
  double worst = 0.0;
  for (int t = 2; t <= 3; ++t)
    for (int h = 1; h <= 2; ++h)
      for (int w = 1; w <= 2; ++w)
        for (int trial = 0; trial < 30; ++trial) {
          const auto track = trial % 2 ? oracle::random_integer_fields(t, h, w, rng)
                                       : oracle::random_fields(t, h, w, rng, 1.0);
          const auto gathered = oracle::random_fields(t, h, w, rng, 2.0);
          const auto p = Projection::random(descriptor_size(1), 3, static_cast<std::uint64_t>(trial));
          const auto got = phi_tf_traj(gathered, plan_trajectories(track, 1), p);
          const auto want = oracle::phi_tf_traj(gathered, track, p, 1);
          worst = std::max(worst, oracle::max_abs_diff(got.data, want.data));
          CHECK(phi_tf_traj(track, p, 1) == phi_tf_traj(track, plan_trajectories(track, 1), p));
        }
  CHECK(worst < 1e-6);
}

TEST_CASE("decomposed distillation on a hand-built 1x2x1x1 map") {
  FeatureMap student(1, 2, 1, 1), teacher(1, 2, 1, 1);
  student.data = {1.0, 3.0};
  teacher.data = {0.0, 0.0};
  LossWeights w;
  const auto constants = DistillConstants::make(1, 8, 0);
  FeatureKdTerms terms;
  CHECK(fused_feature_kd(student, teacher) == doctest::Approx(10.0));
  // spatial: (2 - 0)^2, temporal: both pooled parts equal the map itself
  CHECK(decomposed_fkd_loss(student, teacher, TransferMode::pool, w, constants, nullptr, &terms) ==
        doctest::Approx(24.0));
  CHECK(terms.spatial == doctest::Approx(4.0));
  CHECK(terms.temporal == doctest::Approx(20.0));
  w.lambda = 0.0;
  CHECK(decomposed_fkd_loss(student, teacher, TransferMode::pool, w, constants) == doctest::Approx(4.0));
  CHECK_THROWS_AS(decomposed_fkd_loss(student, teacher, TransferMode::fused, w, constants), ConfigError);
}

TEST_CASE("decomposed traj distillation matches the composed oracles") {
  std::mt19937_64 rng(61);
  LossWeights w;
  w.lambda = 0.7;
  const auto constants = DistillConstants::make(1, 8, 12);
  for (int trial = 0; trial < 10; ++trial) {
    const auto teacher = oracle::random_map(3, 4, 4, 4, rng, 0.0, 2.0);
    auto student = teacher;
    std::normal_distribution<double> n(0.0, 0.3);
    for (auto& v : student.data) v += n(rng);
    const auto ft = model::estimate_motion_field(teacher, constants.motion);
    const auto fs = model::estimate_motion_field(student, constants.motion);
    const double sf = squared(oracle::mean_over_t(oracle::traj_align(student, ft, constants.filter, 1)),
                              oracle::mean_over_t(oracle::traj_align(teacher, ft, constants.filter, 1)));
    const double tf = squared(oracle::phi_tf_traj(fs, ft, constants.projection, 1).data,
                              oracle::phi_tf_traj(ft, ft, constants.projection, 1).data);
    FeatureKdTerms terms;
    const double loss = decomposed_fkd_loss(student, teacher, TransferMode::traj, w, constants, nullptr, &terms);
    CHECK(terms.spatial == doctest::Approx(sf).epsilon(1e-9));
    CHECK(terms.temporal == doctest::Approx(tf).epsilon(1e-9));
    CHECK(loss == doctest::Approx(sf + 0.7 * tf).epsilon(1e-9));
  }
}

TEST_CASE("every distillation term vanishes when student equals teacher") {
  std::mt19937_64 rng(5);
  const LossWeights w;
  for (auto pool : {PoolOp::mean, PoolOp::max}) {
    const auto constants = DistillConstants::make(1, 8, 3, pool);
    for (int trial = 0; trial < 10; ++trial) {
      const auto x = oracle::random_map(4, 5, 4, 4, rng, -2.0, 2.0);
      FeatureMap g(4, 5, 4, 4);
      CHECK(fused_feature_kd(x, x, &g) == 0.0);
      for (auto mode : {TransferMode::pool, TransferMode::traj}) {
        FeatureKdTerms terms;
        CHECK(decomposed_fkd_loss(x, x, mode, w, constants, &g, &terms) == 0.0);
        CHECK(terms.spatial == 0.0);
        CHECK(terms.temporal == 0.0);
      }
      for (double v : g.data) CHECK(v == 0.0);
    }
  }
}

TEST_CASE("feature distillation terms are non-negative") {
  std::mt19937_64 rng(6);
  const LossWeights w;
  const auto constants = DistillConstants::make(1, 8, 3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = oracle::random_map(2, 4, 3, 3, rng), b = oracle::random_map(2, 4, 3, 3, rng);
    CHECK(fused_feature_kd(a, b) > 0.0);
    for (auto mode : {TransferMode::pool, TransferMode::traj}) {
      FeatureKdTerms terms;
      decomposed_fkd_loss(a, b, mode, w, constants, nullptr, &terms);
      CHECK(terms.spatial >= 0.0);
      CHECK(terms.temporal >= 0.0);
    }
  }
}

TEST_CASE("total loss composition") {
  model::BackboneConfig cfg;
  cfg.input = {8, 8, 1};
  cfg.segments = 4;
  cfg.widths = {4, 8};
  cfg.pool_after = {true, false};
  cfg.shift_div = 4;
  model::Model teacher{model::init_backbone(cfg, 1), model::init_classifier(8, 2, 2)};
  model::Model student{model::init_backbone(cfg, 3), model::expand_classifier(teacher.head, 2, 4)};
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<dataio::Clip> batch(3);
  for (int b = 0; b < 3; ++b) {
    batch[b].shape = cfg.input;
    batch[b].label = b + 1;
    batch[b].frames.assign(4, dataio::Frame(64));
    for (auto& f : batch[b].frames)
      for (auto& v : f) v = u(rng);
  }
  LossWeights w;
  w.alpha = 0.5;
  w.gamma = 2.0;
  const auto constants = DistillConstants::make(1, 8, 9);

  double ce = 0.0, ckd = 0.0, fused = 0.0;
  for (const auto& clip : batch) {
    const auto fs = model::extract_features(student.backbone, clip);
    const auto ft = model::extract_features(teacher.backbone, clip);
    const auto ls = model::classify(model::global_average(fs), student.head);
    const auto lt = model::classify(model::global_average(ft), teacher.head);
    ce += ce_loss(ls, clip.label) / 3;
    ckd += classifier_kd_loss(ls, lt, 2, w.temperature) / 3;
    fused += oracle::fused_kd(fs, ft) / 3;
  }
  const auto none = total_loss(batch, student, nullptr, 0, w, TransferMode::none, constants);
  CHECK(none.total == doctest::Approx(ce).epsilon(1e-12));
  const auto full = total_loss(batch, student, &teacher, 2, w, TransferMode::fused, constants);
  CHECK(full.ce == doctest::Approx(ce).epsilon(1e-12));
  CHECK(full.c_kd == doctest::Approx(ckd).epsilon(1e-12));
  CHECK(full.fkd == doctest::Approx(fused).epsilon(1e-12));
  CHECK(full.total == doctest::Approx(ce + 2.0 * (fused + 0.5 * ckd)).epsilon(1e-12));

  w.gamma = 0.0;
  CHECK(total_loss(batch, student, &teacher, 2, w, TransferMode::traj, constants).total ==
        doctest::Approx(ce).epsilon(1e-12));
  CHECK_THROWS_AS(total_loss(batch, student, nullptr, 2, w, TransferMode::fused, constants), ConfigError);
}

TEST_CASE("total loss gradients match finite differences in every mode") {
  for (auto mode : {TransferMode::none, TransferMode::fused, TransferMode::pool, TransferMode::traj}) {
    for (std::uint64_t seed : {1u, 2u}) {
      const auto check = oracle::check_total_loss_gradient(mode, seed, 12);
      CAPTURE(to_string(mode));
      CHECK(check.checked == 12);
      CHECK(check.max_rel_error < 1e-3);
    }
  }
  const auto max_pool = oracle::check_total_loss_gradient(TransferMode::pool, 3, 12, PoolOp::max);
  CHECK(max_pool.max_rel_error < 1e-3);
}

TEST_CASE("loss weight validation and mode parsing") {
  LossWeights w;
  w.temperature = 0.0;
  CHECK_THROWS_AS(w.validate(), ConfigError);
  w = {};
  w.delta_t = 0;
  CHECK_THROWS_AS(w.validate(), ConfigError);
  w = {};
  w.alpha = -1.0;
  CHECK_THROWS_AS(w.validate(), ConfigError);
  for (auto m : {TransferMode::none, TransferMode::fused, TransferMode::pool, TransferMode::traj})
    CHECK(parse_transfer_mode(to_string(m)) == m);
  CHECK_THROWS_AS(parse_transfer_mode("trajectory"), ConfigError);
  CHECK(parse_pool_op("max") == PoolOp::max);
}
