#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "civc/dataio.hpp"
#include "civc/model.hpp"
#include "civc/motion.hpp"
#include "civc/tensor.hpp"
#include "civc/trajectory.hpp"

namespace civc::distill {

/// How knowledge moves from the previous-session model to the current one.
enum class TransferMode { none, fused, pool, traj };
enum class PoolOp { mean, max };

const char* to_string(TransferMode mode);
TransferMode parse_transfer_mode(const std::string& text);
const char* to_string(PoolOp op);
PoolOp parse_pool_op(const std::string& text);

struct LossWeights {
  double alpha = 1.0;        // classifier distillation, relative to feature distillation
  double gamma = 1.0;        // total distillation, relative to cross-entropy
  double lambda = 1.0;       // temporal feature distillation, relative to spatial
  double temperature = 2.0;  // softmax temperature for classifier distillation
  int delta_t = 1;           // trajectory half-window

  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

/// Softmax cross-entropy for one sample; writes d/d(logits) into `grad` when non-empty.
double ce_loss(std::span<const double> logits, int label, std::span<double> grad = {});
/// Mean over the batch.
double ce_loss(const std::vector<std::vector<double>>& logits, std::span<const int> labels);

/// -sum_{s < n_old} softmax_T(teacher)_s * log softmax_T(student)_s, both softmaxes over the
/// first n_old logits. Returns 0 when n_old == 0.
double classifier_kd_loss(std::span<const double> student, std::span<const double> teacher,
                          int n_old, double temperature, std::span<double> grad = {});

/// Squared Euclidean distance over every entry.
double fused_feature_kd(const FeatureMap& student, const FeatureMap& teacher,
                        FeatureMap* grad_student = nullptr);

/// Pool over T: C x H x W.
Tensor phi_sf_pool(const FeatureMap& features, PoolOp op = PoolOp::mean);

/// Pool over W (C x T x H) and over H (C x T x W).
struct TemporalParts {
  Tensor over_width;
  Tensor over_height;

  /// C x T x H x 2 when H == W; nullopt otherwise (the parts stay separate).
  std::optional<Tensor> stacked() const;
};
TemporalParts phi_tf_pool(const FeatureMap& features, PoolOp op = PoolOp::mean);

/// pool_T(traj_align(...)).
Tensor phi_sf_traj(const FeatureMap& features, const MotionFields& fields,
                   std::span<const double> filter, int delta_t, PoolOp op = PoolOp::mean);

/// Constants shared by teacher and student branches; immutable once built.
struct DistillConstants {
  int delta_t = 1;
  std::vector<double> filter;
  Projection projection;
  PoolOp pool = PoolOp::mean;
  model::MotionEstimatorConfig motion;

  static DistillConstants make(int delta_t, int temporal_dim, std::uint64_t seed,
                               PoolOp pool = PoolOp::mean,
                               model::MotionEstimatorConfig motion = {});
};

struct FeatureKdTerms {
  double spatial = 0.0;
  double temporal = 0.0;
};

/// L_sf + lambda * L_tf in pool or traj mode. In traj mode trajectories are tracked on the
/// teacher's motion fields for both maps, while each map's temporal descriptor gathers its
/// own estimated motion along those trajectories.
double decomposed_fkd_loss(const FeatureMap& student, const FeatureMap& teacher, TransferMode mode,
                           const LossWeights& weights, const DistillConstants& constants,
                           FeatureMap* grad_student = nullptr, FeatureKdTerms* terms = nullptr);

struct LossBreakdown {
  double ce = 0.0;
  double fkd = 0.0;  // feature distillation as used in the objective (fused or sf + lambda tf)
  double sf_kd = 0.0;
  double tf_kd = 0.0;
  double c_kd = 0.0;
  double total = 0.0;
  std::size_t correct = 0;  // student top-1 hits in the batch
};

/// CE + gamma * (fKD + alpha * cKD), every term averaged over the batch. Distillation is active
/// only when n_old > 0 and mode != none, and then needs a teacher. When `grads` is non-null the
/// gradient of `total` w.r.t. the student is accumulated into it.
LossBreakdown total_loss(std::span<const dataio::Clip> batch, const model::Model& student,
                         const model::Model* teacher, int n_old, const LossWeights& weights,
                         TransferMode mode, const DistillConstants& constants,
                         model::Model* grads = nullptr);

}  // namespace civc::distill
