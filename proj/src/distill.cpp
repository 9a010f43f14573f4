#include "civc/distill.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "civc/errors.hpp"

namespace civc::distill {

namespace {

using model::MotionFields;

// Reduction over one axis of a C x T x H x W map. `axis` is 1 (T), 2 (H) or 3 (W).
Tensor pool_axis(const FeatureMap& x, int axis, PoolOp op) {
  const int dims[4] = {x.channels, x.frames, x.height, x.width};
  std::vector<int> shape;
  for (int a = 0; a < 4; ++a)
    if (a != axis) shape.push_back(dims[a]);
  Tensor out(shape, op == PoolOp::max ? -std::numeric_limits<double>::infinity() : 0.0);
  std::vector<long double> sums(op == PoolOp::mean ? out.size() : 0, 0.0L);
  const int n = dims[axis];
  int idx[4];
  for (idx[0] = 0; idx[0] < x.channels; ++idx[0])
    for (idx[1] = 0; idx[1] < x.frames; ++idx[1])
      for (idx[2] = 0; idx[2] < x.height; ++idx[2])
        for (idx[3] = 0; idx[3] < x.width; ++idx[3]) {
          std::size_t o = 0;
          for (int a = 0; a < 4; ++a)
            if (a != axis) o = o * static_cast<std::size_t>(dims[a]) + static_cast<std::size_t>(idx[a]);
          const double v = x.at(idx[0], idx[1], idx[2], idx[3]);
          if (op == PoolOp::max) out.data[o] = std::max(out.data[o], v);
          else sums[o] += v;
        }
  if (op == PoolOp::mean)
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = static_cast<double>(sums[i] / n);
  return out;
}

// Accumulates the gradient of pool_axis into grad_x. Max pooling routes to the first maximum.
void pool_axis_backward(const FeatureMap& x, int axis, PoolOp op, const Tensor& grad,
                        FeatureMap& grad_x) {
  const int dims[4] = {x.channels, x.frames, x.height, x.width};
  const int n = dims[axis];
  std::vector<char> routed;
  Tensor best;
  if (op == PoolOp::max) {
    best = pool_axis(x, axis, PoolOp::max);
    routed.assign(best.size(), 0);
  }
  int idx[4];
  for (idx[0] = 0; idx[0] < x.channels; ++idx[0])
    for (idx[1] = 0; idx[1] < x.frames; ++idx[1])
      for (idx[2] = 0; idx[2] < x.height; ++idx[2])
        for (idx[3] = 0; idx[3] < x.width; ++idx[3]) {
          std::size_t o = 0;
          for (int a = 0; a < 4; ++a)
            if (a != axis) o = o * static_cast<std::size_t>(dims[a]) + static_cast<std::size_t>(idx[a]);
          double& g = grad_x.at(idx[0], idx[1], idx[2], idx[3]);
          if (op == PoolOp::mean) {
            g += grad.data[o] / n;
          } else if (!routed[o] && x.at(idx[0], idx[1], idx[2], idx[3]) == best.data[o]) {
            g += grad.data[o];
            routed[o] = 1;
          }
        }
}

// Squared distance between two tensors; adds d/d(a) scaled by `scale` into grad when given.
double distance_with_grad(const std::vector<double>& a, const std::vector<double>& b, double scale,
                          std::vector<double>* grad) {
  require(a.size() == b.size(), "feature distillation: shape mismatch");
  double sum = 0.0;
  if (grad) grad->assign(a.size(), 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    sum += d * d;
    if (grad) (*grad)[i] = 2.0 * scale * d;
  }
  return sum;
}

void add_into(FeatureMap& dst, const FeatureMap& src, double scale = 1.0) {
  for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += scale * src.data[i];
}

}  // namespace

const char* to_string(TransferMode mode) {
  switch (mode) {
    case TransferMode::none: return "none";
    case TransferMode::fused: return "fused";
    case TransferMode::pool: return "pool";
    case TransferMode::traj: return "traj";
  }
  return "?";
}

TransferMode parse_transfer_mode(const std::string& text) {
  if (text == "none") return TransferMode::none;
  if (text == "fused") return TransferMode::fused;
  if (text == "pool") return TransferMode::pool;
  if (text == "traj") return TransferMode::traj;
  throw ConfigError("unknown transfer mode '" + text + "'");
}

const char* to_string(PoolOp op) { return op == PoolOp::mean ? "mean" : "max"; }

PoolOp parse_pool_op(const std::string& text) {
  if (text == "mean") return PoolOp::mean;
  if (text == "max") return PoolOp::max;
  throw ConfigError("unknown pool operator '" + text + "' (expected mean or max)");
}

void LossWeights::validate() const {
  if (!(alpha >= 0.0)) throw ConfigError("distill.alpha must be >= 0");
  if (!(gamma >= 0.0)) throw ConfigError("distill.gamma must be >= 0");
  if (!(lambda >= 0.0)) throw ConfigError("distill.lambda must be >= 0");
  if (!(temperature > 0.0)) throw ConfigError("distill.temperature must be > 0");
  if (delta_t < 1) throw ConfigError("distill.delta_t must be >= 1");
}

double ce_loss(std::span<const double> logits, int label, std::span<double> grad) {
  require(!logits.empty(), "ce_loss: empty logits");
  require(label >= 0 && label < static_cast<int>(logits.size()),
          "ce_loss: label " + std::to_string(label) + " outside the known classes");
  const double top = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double v : logits) total += std::exp(v - top);
  const double log_norm = top + std::log(total);
  if (!grad.empty()) {
    require(grad.size() == logits.size(), "ce_loss: gradient size mismatch");
    for (std::size_t j = 0; j < logits.size(); ++j) grad[j] = std::exp(logits[j] - log_norm);
    grad[static_cast<std::size_t>(label)] -= 1.0;
  }
  return log_norm - logits[static_cast<std::size_t>(label)];
}

double ce_loss(const std::vector<std::vector<double>>& logits, std::span<const int> labels) {
  require(logits.size() == labels.size() && !logits.empty(), "ce_loss: batch size mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) sum += ce_loss(logits[i], labels[i]);
  return sum / static_cast<double>(logits.size());
}

double classifier_kd_loss(std::span<const double> student, std::span<const double> teacher,
                          int n_old, double temperature, std::span<double> grad) {
  require(n_old >= 0, "classifier_kd_loss: n_old must be >= 0");
  require(temperature > 0.0, "classifier_kd_loss: temperature must be > 0");
  require(static_cast<std::size_t>(n_old) <= student.size() &&
              static_cast<std::size_t>(n_old) <= teacher.size(),
          "classifier_kd_loss: n_old exceeds the logit count");
  if (!grad.empty()) {
    require(grad.size() == student.size(), "classifier_kd_loss: gradient size mismatch");
    std::fill(grad.begin(), grad.end(), 0.0);
  }
  if (n_old == 0) return 0.0;

  auto soft = [&](std::span<const double> z) {
    std::vector<double> p(static_cast<std::size_t>(n_old));
    double top = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < n_old; ++j) top = std::max(top, z[static_cast<std::size_t>(j)] / temperature);
    double total = 0.0;
    for (int j = 0; j < n_old; ++j) {
      p[static_cast<std::size_t>(j)] = std::exp(z[static_cast<std::size_t>(j)] / temperature - top);
      total += p[static_cast<std::size_t>(j)];
    }
    for (auto& v : p) v /= total;
    return std::pair{p, top + std::log(total)};
  };
  const auto [p_teacher, unused] = soft(teacher);
  const auto [p_student, log_norm] = soft(student);
  double loss = 0.0;
  for (int j = 0; j < n_old; ++j) {
    const auto k = static_cast<std::size_t>(j);
    const double log_ps = student[k] / temperature - log_norm;
    loss -= p_teacher[k] * log_ps;
    if (!grad.empty()) grad[k] = (p_student[k] - p_teacher[k]) / temperature;
  }
  return loss;
}

double fused_feature_kd(const FeatureMap& student, const FeatureMap& teacher,
                        FeatureMap* grad_student) {
  require(student.same_shape(teacher), "fused_feature_kd: feature map shapes differ");
  std::vector<double> g;
  const double loss = distance_with_grad(student.data, teacher.data, 1.0, grad_student ? &g : nullptr);
  if (grad_student) {
    require(grad_student->same_shape(student), "fused_feature_kd: gradient shape mismatch");
    for (std::size_t i = 0; i < g.size(); ++i) grad_student->data[i] += g[i];
  }
  return loss;
}

Tensor phi_sf_pool(const FeatureMap& features, PoolOp op) { return pool_axis(features, 1, op); }

TemporalParts phi_tf_pool(const FeatureMap& features, PoolOp op) {
  return {pool_axis(features, 3, op), pool_axis(features, 2, op)};
}

std::optional<Tensor> TemporalParts::stacked() const {
  if (over_width.shape != over_height.shape) return std::nullopt;
  std::vector<int> shape = over_width.shape;
  shape.push_back(2);
  Tensor out(shape);
  for (std::size_t i = 0; i < over_width.size(); ++i) {
    out.data[2 * i] = over_width.data[i];
    out.data[2 * i + 1] = over_height.data[i];
  }
  return out;
}

Tensor phi_sf_traj(const FeatureMap& features, const MotionFields& fields,
                   std::span<const double> filter, int delta_t, PoolOp op) {
  return pool_axis(traj_align(features, fields, filter, delta_t), 1, op);
}

DistillConstants DistillConstants::make(int delta_t, int temporal_dim, std::uint64_t seed,
                                        PoolOp pool, model::MotionEstimatorConfig motion) {
  DistillConstants k;
  k.delta_t = delta_t;
  k.filter = averaging_filter(delta_t);
  k.projection = Projection::random(descriptor_size(delta_t), temporal_dim, seed);
  k.pool = pool;
  k.motion = motion;
  return k;
}

double decomposed_fkd_loss(const FeatureMap& student, const FeatureMap& teacher, TransferMode mode,
                           const LossWeights& weights, const DistillConstants& constants,
                           FeatureMap* grad_student, FeatureKdTerms* terms) {
  if (mode != TransferMode::pool && mode != TransferMode::traj)
    throw ConfigError(std::string("decomposed feature distillation needs mode pool or traj, got ") +
                      to_string(mode));
  require(student.same_shape(teacher), "decomposed_fkd_loss: feature map shapes differ");
  if (grad_student) require(grad_student->same_shape(student), "decomposed_fkd_loss: gradient shape mismatch");
  const PoolOp op = constants.pool;
  FeatureKdTerms local;

  if (mode == TransferMode::pool) {
    const Tensor sf_s = phi_sf_pool(student, op), sf_t = phi_sf_pool(teacher, op);
    const TemporalParts tf_s = phi_tf_pool(student, op), tf_t = phi_tf_pool(teacher, op);
    std::vector<double> g_sf, g_w, g_h;
    const bool want = grad_student != nullptr;
    local.spatial = distance_with_grad(sf_s.data, sf_t.data, 1.0, want ? &g_sf : nullptr);
    local.temporal =
        distance_with_grad(tf_s.over_width.data, tf_t.over_width.data, weights.lambda, want ? &g_w : nullptr) +
        distance_with_grad(tf_s.over_height.data, tf_t.over_height.data, weights.lambda, want ? &g_h : nullptr);
    if (want) {
      Tensor gt(sf_s.shape);
      gt.data = std::move(g_sf);
      pool_axis_backward(student, 1, op, gt, *grad_student);
      Tensor gw(tf_s.over_width.shape);
      gw.data = std::move(g_w);
      pool_axis_backward(student, 3, op, gw, *grad_student);
      Tensor gh(tf_s.over_height.shape);
      gh.data = std::move(g_h);
      pool_axis_backward(student, 2, op, gh, *grad_student);
    }
  } else {
    const MotionFields teacher_fields = model::estimate_motion_field(teacher, constants.motion);
    const TrajectoryPlan plan = plan_trajectories(teacher_fields, constants.delta_t);

    const FeatureMap aligned_s = traj_align(student, plan, constants.filter);
    const FeatureMap aligned_t = traj_align(teacher, plan, constants.filter);
    const Tensor sf_s = pool_axis(aligned_s, 1, op), sf_t = pool_axis(aligned_t, 1, op);

    const MotionFields student_fields = model::estimate_motion_field(student, constants.motion);
    const FeatureMap tf_s = phi_tf_traj(student_fields, plan, constants.projection);
    const FeatureMap tf_t = phi_tf_traj(teacher_fields, plan, constants.projection);

    std::vector<double> g_sf, g_tf;
    const bool want = grad_student != nullptr;
    local.spatial = distance_with_grad(sf_s.data, sf_t.data, 1.0, want ? &g_sf : nullptr);
    local.temporal = distance_with_grad(tf_s.data, tf_t.data, weights.lambda, want ? &g_tf : nullptr);
    if (want) {
      Tensor gt(sf_s.shape);
      gt.data = std::move(g_sf);
      FeatureMap g_aligned(aligned_s.channels, aligned_s.frames, aligned_s.height, aligned_s.width);
      pool_axis_backward(aligned_s, 1, op, gt, g_aligned);
      traj_align_backward(plan, constants.filter, g_aligned, *grad_student);

      FeatureMap g_tf_map(tf_s.channels, tf_s.frames, tf_s.height, tf_s.width);
      g_tf_map.data = std::move(g_tf);
      MotionFields g_fields(student_fields.frames, student_fields.height, student_fields.width);
      phi_tf_traj_backward(plan, constants.projection, g_tf_map, g_fields);
      model::estimate_motion_field_backward(student, constants.motion, g_fields, *grad_student);
    }
  }
  if (terms) *terms = local;
  return local.spatial + weights.lambda * local.temporal;
}

LossBreakdown total_loss(std::span<const dataio::Clip> batch, const model::Model& student,
                         const model::Model* teacher, int n_old, const LossWeights& weights,
                         TransferMode mode, const DistillConstants& constants, model::Model* grads) {
  require(!batch.empty(), "total_loss: empty batch");
  const bool distill = n_old > 0 && mode != TransferMode::none;
  if (distill && teacher == nullptr)
    throw ConfigError("total_loss: distillation requested but no teacher model was given");
  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  const bool want = grads != nullptr;
  const bool feature_kd = distill && weights.gamma != 0.0;

  LossBreakdown out;
  model::BackboneTrace trace;
  for (const auto& clip : batch) {
    const FeatureMap fmap = model::extract_features(student.backbone, clip, want ? &trace : nullptr);
    const std::vector<double> pooled = model::global_average(fmap);
    const std::vector<double> logits = model::classify(pooled, student.head);

    if (std::max_element(logits.begin(), logits.end()) - logits.begin() == clip.label) ++out.correct;

    std::vector<double> g_logits(logits.size(), 0.0);
    out.ce += ce_loss(logits, clip.label, g_logits) * inv_batch;
    for (auto& g : g_logits) g *= inv_batch;

    FeatureMap g_fmap;
    if (want) g_fmap = FeatureMap(fmap.channels, fmap.frames, fmap.height, fmap.width);

    if (feature_kd) {
      const FeatureMap t_fmap = model::extract_features(teacher->backbone, clip);
      const std::vector<double> t_logits =
          model::classify(model::global_average(t_fmap), teacher->head);

      std::vector<double> g_ckd(logits.size(), 0.0);
      out.c_kd += classifier_kd_loss(logits, t_logits, n_old, weights.temperature,
                                     want ? std::span<double>(g_ckd) : std::span<double>()) *
                  inv_batch;

      FeatureMap g_feat;
      if (want) g_feat = FeatureMap(fmap.channels, fmap.frames, fmap.height, fmap.width);
      double fkd = 0.0;
      if (mode == TransferMode::fused) {
        fkd = fused_feature_kd(fmap, t_fmap, want ? &g_feat : nullptr);
      } else {
        FeatureKdTerms terms;
        fkd = decomposed_fkd_loss(fmap, t_fmap, mode, weights, constants, want ? &g_feat : nullptr, &terms);
        out.sf_kd += terms.spatial * inv_batch;
        out.tf_kd += terms.temporal * inv_batch;
      }
      out.fkd += fkd * inv_batch;

      if (want) {
        const double scale = weights.gamma * inv_batch;
        for (std::size_t j = 0; j < g_logits.size(); ++j) g_logits[j] += scale * weights.alpha * g_ckd[j];
        add_into(g_fmap, g_feat, scale);
      }
    }

    if (want) {
      const std::vector<double> g_pooled = model::classify_backward(pooled, student.head, g_logits, grads->head);
      model::global_average_backward(g_pooled, g_fmap);
      model::backward_features(student.backbone, trace, g_fmap, grads->backbone);
    }
  }
  out.total = out.ce + (feature_kd ? weights.gamma * (out.fkd + weights.alpha * out.c_kd) : 0.0);
  return out;
}

}  // namespace civc::distill
