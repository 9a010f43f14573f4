#pragma once

#include <vector>

#include "civc/tensor.hpp"

namespace civc::model {

/// Dense per-position displacements (dh, dw) in feature-grid units, T x H x W x 2.
/// forward[t] points from frame t to t+1, backward[t] from t to t-1.
/// forward[T-1] and backward[0] are zero.
struct MotionFields {
  int frames = 0;
  int height = 0;
  int width = 0;
  std::vector<double> forward;
  std::vector<double> backward;

  MotionFields() = default;
  MotionFields(int t, int h, int w);

  std::size_t offset(int t, int h, int w) const {
    return ((static_cast<std::size_t>(t) * height + h) * width + w) * 2;
  }
  bool operator==(const MotionFields&) const = default;
};

struct MotionEstimatorConfig {
  int radius = 2;
  double temperature = 1.0;

  bool operator==(const MotionEstimatorConfig&) const = default;
};

/// Soft-argmax over the local channel-wise correlation volume (|delta|_inf <= radius).
/// Neighbours outside the grid are read from the clamped border position.
MotionFields estimate_motion_field(const FeatureMap& features,
                                   const MotionEstimatorConfig& config = {});

/// Accumulates d(loss)/d(features) given d(loss)/d(fields).
void estimate_motion_field_backward(const FeatureMap& features, const MotionEstimatorConfig& config,
                                    const MotionFields& grad_fields, FeatureMap& grad_features);

double max_displacement(const MotionFields& fields);

}  // namespace civc::model
