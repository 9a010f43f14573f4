#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "civc/motion.hpp"
#include "civc/tensor.hpp"

namespace civc::distill {

using model::MotionFields;

struct GridPoint {
  double h = 0.0;
  double w = 0.0;
  bool operator==(const GridPoint&) const = default;
};

/// Follows the motion field |tau| steps from frame t (forward field for tau > 0, backward
/// field for tau < 0). Fields are bilinearly sampled at fractional positions and every
/// intermediate position is clamped to the grid.
GridPoint traj_track(GridPoint start, const MotionFields& fields, int t, int tau);

/// Where each (t, p, tau) sample of the alignment window lands. Temporal indices outside
/// the clip are clamped, which freezes the tracked position at the boundary frame.
struct TrajectoryPlan {
  struct Sample {
    int frame = 0;
    GridPoint position;
    BilinearTap tap;
  };
  int frames = 0;
  int height = 0;
  int width = 0;
  int delta_t = 1;
  std::vector<Sample> samples;  // ((t * H + h) * W + w) * window + (tau + delta_t)

  int window() const { return 2 * delta_t + 1; }
  const Sample& at(int t, int h, int w, int tau) const {
    return samples[((static_cast<std::size_t>(t) * height + h) * width + w) * window() + (tau + delta_t)];
  }
};

TrajectoryPlan plan_trajectories(const MotionFields& track, int delta_t);

/// Uniform averaging filter of length 2 * delta_t + 1.
std::vector<double> averaging_filter(int delta_t);

/// out(c,t,p) = sum_tau filter[tau] * x_{t+tau}(p~_{t+tau}).
FeatureMap traj_align(const FeatureMap& features, const MotionFields& fields,
                      std::span<const double> filter, int delta_t);
FeatureMap traj_align(const FeatureMap& features, const TrajectoryPlan& plan,
                      std::span<const double> filter);
void traj_align_backward(const TrajectoryPlan& plan, std::span<const double> filter,
                         const FeatureMap& grad_out, FeatureMap& grad_features);

/// Fixed linear map (no bias) from trajectory descriptors to temporal features.
struct Projection {
  int in_dim = 0;
  int out_dim = 0;
  std::vector<double> weight;  // out_dim x in_dim

  static Projection random(int in_dim, int out_dim, std::uint64_t seed);
  bool operator==(const Projection&) const = default;
};

int descriptor_size(int delta_t);

/// Forward and backward displacements of `gathered`, sampled along the planned trajectory
/// window of (t, h, w). Order per tau (ascending): fwd dh, fwd dw, bwd dh, bwd dw.
std::vector<double> trajectory_descriptor(const MotionFields& gathered, const TrajectoryPlan& plan,
                                          int t, int h, int w);

/// Temporal feature C' x T x H x W. The one-argument form tracks and gathers the same fields.
FeatureMap phi_tf_traj(const MotionFields& fields, const Projection& projection, int delta_t);
FeatureMap phi_tf_traj(const MotionFields& gathered, const TrajectoryPlan& plan,
                       const Projection& projection);
void phi_tf_traj_backward(const TrajectoryPlan& plan, const Projection& projection,
                          const FeatureMap& grad_out, MotionFields& grad_gathered);

}  // namespace civc::distill
