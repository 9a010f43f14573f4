#include "civc/trajectory.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "civc/errors.hpp"

namespace civc::distill {

namespace {

GridPoint clamp_point(GridPoint p, int height, int width) {
  return {std::clamp(p.h, 0.0, static_cast<double>(height - 1)),
          std::clamp(p.w, 0.0, static_cast<double>(width - 1))};
}

// Bilinear read of component k (0 = dh, 1 = dw) of a T x H x W x 2 field.
double sample_field(const std::vector<double>& field, const MotionFields& shape, int t,
                    const BilinearTap& tap, int k) {
  return tap.w00 * field[shape.offset(t, tap.h0, tap.w0) + k] +
         tap.w01 * field[shape.offset(t, tap.h0, tap.w1) + k] +
         tap.w10 * field[shape.offset(t, tap.h1, tap.w0) + k] +
         tap.w11 * field[shape.offset(t, tap.h1, tap.w1) + k];
}

void scatter_field(std::vector<double>& field, const MotionFields& shape, int t,
                   const BilinearTap& tap, int k, double g) {
  field[shape.offset(t, tap.h0, tap.w0) + k] += tap.w00 * g;
  field[shape.offset(t, tap.h0, tap.w1) + k] += tap.w01 * g;
  field[shape.offset(t, tap.h1, tap.w0) + k] += tap.w10 * g;
  field[shape.offset(t, tap.h1, tap.w1) + k] += tap.w11 * g;
}

GridPoint step(GridPoint p, const MotionFields& fields, int t, bool forward) {
  const BilinearTap tap = bilinear_tap(p.h, p.w, fields.height, fields.width);
  const auto& field = forward ? fields.forward : fields.backward;
  const GridPoint moved{p.h + sample_field(field, fields, t, tap, 0),
                        p.w + sample_field(field, fields, t, tap, 1)};
  return clamp_point(moved, fields.height, fields.width);
}

bool is_uniform(std::span<const double> filter) {
  return std::all_of(filter.begin(), filter.end(), [&](double v) { return v == filter[0]; });
}

double sample_map(const FeatureMap& x, int c, int t, const BilinearTap& tap) {
  return tap.w00 * x.at(c, t, tap.h0, tap.w0) + tap.w01 * x.at(c, t, tap.h0, tap.w1) +
         tap.w10 * x.at(c, t, tap.h1, tap.w0) + tap.w11 * x.at(c, t, tap.h1, tap.w1);
}

}  // namespace

GridPoint traj_track(GridPoint start, const MotionFields& fields, int t, int tau) {
  require(t >= 0 && t < fields.frames, "traj_track: t outside the clip");
  require(t + tau >= 0 && t + tau < fields.frames, "traj_track: t + tau outside the clip");
  GridPoint p = clamp_point(start, fields.height, fields.width);
  const bool forward = tau > 0;
  for (int s = 0; s < std::abs(tau); ++s) p = step(p, fields, forward ? t + s : t - s, forward);
  return p;
}

TrajectoryPlan plan_trajectories(const MotionFields& track, int delta_t) {
  require(delta_t >= 1, "plan_trajectories: delta_t must be >= 1");
  TrajectoryPlan plan;
  plan.frames = track.frames;
  plan.height = track.height;
  plan.width = track.width;
  plan.delta_t = delta_t;
  const int window = plan.window();
  plan.samples.resize(static_cast<std::size_t>(track.frames) * track.height * track.width * window);

  auto store = [&](int t, int h, int w, int tau, int frame, GridPoint p) {
    auto& s = plan.samples[((static_cast<std::size_t>(t) * plan.height + h) * plan.width + w) * window +
                           (tau + delta_t)];
    s.frame = frame;
    s.position = p;
    s.tap = bilinear_tap(p.h, p.w, plan.height, plan.width);
  };

  for (int t = 0; t < track.frames; ++t) {
    for (int h = 0; h < track.height; ++h) {
      for (int w = 0; w < track.width; ++w) {
        const GridPoint origin{static_cast<double>(h), static_cast<double>(w)};
        store(t, h, w, 0, t, origin);
        for (int dir : {1, -1}) {
          GridPoint p = origin;
          int frame = t;
          for (int k = 1; k <= delta_t; ++k) {
            const int next = t + dir * k;
            if (next >= 0 && next < track.frames) {
              p = step(p, track, frame, dir > 0);
              frame = next;
            }
            store(t, h, w, dir * k, frame, p);
          }
        }
      }
    }
  }
  return plan;
}

std::vector<double> averaging_filter(int delta_t) {
  require(delta_t >= 1, "averaging_filter: delta_t must be >= 1");
  const int n = 2 * delta_t + 1;
  return std::vector<double>(static_cast<std::size_t>(n), 1.0 / n);
}

FeatureMap traj_align(const FeatureMap& features, const MotionFields& fields,
                      std::span<const double> filter, int delta_t) {
  require(delta_t >= 1 && delta_t < features.frames, "traj_align: delta_t must be in [1, T)");
  return traj_align(features, plan_trajectories(fields, delta_t), filter);
}

FeatureMap traj_align(const FeatureMap& x, const TrajectoryPlan& plan,
                      std::span<const double> filter) {
  require(static_cast<int>(filter.size()) == plan.window(),
          "traj_align: filter length must be 2 * delta_t + 1");
  require(x.frames == plan.frames && x.height == plan.height && x.width == plan.width,
          "traj_align: feature map and motion fields disagree in shape");
  // a uniform filter is applied as (mean of samples) * (total weight), summed in extended precision
  // so that identical samples average back to themselves
  const bool uniform = is_uniform(filter);
  const int window = plan.window();
  const double total_weight = filter[0] * window;
  FeatureMap out(x.channels, x.frames, x.height, x.width);
  for (int c = 0; c < x.channels; ++c) {
    for (int t = 0; t < x.frames; ++t) {
      for (int h = 0; h < x.height; ++h) {
        for (int w = 0; w < x.width; ++w) {
          long double acc = 0.0L;
          for (int k = 0; k < window; ++k) {
            const auto& s = plan.at(t, h, w, k - plan.delta_t);
            const double v = sample_map(x, c, s.frame, s.tap);
            acc += uniform ? v : filter[static_cast<std::size_t>(k)] * v;
          }
          out.at(c, t, h, w) = static_cast<double>(uniform ? acc / window * total_weight : acc);
        }
      }
    }
  }
  return out;
}

void traj_align_backward(const TrajectoryPlan& plan, std::span<const double> filter,
                         const FeatureMap& grad_out, FeatureMap& grad_x) {
  require(grad_out.same_shape(grad_x), "traj_align_backward: shape mismatch");
  const int window = plan.window();
  for (int c = 0; c < grad_out.channels; ++c) {
    for (int t = 0; t < grad_out.frames; ++t) {
      for (int h = 0; h < grad_out.height; ++h) {
        for (int w = 0; w < grad_out.width; ++w) {
          const double g = grad_out.at(c, t, h, w);
          if (g == 0.0) continue;
          for (int k = 0; k < window; ++k) {
            const auto& s = plan.at(t, h, w, k - plan.delta_t);
            const double gk = g * filter[static_cast<std::size_t>(k)];
            grad_x.at(c, s.frame, s.tap.h0, s.tap.w0) += s.tap.w00 * gk;
            grad_x.at(c, s.frame, s.tap.h0, s.tap.w1) += s.tap.w01 * gk;
            grad_x.at(c, s.frame, s.tap.h1, s.tap.w0) += s.tap.w10 * gk;
            grad_x.at(c, s.frame, s.tap.h1, s.tap.w1) += s.tap.w11 * gk;
          }
        }
      }
    }
  }
}

Projection Projection::random(int in_dim, int out_dim, std::uint64_t seed) {
  require(in_dim >= 1 && out_dim >= 1, "Projection: dimensions must be >= 1");
  Projection p;
  p.in_dim = in_dim;
  p.out_dim = out_dim;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(in_dim)));
  p.weight.resize(static_cast<std::size_t>(in_dim) * out_dim);
  for (auto& v : p.weight) v = dist(rng);
  return p;
}

int descriptor_size(int delta_t) { return 4 * (2 * delta_t + 1); }

std::vector<double> trajectory_descriptor(const MotionFields& gathered, const TrajectoryPlan& plan,
                                          int t, int h, int w) {
  require(gathered.frames == plan.frames && gathered.height == plan.height &&
              gathered.width == plan.width,
          "trajectory_descriptor: field shape mismatch");
  std::vector<double> desc;
  desc.reserve(static_cast<std::size_t>(descriptor_size(plan.delta_t)));
  for (int tau = -plan.delta_t; tau <= plan.delta_t; ++tau) {
    const auto& s = plan.at(t, h, w, tau);
    desc.push_back(sample_field(gathered.forward, gathered, s.frame, s.tap, 0));
    desc.push_back(sample_field(gathered.forward, gathered, s.frame, s.tap, 1));
    desc.push_back(sample_field(gathered.backward, gathered, s.frame, s.tap, 0));
    desc.push_back(sample_field(gathered.backward, gathered, s.frame, s.tap, 1));
  }
  return desc;
}

FeatureMap phi_tf_traj(const MotionFields& fields, const Projection& projection, int delta_t) {
  return phi_tf_traj(fields, plan_trajectories(fields, delta_t), projection);
}

FeatureMap phi_tf_traj(const MotionFields& gathered, const TrajectoryPlan& plan,
                       const Projection& projection) {
  require(projection.in_dim == descriptor_size(plan.delta_t),
          "phi_tf_traj: projection input size does not match the descriptor");
  FeatureMap out(projection.out_dim, plan.frames, plan.height, plan.width);
  for (int t = 0; t < plan.frames; ++t) {
    for (int h = 0; h < plan.height; ++h) {
      for (int w = 0; w < plan.width; ++w) {
        const auto desc = trajectory_descriptor(gathered, plan, t, h, w);
        for (int o = 0; o < projection.out_dim; ++o) {
          const double* row = projection.weight.data() + static_cast<std::size_t>(o) * projection.in_dim;
          double acc = 0.0;
          for (int d = 0; d < projection.in_dim; ++d) acc += row[d] * desc[static_cast<std::size_t>(d)];
          out.at(o, t, h, w) = acc;
        }
      }
    }
  }
  return out;
}

void phi_tf_traj_backward(const TrajectoryPlan& plan, const Projection& projection,
                          const FeatureMap& grad_out, MotionFields& grad_gathered) {
  require(grad_out.channels == projection.out_dim && grad_out.frames == plan.frames &&
              grad_out.height == plan.height && grad_out.width == plan.width,
          "phi_tf_traj_backward: gradient shape mismatch");
  std::vector<double> gdesc(static_cast<std::size_t>(projection.in_dim));
  for (int t = 0; t < plan.frames; ++t) {
    for (int h = 0; h < plan.height; ++h) {
      for (int w = 0; w < plan.width; ++w) {
        std::fill(gdesc.begin(), gdesc.end(), 0.0);
        for (int o = 0; o < projection.out_dim; ++o) {
          const double g = grad_out.at(o, t, h, w);
          const double* row = projection.weight.data() + static_cast<std::size_t>(o) * projection.in_dim;
          for (int d = 0; d < projection.in_dim; ++d) gdesc[static_cast<std::size_t>(d)] += g * row[d];
        }
        for (int tau = -plan.delta_t; tau <= plan.delta_t; ++tau) {
          const auto& s = plan.at(t, h, w, tau);
          const std::size_t base = static_cast<std::size_t>(tau + plan.delta_t) * 4;
          scatter_field(grad_gathered.forward, grad_gathered, s.frame, s.tap, 0, gdesc[base]);
          scatter_field(grad_gathered.forward, grad_gathered, s.frame, s.tap, 1, gdesc[base + 1]);
          scatter_field(grad_gathered.backward, grad_gathered, s.frame, s.tap, 0, gdesc[base + 2]);
          scatter_field(grad_gathered.backward, grad_gathered, s.frame, s.tap, 1, gdesc[base + 3]);
        }
      }
    }
  }
}

}  // namespace civc::distill
