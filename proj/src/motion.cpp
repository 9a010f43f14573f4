#include "civc/motion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "civc/errors.hpp"

namespace civc::model {

namespace {

struct Window {
  int radius;
  int taps() const { return (2 * radius + 1) * (2 * radius + 1); }
  int dh(int k) const { return k / (2 * radius + 1) - radius; }
  int dw(int k) const { return k % (2 * radius + 1) - radius; }
};

// Softmax weights over the window for position (h, w) matching frame `t` against frame `other`.
void window_softmax(const FeatureMap& x, const Window& win, double temperature, int t, int other,
                    int h, int w, std::vector<double>& weights, std::vector<int>& qh,
                    std::vector<int>& qw) {
  const int taps = win.taps();
  weights.resize(static_cast<std::size_t>(taps));
  qh.resize(static_cast<std::size_t>(taps));
  qw.resize(static_cast<std::size_t>(taps));
  double best = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < taps; ++k) {
    const int sh = std::clamp(h + win.dh(k), 0, x.height - 1);
    const int sw = std::clamp(w + win.dw(k), 0, x.width - 1);
    qh[static_cast<std::size_t>(k)] = sh;
    qw[static_cast<std::size_t>(k)] = sw;
    double corr = 0.0;
    for (int c = 0; c < x.channels; ++c) corr += x.at(c, t, h, w) * x.at(c, other, sh, sw);
    weights[static_cast<std::size_t>(k)] = corr / temperature;
    best = std::max(best, weights[static_cast<std::size_t>(k)]);
  }
  double total = 0.0;
  for (auto& v : weights) {
    v = std::exp(v - best);
    total += v;
  }
  for (auto& v : weights) v /= total;
}

}  // namespace

MotionFields::MotionFields(int t, int h, int w) : frames(t), height(h), width(w) {
  const std::size_t n = static_cast<std::size_t>(t) * h * w * 2;
  forward.assign(n, 0.0);
  backward.assign(n, 0.0);
}

MotionFields estimate_motion_field(const FeatureMap& x, const MotionEstimatorConfig& config) {
  require(x.frames >= 2, "estimate_motion_field: needs at least two frames");
  require(config.radius >= 0 && config.temperature > 0.0,
          "estimate_motion_field: bad estimator configuration");
  const Window win{config.radius};
  MotionFields fields(x.frames, x.height, x.width);
  std::vector<double> weights;
  std::vector<int> qh, qw;
  for (int t = 0; t < x.frames; ++t) {
    for (int h = 0; h < x.height; ++h) {
      for (int w = 0; w < x.width; ++w) {
        const std::size_t o = fields.offset(t, h, w);
        for (int dir = 0; dir < 2; ++dir) {
          const int other = dir == 0 ? t + 1 : t - 1;
          if (other < 0 || other >= x.frames) continue;
          window_softmax(x, win, config.temperature, t, other, h, w, weights, qh, qw);
          double dh = 0.0, dw = 0.0;
          for (int k = 0; k < win.taps(); ++k) {
            dh += weights[static_cast<std::size_t>(k)] * win.dh(k);
            dw += weights[static_cast<std::size_t>(k)] * win.dw(k);
          }
          auto& field = dir == 0 ? fields.forward : fields.backward;
          field[o] = dh;
          field[o + 1] = dw;
        }
      }
    }
  }
  return fields;
}

void estimate_motion_field_backward(const FeatureMap& x, const MotionEstimatorConfig& config,
                                    const MotionFields& grad_fields, FeatureMap& grad_x) {
  require(grad_x.same_shape(x), "estimate_motion_field_backward: gradient shape mismatch");
  require(grad_fields.frames == x.frames && grad_fields.height == x.height &&
              grad_fields.width == x.width,
          "estimate_motion_field_backward: field shape mismatch");
  const Window win{config.radius};
  std::vector<double> weights;
  std::vector<int> qh, qw;
  for (int t = 0; t < x.frames; ++t) {
    for (int h = 0; h < x.height; ++h) {
      for (int w = 0; w < x.width; ++w) {
        const std::size_t o = grad_fields.offset(t, h, w);
        for (int dir = 0; dir < 2; ++dir) {
          const int other = dir == 0 ? t + 1 : t - 1;
          if (other < 0 || other >= x.frames) continue;
          const auto& gf = dir == 0 ? grad_fields.forward : grad_fields.backward;
          const double gh = gf[o], gw = gf[o + 1];
          if (gh == 0.0 && gw == 0.0) continue;
          window_softmax(x, win, config.temperature, t, other, h, w, weights, qh, qw);
          double mean_dh = 0.0, mean_dw = 0.0;
          for (int k = 0; k < win.taps(); ++k) {
            mean_dh += weights[static_cast<std::size_t>(k)] * win.dh(k);
            mean_dw += weights[static_cast<std::size_t>(k)] * win.dw(k);
          }
          const double g_mean = gh * mean_dh + gw * mean_dw;
          for (int k = 0; k < win.taps(); ++k) {
            const double s = weights[static_cast<std::size_t>(k)];
            // d(softargmax)/d(score_k) = s_k (delta_k - mean)
            const double g_corr = s * (gh * win.dh(k) + gw * win.dw(k) - g_mean) / config.temperature;
            if (g_corr == 0.0) continue;
            const int sh = qh[static_cast<std::size_t>(k)], sw = qw[static_cast<std::size_t>(k)];
            for (int c = 0; c < x.channels; ++c) {
              grad_x.at(c, t, h, w) += g_corr * x.at(c, other, sh, sw);
              grad_x.at(c, other, sh, sw) += g_corr * x.at(c, t, h, w);
            }
          }
        }
      }
    }
  }
}

double max_displacement(const MotionFields& fields) {
  double m = 0.0;
  for (double v : fields.forward) m = std::max(m, std::abs(v));
  for (double v : fields.backward) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace civc::model
