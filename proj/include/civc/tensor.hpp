#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace civc {

/// Dense C x T x H x W real-valued feature map (channels, time, height, width).
struct FeatureMap {
  int channels = 0;
  int frames = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  FeatureMap() = default;
  FeatureMap(int c, int t, int h, int w, double fill = 0.0);

  std::size_t size() const { return data.size(); }
  std::size_t index(int c, int t, int h, int w) const {
    return ((static_cast<std::size_t>(c) * frames + t) * height + h) * width + w;
  }
  double& at(int c, int t, int h, int w) { return data[index(c, t, h, w)]; }
  double at(int c, int t, int h, int w) const { return data[index(c, t, h, w)]; }

  bool same_shape(const FeatureMap& other) const {
    return channels == other.channels && frames == other.frames && height == other.height &&
           width == other.width;
  }
  bool all_finite() const;

  bool operator==(const FeatureMap&) const = default;
};

/// Small N-d array used for decomposed (pooled) features.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> dims, double fill = 0.0);

  std::size_t size() const { return data.size(); }
  bool operator==(const Tensor&) const = default;
};

/// Sum of squared element-wise differences. Shapes must match.
double squared_distance(const std::vector<double>& a, const std::vector<double>& b);

/// Sampling weights for bilinear interpolation at a fractional position inside an H x W grid.
struct BilinearTap {
  int h0 = 0, w0 = 0, h1 = 0, w1 = 0;
  double w00 = 1.0, w01 = 0.0, w10 = 0.0, w11 = 0.0;
};

/// The position is clamped to [0,H-1] x [0,W-1] first.
BilinearTap bilinear_tap(double h, double w, int height, int width);

}  // namespace civc
