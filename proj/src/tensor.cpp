#include "civc/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "civc/errors.hpp"

namespace civc {

FeatureMap::FeatureMap(int c, int t, int h, int w, double fill)
    : channels(c), frames(t), height(h), width(w) {
  require(c >= 0 && t >= 0 && h >= 0 && w >= 0, "FeatureMap: negative dimension");
  data.assign(static_cast<std::size_t>(c) * t * h * w, fill);
}

bool FeatureMap::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

Tensor::Tensor(std::vector<int> dims, double fill) : shape(std::move(dims)) {
  std::size_t n = 1;
  for (int d : shape) {
    require(d >= 0, "Tensor: negative dimension");
    n *= static_cast<std::size_t>(d);
  }
  data.assign(n, fill);
}

double squared_distance(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size(), "squared_distance: size mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    sum += d * d;
  }
  return sum;
}

BilinearTap bilinear_tap(double h, double w, int height, int width) {
  h = std::clamp(h, 0.0, static_cast<double>(height - 1));
  w = std::clamp(w, 0.0, static_cast<double>(width - 1));
  BilinearTap tap;
  tap.h0 = static_cast<int>(std::floor(h));
  tap.w0 = static_cast<int>(std::floor(w));
  tap.h1 = std::min(tap.h0 + 1, height - 1);
  tap.w1 = std::min(tap.w0 + 1, width - 1);
  const double fh = h - tap.h0;
  const double fw = w - tap.w0;
  tap.w00 = (1.0 - fh) * (1.0 - fw);
  tap.w01 = (1.0 - fh) * fw;
  tap.w10 = fh * (1.0 - fw);
  tap.w11 = fh * fw;
  return tap;
}

}  // namespace civc
