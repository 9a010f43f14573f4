#include "civc/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include <json.hpp>

#include "civc/errors.hpp"

namespace civc::model {

namespace {

constexpr int kKernel = 3;
constexpr int kTaps = kKernel * kKernel;

// Column matrix (C*9) x (T*H*W) for a frame-wise 3x3 convolution with zero padding.
void im2col(const std::vector<double>& input, int channels, int frames, int height, int width,
            std::vector<double>& columns) {
  const std::size_t plane = static_cast<std::size_t>(frames) * height * width;
  columns.assign(static_cast<std::size_t>(channels) * kTaps * plane, 0.0);
  for (int c = 0; c < channels; ++c) {
    for (int kh = 0; kh < kKernel; ++kh) {
      for (int kw = 0; kw < kKernel; ++kw) {
        double* row = columns.data() + (static_cast<std::size_t>(c) * kTaps + kh * kKernel + kw) * plane;
        for (int t = 0; t < frames; ++t) {
          const double* src = input.data() + (static_cast<std::size_t>(c) * frames + t) * height * width;
          double* dst = row + static_cast<std::size_t>(t) * height * width;
          for (int h = 0; h < height; ++h) {
            const int sh = h + kh - 1;
            if (sh < 0 || sh >= height) continue;
            for (int w = 0; w < width; ++w) {
              const int sw = w + kw - 1;
              if (sw < 0 || sw >= width) continue;
              dst[h * width + w] = src[sh * width + sw];
            }
          }
        }
      }
    }
  }
}

void col2im(const std::vector<double>& columns, int channels, int frames, int height, int width,
            std::vector<double>& input_grad) {
  const std::size_t plane = static_cast<std::size_t>(frames) * height * width;
  input_grad.assign(static_cast<std::size_t>(channels) * plane, 0.0);
  for (int c = 0; c < channels; ++c) {
    for (int kh = 0; kh < kKernel; ++kh) {
      for (int kw = 0; kw < kKernel; ++kw) {
        const double* row =
            columns.data() + (static_cast<std::size_t>(c) * kTaps + kh * kKernel + kw) * plane;
        for (int t = 0; t < frames; ++t) {
          double* dst = input_grad.data() + (static_cast<std::size_t>(c) * frames + t) * height * width;
          const double* src = row + static_cast<std::size_t>(t) * height * width;
          for (int h = 0; h < height; ++h) {
            const int sh = h + kh - 1;
            if (sh < 0 || sh >= height) continue;
            for (int w = 0; w < width; ++w) {
              const int sw = w + kw - 1;
              if (sw < 0 || sw >= width) continue;
              dst[sh * width + sw] += src[h * width + w];
            }
          }
        }
      }
    }
  }
}

// Channels [0, fold) take the previous frame, [fold, 2 fold) the next frame; zero at clip edges.
std::vector<double> temporal_shift(const std::vector<double>& in, int channels, int frames,
                                   std::size_t plane, int fold) {
  std::vector<double> out(in.size(), 0.0);
  for (int c = 0; c < channels; ++c) {
    for (int t = 0; t < frames; ++t) {
      int src_t = t;
      if (c < fold) src_t = t - 1;
      else if (c < 2 * fold) src_t = t + 1;
      if (src_t < 0 || src_t >= frames) continue;
      std::copy_n(in.begin() + static_cast<std::ptrdiff_t>((static_cast<std::size_t>(c) * frames + src_t) * plane),
                  plane, out.begin() + static_cast<std::ptrdiff_t>((static_cast<std::size_t>(c) * frames + t) * plane));
    }
  }
  return out;
}

std::vector<double> temporal_shift_backward(const std::vector<double>& grad_out, int channels,
                                            int frames, std::size_t plane, int fold) {
  std::vector<double> grad_in(grad_out.size(), 0.0);
  for (int c = 0; c < channels; ++c) {
    for (int t = 0; t < frames; ++t) {
      int src_t = t;
      if (c < fold) src_t = t - 1;
      else if (c < 2 * fold) src_t = t + 1;
      if (src_t < 0 || src_t >= frames) continue;
      const double* g = grad_out.data() + (static_cast<std::size_t>(c) * frames + t) * plane;
      double* dst = grad_in.data() + (static_cast<std::size_t>(c) * frames + src_t) * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] += g[i];
    }
  }
  return grad_in;
}

std::vector<double> avg_pool2(const std::vector<double>& in, int channels_frames, int height,
                              int width) {
  const int oh = height / 2, ow = width / 2;
  std::vector<double> out(static_cast<std::size_t>(channels_frames) * oh * ow);
  for (int ct = 0; ct < channels_frames; ++ct) {
    const double* src = in.data() + static_cast<std::size_t>(ct) * height * width;
    double* dst = out.data() + static_cast<std::size_t>(ct) * oh * ow;
    for (int h = 0; h < oh; ++h)
      for (int w = 0; w < ow; ++w)
        dst[h * ow + w] = 0.25 * (src[(2 * h) * width + 2 * w] + src[(2 * h) * width + 2 * w + 1] +
                                  src[(2 * h + 1) * width + 2 * w] +
                                  src[(2 * h + 1) * width + 2 * w + 1]);
  }
  return out;
}

std::vector<double> avg_pool2_backward(const std::vector<double>& grad_out, int channels_frames,
                                       int height, int width) {
  const int oh = height / 2, ow = width / 2;
  std::vector<double> grad_in(static_cast<std::size_t>(channels_frames) * height * width);
  for (int ct = 0; ct < channels_frames; ++ct) {
    const double* g = grad_out.data() + static_cast<std::size_t>(ct) * oh * ow;
    double* dst = grad_in.data() + static_cast<std::size_t>(ct) * height * width;
    for (int h = 0; h < height; ++h)
      for (int w = 0; w < width; ++w) dst[h * width + w] = 0.25 * g[(h / 2) * ow + w / 2];
  }
  return grad_in;
}

}  // namespace

int BackboneConfig::feature_height() const {
  int h = input.height;
  for (bool pool : pool_after)
    if (pool) h /= 2;
  return h;
}

int BackboneConfig::feature_width() const {
  int w = input.width;
  for (bool pool : pool_after)
    if (pool) w /= 2;
  return w;
}

void BackboneConfig::validate() const {
  if (widths.empty()) throw ConfigError("model.widths must not be empty");
  if (pool_after.size() != widths.size())
    throw ConfigError("model.pool_after must have one entry per layer");
  if (segments < 1) throw ConfigError("model.segments must be >= 1");
  if (shift_div < 1) throw ConfigError("model.shift_div must be >= 1");
  int h = input.height, w = input.width;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    if (widths[i] < 1) throw ConfigError("model.widths entries must be >= 1");
    if (pool_after[i]) {
      if (h % 2 != 0 || w % 2 != 0)
        throw ConfigError("model: pooling layer needs even spatial size");
      h /= 2;
      w /= 2;
    }
  }
  if (h < 1 || w < 1) throw ConfigError("model: feature map collapsed to zero size");
}

Backbone init_backbone(const BackboneConfig& config, std::uint64_t seed) {
  config.validate();
  Backbone backbone;
  backbone.config = config;
  std::mt19937_64 rng(seed);
  int in = config.input.channels;
  for (int out : config.widths) {
    ConvLayer layer;
    layer.in_channels = in;
    layer.out_channels = out;
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / (in * kTaps)));
    layer.weight.resize(static_cast<std::size_t>(out) * in * kTaps);
    for (auto& v : layer.weight) v = dist(rng);
    layer.bias.assign(static_cast<std::size_t>(out), 0.0);
    backbone.layers.push_back(std::move(layer));
    in = out;
  }
  return backbone;
}

Classifier init_classifier(int feature_dim, int num_classes, std::uint64_t seed) {
  require(feature_dim >= 1 && num_classes >= 0, "init_classifier: bad dimensions");
  Classifier head;
  head.feature_dim = feature_dim;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(feature_dim)));
  head.weight.resize(static_cast<std::size_t>(num_classes) * feature_dim);
  for (auto& v : head.weight) v = dist(rng);
  head.bias.assign(static_cast<std::size_t>(num_classes), 0.0);
  return head;
}

Model zeros_like(const Model& model) {
  Model out = model;
  for (auto view : parameter_views(out)) std::fill(view.begin(), view.end(), 0.0);
  return out;
}

std::vector<std::span<double>> parameter_views(Model& model) {
  std::vector<std::span<double>> views;
  for (auto& layer : model.backbone.layers) {
    views.emplace_back(layer.weight);
    views.emplace_back(layer.bias);
  }
  views.emplace_back(model.head.weight);
  views.emplace_back(model.head.bias);
  return views;
}

std::vector<std::span<const double>> parameter_views(const Model& model) {
  std::vector<std::span<const double>> views;
  for (const auto& layer : model.backbone.layers) {
    views.emplace_back(layer.weight);
    views.emplace_back(layer.bias);
  }
  views.emplace_back(model.head.weight);
  views.emplace_back(model.head.bias);
  return views;
}

std::size_t parameter_count(const Model& model) {
  std::size_t n = 0;
  for (auto view : parameter_views(model)) n += view.size();
  return n;
}

FeatureMap extract_features(const Backbone& backbone, const dataio::Clip& clip,
                            BackboneTrace* trace) {
  const auto& cfg = backbone.config;
  if (clip.length() != cfg.segments)
    throw ContractViolation("extract_features: clip has " + std::to_string(clip.length()) +
                            " frames, model expects " + std::to_string(cfg.segments));
  if (!(clip.shape == cfg.input)) throw ContractViolation("extract_features: frame shape mismatch");

  const int frames = cfg.segments;
  int channels = cfg.input.channels;
  int height = cfg.input.height;
  int width = cfg.input.width;

  // C x T x H x W input, centered around zero
  std::vector<double> x(static_cast<std::size_t>(channels) * frames * height * width);
  for (int t = 0; t < frames; ++t) {
    const auto& frame = clip.frames[static_cast<std::size_t>(t)];
    require(frame.size() == cfg.input.values(), "extract_features: frame has wrong size");
    for (int h = 0; h < height; ++h)
      for (int w = 0; w < width; ++w)
        for (int c = 0; c < channels; ++c)
          x[((static_cast<std::size_t>(c) * frames + t) * height + h) * width + w] =
              static_cast<double>(frame[(static_cast<std::size_t>(h) * width + w) * channels + c]) - 0.5;
  }

  if (trace) trace->layers.assign(backbone.layers.size(), {});
  std::vector<double> columns;
  for (std::size_t l = 0; l < backbone.layers.size(); ++l) {
    const auto& layer = backbone.layers[l];
    const std::size_t plane = static_cast<std::size_t>(height) * width;
    const std::size_t n = static_cast<std::size_t>(frames) * plane;
    if (l > 0) x = temporal_shift(x, channels, frames, plane, channels / cfg.shift_div);
    im2col(x, channels, frames, height, width, columns);

    const int rows = channels * kTaps;
    std::vector<double> out(static_cast<std::size_t>(layer.out_channels) * n);
    for (int oc = 0; oc < layer.out_channels; ++oc) {
      double* dst = out.data() + static_cast<std::size_t>(oc) * n;
      std::fill(dst, dst + n, layer.bias[static_cast<std::size_t>(oc)]);
      const double* wrow = layer.weight.data() + static_cast<std::size_t>(oc) * rows;
      for (int k = 0; k < rows; ++k) {
        const double wv = wrow[k];
        const double* col = columns.data() + static_cast<std::size_t>(k) * n;
        for (std::size_t i = 0; i < n; ++i) dst[i] += wv * col[i];
      }
    }
    for (auto& v : out) v = v > 0.0 ? v : 0.0;

    channels = layer.out_channels;
    if (cfg.pool_after[l]) {
      x = avg_pool2(out, channels * frames, height, width);
    } else {
      x = out;
    }
    if (trace) {
      auto& rec = trace->layers[l];
      rec.height = height;
      rec.width = width;
      rec.columns = std::move(columns);
      rec.activation = std::move(out);
      columns.clear();
    }
    if (cfg.pool_after[l]) {
      height /= 2;
      width /= 2;
    }
  }

  FeatureMap fmap;
  fmap.channels = channels;
  fmap.frames = frames;
  fmap.height = height;
  fmap.width = width;
  fmap.data = std::move(x);
  return fmap;
}

void backward_features(const Backbone& backbone, const BackboneTrace& trace,
                       const FeatureMap& grad_features, Backbone& grads) {
  const auto& cfg = backbone.config;
  require(trace.layers.size() == backbone.layers.size(), "backward_features: trace mismatch");
  require(grads.layers.size() == backbone.layers.size(), "backward_features: grads mismatch");
  const int frames = cfg.segments;
  std::vector<double> g = grad_features.data;

  for (std::size_t li = backbone.layers.size(); li-- > 0;) {
    const auto& layer = backbone.layers[li];
    auto& glayer = grads.layers[li];
    const auto& rec = trace.layers[li];
    const int height = rec.height, width = rec.width;
    const std::size_t plane = static_cast<std::size_t>(height) * width;
    const std::size_t n = static_cast<std::size_t>(frames) * plane;

    if (cfg.pool_after[li]) g = avg_pool2_backward(g, layer.out_channels * frames, height, width);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (rec.activation[i] <= 0.0) g[i] = 0.0;

    const int rows = layer.in_channels * kTaps;
    for (int oc = 0; oc < layer.out_channels; ++oc) {
      const double* go = g.data() + static_cast<std::size_t>(oc) * n;
      double bsum = 0.0;
      for (std::size_t i = 0; i < n; ++i) bsum += go[i];
      glayer.bias[static_cast<std::size_t>(oc)] += bsum;
      double* gw = glayer.weight.data() + static_cast<std::size_t>(oc) * rows;
      for (int k = 0; k < rows; ++k) {
        const double* col = rec.columns.data() + static_cast<std::size_t>(k) * n;
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += go[i] * col[i];
        gw[k] += acc;
      }
    }
    if (li == 0) break;

    std::vector<double> gcols(static_cast<std::size_t>(rows) * n, 0.0);
    for (int oc = 0; oc < layer.out_channels; ++oc) {
      const double* go = g.data() + static_cast<std::size_t>(oc) * n;
      const double* wrow = layer.weight.data() + static_cast<std::size_t>(oc) * rows;
      for (int k = 0; k < rows; ++k) {
        const double wv = wrow[k];
        double* gc = gcols.data() + static_cast<std::size_t>(k) * n;
        for (std::size_t i = 0; i < n; ++i) gc[i] += wv * go[i];
      }
    }
    std::vector<double> gshifted;
    col2im(gcols, layer.in_channels, frames, height, width, gshifted);
    g = temporal_shift_backward(gshifted, layer.in_channels, frames, plane,
                                layer.in_channels / cfg.shift_div);
  }
}

std::vector<double> global_average(const FeatureMap& features) {
  const std::size_t per = static_cast<std::size_t>(features.frames) * features.height * features.width;
  std::vector<double> pooled(static_cast<std::size_t>(features.channels), 0.0);
  for (int c = 0; c < features.channels; ++c) {
    const double* src = features.data.data() + static_cast<std::size_t>(c) * per;
    double sum = 0.0;
    for (std::size_t i = 0; i < per; ++i) sum += src[i];
    pooled[static_cast<std::size_t>(c)] = sum / static_cast<double>(per);
  }
  return pooled;
}

void global_average_backward(std::span<const double> grad_pooled, FeatureMap& grad_features) {
  require(grad_pooled.size() == static_cast<std::size_t>(grad_features.channels),
          "global_average_backward: channel mismatch");
  const std::size_t per =
      static_cast<std::size_t>(grad_features.frames) * grad_features.height * grad_features.width;
  for (int c = 0; c < grad_features.channels; ++c) {
    const double g = grad_pooled[static_cast<std::size_t>(c)] / static_cast<double>(per);
    double* dst = grad_features.data.data() + static_cast<std::size_t>(c) * per;
    for (std::size_t i = 0; i < per; ++i) dst[i] += g;
  }
}

std::vector<double> classify(std::span<const double> pooled, const Classifier& head) {
  require(pooled.size() == static_cast<std::size_t>(head.feature_dim),
          "classify: feature dimension mismatch");
  std::vector<double> logits(head.bias);
  for (int j = 0; j < head.num_classes(); ++j) {
    const double* row = head.weight.data() + static_cast<std::size_t>(j) * head.feature_dim;
    double acc = 0.0;
    for (int d = 0; d < head.feature_dim; ++d) acc += row[d] * pooled[static_cast<std::size_t>(d)];
    logits[static_cast<std::size_t>(j)] += acc;
  }
  return logits;
}

std::vector<double> classify_backward(std::span<const double> pooled, const Classifier& head,
                                      std::span<const double> grad_logits, Classifier& grads) {
  require(grad_logits.size() == static_cast<std::size_t>(head.num_classes()),
          "classify_backward: logit count mismatch");
  std::vector<double> grad_pooled(static_cast<std::size_t>(head.feature_dim), 0.0);
  for (int j = 0; j < head.num_classes(); ++j) {
    const double gj = grad_logits[static_cast<std::size_t>(j)];
    if (gj == 0.0) continue;
    const double* row = head.weight.data() + static_cast<std::size_t>(j) * head.feature_dim;
    double* grow = grads.weight.data() + static_cast<std::size_t>(j) * head.feature_dim;
    for (int d = 0; d < head.feature_dim; ++d) {
      grow[d] += gj * pooled[static_cast<std::size_t>(d)];
      grad_pooled[static_cast<std::size_t>(d)] += gj * row[d];
    }
    grads.bias[static_cast<std::size_t>(j)] += gj;
  }
  return grad_pooled;
}

Classifier expand_classifier(const Classifier& head, int n_new, std::uint64_t seed) {
  require(n_new >= 1, "expand_classifier: n_new must be >= 1");
  const Classifier fresh = init_classifier(head.feature_dim, n_new, seed);
  Classifier out = head;
  out.weight.insert(out.weight.end(), fresh.weight.begin(), fresh.weight.end());
  out.bias.insert(out.bias.end(), fresh.bias.begin(), fresh.bias.end());
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const CheckpointHeader& header) {
  nlohmann::json meta = {{"format", "civc-checkpoint"},
                         {"version", 1},
                         {"config_hash", header.config_hash},
                         {"session_index", header.session_index},
                         {"num_classes", model.head.num_classes()},
                         {"feature_dim", model.head.feature_dim},
                         {"parameter_count", parameter_count(model)}};
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    out << meta.dump() << '\n';
    for (auto view : parameter_views(model))
      out.write(reinterpret_cast<const char*>(view.data()),
                static_cast<std::streamsize>(view.size() * sizeof(double)));
  }
  std::filesystem::rename(tmp, path);
}

Model load_checkpoint(const std::filesystem::path& path, const BackboneConfig& config,
                      CheckpointHeader* header) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::string line;
  std::getline(in, line);
  const auto meta = nlohmann::json::parse(line);
  if (meta.at("format") != "civc-checkpoint" || meta.at("version") != 1)
    throw std::runtime_error("not a civc checkpoint: " + path.string());

  Model model;
  model.backbone = init_backbone(config, 0);
  model.head = init_classifier(config.feature_channels(), meta.at("num_classes").get<int>(), 0);
  if (meta.at("parameter_count").get<std::size_t>() != parameter_count(model))
    throw std::runtime_error("checkpoint does not match the model configuration");
  for (auto view : parameter_views(model)) {
    in.read(reinterpret_cast<char*>(view.data()),
            static_cast<std::streamsize>(view.size() * sizeof(double)));
    if (!in) throw std::runtime_error("truncated checkpoint " + path.string());
  }
  if (header) {
    header->config_hash = meta.at("config_hash").get<std::string>();
    header->session_index = meta.at("session_index").get<int>();
    header->num_classes = meta.at("num_classes").get<int>();
  }
  return model;
}

}  // namespace civc::model
