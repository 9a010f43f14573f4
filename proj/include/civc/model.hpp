#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "civc/dataio.hpp"
#include "civc/tensor.hpp"

namespace civc::model {

/// Frame-wise 3x3 conv stack with temporal channel shifts between layers.
struct BackboneConfig {
  dataio::FrameShape input;
  int segments = 8;
  std::vector<int> widths{16, 32, 32, 32};
  std::vector<bool> pool_after{true, true, false, false};  // 2x2 average pooling
  int shift_div = 8;  // 1/shift_div of channels moves forward in time, 1/shift_div backward

  int feature_channels() const { return widths.empty() ? 0 : widths.back(); }
  int feature_height() const;
  int feature_width() const;
  void validate() const;
  bool operator==(const BackboneConfig&) const = default;
};

struct ConvLayer {
  int in_channels = 0;
  int out_channels = 0;
  std::vector<double> weight;  // out x in x 3 x 3
  std::vector<double> bias;    // out

  bool operator==(const ConvLayer&) const = default;
};

struct Backbone {
  BackboneConfig config;
  std::vector<ConvLayer> layers;

  bool operator==(const Backbone&) const = default;
};

/// Linear head, one weight row and bias per known class.
struct Classifier {
  int feature_dim = 0;
  std::vector<double> weight;  // classes x feature_dim
  std::vector<double> bias;    // classes

  int num_classes() const { return static_cast<int>(bias.size()); }
  bool operator==(const Classifier&) const = default;
};

struct Model {
  Backbone backbone;
  Classifier head;

  bool operator==(const Model&) const = default;
};

Backbone init_backbone(const BackboneConfig& config, std::uint64_t seed);
/// Weights drawn from N(0, 1/feature_dim), zero bias.
Classifier init_classifier(int feature_dim, int num_classes, std::uint64_t seed);

/// Same structure, every parameter zero.
Model zeros_like(const Model& model);
/// Flat views over every parameter tensor, in a fixed order.
std::vector<std::span<double>> parameter_views(Model& model);
std::vector<std::span<const double>> parameter_views(const Model& model);
std::size_t parameter_count(const Model& model);

/// Per-layer activations retained for the backward pass.
struct BackboneTrace {
  struct Layer {
    int height = 0, width = 0;          // conv resolution
    std::vector<double> columns;        // im2col of the (shifted) input
    std::vector<double> activation;     // post-ReLU conv output, C x T x H x W
  };
  std::vector<Layer> layers;
};

/// C x T x H x W features for a clip of exactly `segments` frames.
FeatureMap extract_features(const Backbone& backbone, const dataio::Clip& clip,
                            BackboneTrace* trace = nullptr);

/// Accumulates d(loss)/d(theta) into `grads` given d(loss)/d(features).
void backward_features(const Backbone& backbone, const BackboneTrace& trace,
                       const FeatureMap& grad_features, Backbone& grads);

/// Mean over T, H, W.
std::vector<double> global_average(const FeatureMap& features);
/// Distributes a gradient on the pooled vector back onto the map (accumulating).
void global_average_backward(std::span<const double> grad_pooled, FeatureMap& grad_features);

std::vector<double> classify(std::span<const double> pooled, const Classifier& head);
/// Accumulates head gradients and returns d(loss)/d(pooled).
std::vector<double> classify_backward(std::span<const double> pooled, const Classifier& head,
                                      std::span<const double> grad_logits, Classifier& grads);

/// Old rows copied verbatim, `n_new` seeded rows appended.
Classifier expand_classifier(const Classifier& head, int n_new, std::uint64_t seed);

/// Checkpoint: one JSON header line, then raw little-endian float64 parameters.
struct CheckpointHeader {
  std::string config_hash;
  int session_index = 0;
  int num_classes = 0;
};
void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const CheckpointHeader& header);
/// `config` supplies the architecture; the class count comes from the header.
Model load_checkpoint(const std::filesystem::path& path, const BackboneConfig& config,
                      CheckpointHeader* header = nullptr);

}  // namespace civc::model
