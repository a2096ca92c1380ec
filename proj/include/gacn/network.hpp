#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cstdint>
#include <span>
#include <vector>

#include "gacn/image.hpp"
#include "gacn/tensor.hpp"
#include "gacn/weights.hpp"

namespace gacn {

struct ExtractionConfig {
  std::size_t num_layers = 4;
  std::size_t channels_per_layer = 16;
  std::size_t kernel_size = 3;
  std::size_t se_reduction = 4;
  std::size_t sf_radius = 5;

  void validate() const;
  /// Input channels of extraction layer `layer` under dense connectivity.
  std::size_t input_channels(std::size_t layer) const { return 1 + layer * channels_per_layer; }
  std::size_t se_hidden() const { return std::max<std::size_t>(1, channels_per_layer / se_reduction); }
};

struct SSEConfig {
  std::size_t kernel_size = 7;
};

struct DecisionConfig {
  std::array<std::size_t, 3> widths{32, 16, 8};
  std::size_t kernel_size = 3;
};

struct GuidedFilterConfig {
  std::size_t radius = 4;
  double eps = 0.1;
  double threshold_low = 0.1;
  double threshold_high = 0.8;

  void validate() const;
};

struct NetworkConfig {
  ExtractionConfig extraction;
  DecisionConfig decision;
  SSEConfig sse;
  GuidedFilterConfig guided;

  void validate() const;
};

/// The four per-scale feature maps of one image, all at input resolution.
struct FeaturePyramid {
  std::vector<Tensor> scales;
};

enum class DecisionMapKind { initial, smooth, final };

/// Per-pixel probability that source A is the sharper one.
struct DecisionMap {
  Tensor p;
  DecisionMapKind kind = DecisionMapKind::initial;
};

/// Parameter layout with zero tensors; used to validate files.
WeightStore weight_layout(const NetworkConfig& cfg);
/// Kaiming-uniform (fan-in) weights, rounded to float32. Biases are zero except the
/// channel-SE hidden layer, which starts at 0.5.
WeightStore init_weights(const NetworkConfig& cfg, std::uint64_t seed);

/// Squeeze over space, excite channels: pool -> dense -> relu -> dense -> sigmoid -> rescale.
Tensor channel_se(Tape* tape, const Tensor& x, const Tensor& fc1_w, const Tensor& fc1_b,
                  const Tensor& fc2_w, const Tensor& fc2_b);
/// Squeeze channels, excite space: one k x k conv to a single map -> sigmoid -> rescale.
Tensor spatial_se(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b);

/// Siamese dense extraction path over a [1,1,H,W] image.
FeaturePyramid extract_features(Tape* tape, const Tensor& img, const ExtractionConfig& cfg,
                                const WeightStore& w);

/// Pixel-wise spatial frequency of a [B,C,H,W] feature map over a (2r+1)^2
/// window with replicate borders: sqrt((RF^2 + CF^2) / (2r+1)^2) -> [B,1,H,W].
Tensor spatial_frequency(Tape* tape, const Tensor& features, std::size_t radius);

/// Per-scale SF^A - SF^B, concatenated into one [1,S,H,W] tensor.
Tensor activity_difference(Tape* tape, std::span<const Tensor> sf_a, std::span<const Tensor> sf_b);

/// Four-conv decision path with spatial SE; returns the initial DM in [0,1].
Tensor decide(Tape* tape, const Tensor& activity, const NetworkConfig& cfg, const WeightStore& w);

/// 1 where threshold_low <= p <= threshold_high (closed band). Not differentiated.
std::vector<std::uint8_t> boundary_region(const Tensor& dm, const GuidedFilterConfig& cfg);

/// Box-filter guided filter of a [1,1,H,W] map steered by `guide`; output clamped to [0,1].
/// The guide is a constant; gradients flow into `input` only.
Tensor guided_filter(Tape* tape, const Tensor& input, std::span<const double> guide,
                     const GuidedFilterConfig& cfg);

/// Smooth DM on boundary pixels, initial DM elsewhere.
Tensor compose_final_dm(Tape* tape, const Tensor& initial, const Tensor& smooth,
                        std::span<const std::uint8_t> boundary);

/// F = p*A + (1-p)*B per pixel.
Tensor fuse(Tape* tape, const Tensor& dm, const Tensor& a, const Tensor& b);
/// Applies one single-channel DM to every channel of two same-size images.
Image fuse_color(const Tensor& dm, const Image& a, const Image& b);

/// Extraction / decision path invocation counters.
struct PathCounters {
  std::atomic<std::size_t> extraction{0};
  std::atomic<std::size_t> decision{0};
  void reset() {
    extraction = 0;
    decision = 0;
  }
};

struct PairOutput {
  Tensor dm_initial;
  Tensor dm_smooth;
  Tensor dm_final;
  Tensor fused;
  std::vector<std::uint8_t> boundary;
};

/// GACN: configuration plus weights. Inference never mutates the weights, so one
/// model may serve concurrent fusions; only the counters change.
class GacnModel {
 public:
  GacnModel(NetworkConfig cfg, WeightStore weights);

  const NetworkConfig& config() const { return cfg_; }
  const WeightStore& weights() const { return weights_; }
  WeightStore& weights() { return weights_; }
  PathCounters& counters() const { return counters_; }

  /// Feature extraction followed by per-scale SF: the activity inputs of one image.
  std::vector<Tensor> activity_maps(Tape* tape, const Tensor& img) const;
  /// Decision path from the SF maps of two images to the initial DM.
  Tensor initial_dm(Tape* tape, std::span<const Tensor> sf_a, std::span<const Tensor> sf_b) const;
  /// Boundary smoothing and composition of the final DM. `frozen_boundary`, when
  /// given, replaces the thresholded mask.
  PairOutput finish(Tape* tape, Tensor dm_initial, const Tensor& a, const Tensor& b,
                    const std::vector<std::uint8_t>* frozen_boundary = nullptr) const;

  /// Full two-image forward pass on [1,1,H,W] grayscale tensors.
  PairOutput forward(Tape* tape, const Tensor& a, const Tensor& b,
                     const std::vector<std::uint8_t>* frozen_boundary = nullptr) const;

 private:
  NetworkConfig cfg_;
  WeightStore weights_;
  mutable PathCounters counters_;
};

/// Pixel-wise mean of two [1,1,H,W] tensors, the guided-filter guide.
std::vector<double> mean_guide(const Tensor& a, const Tensor& b);

struct FusionResult {
  Image fused;
  Image dm_initial;
  Image dm_final;
};

/// Fuses two gray or RGB images: the DM comes from their luma, the fused output
/// keeps the input channel count.
FusionResult fuse_images(const GacnModel& model, const Image& a, const Image& b);

}  // namespace gacn
