#include "gacn/network.hpp"

#include <cmath>
#include <string>

#include "gacn/ops.hpp"
#include "gacn/random.hpp"

namespace gacn {
namespace {

constexpr double kSeHiddenBias = 0.5;

std::string extract_name(std::size_t layer, const char* part) {
  return "extract." + std::to_string(layer) + "." + part;
}

std::string decide_name(std::size_t layer, const char* part) {
  return "decide." + std::to_string(layer) + "." + part;
}

void add_conv(WeightStore& w, const std::string& prefix_w, const std::string& prefix_b,
              std::size_t cout, std::size_t cin, std::size_t k) {
  w.add(prefix_w, Tensor({cout, cin, k, k}, 0.0, true));
  w.add(prefix_b, Tensor({cout}, 0.0, true));
}

}  // namespace

void ExtractionConfig::validate() const {
  if (num_layers != 4) throw std::invalid_argument("extraction path has exactly 4 layers");
  if (channels_per_layer == 0 || se_reduction == 0) {
    throw std::invalid_argument("channel width and SE reduction must be positive");
  }
  if (kernel_size % 2 == 0) throw std::invalid_argument("kernel size must be odd");
}

void GuidedFilterConfig::validate() const {
  if (radius == 0 || eps <= 0.0) throw std::invalid_argument("guided filter needs radius > 0, eps > 0");
  if (!(threshold_low >= 0.0 && threshold_low < threshold_high && threshold_high <= 1.0)) {
    throw std::invalid_argument("boundary band must satisfy 0 <= low < high <= 1");
  }
}

void NetworkConfig::validate() const {
  extraction.validate();
  guided.validate();
  if (sse.kernel_size % 2 == 0 || decision.kernel_size % 2 == 0) {
    throw std::invalid_argument("SSE and decision kernels must be odd");
  }
}

// Layer names: extract.<L>.{conv_w,conv_b,fc1_w,fc1_b,fc2_w,fc2_b}
//              decide.<L>.{conv_w,conv_b} for L = 0..3, decide.<L>.{sse_w,sse_b} for L = 0..2
WeightStore weight_layout(const NetworkConfig& cfg) {
  cfg.validate();
  WeightStore w;
  const auto& ex = cfg.extraction;
  const std::size_t C = ex.channels_per_layer, hidden = ex.se_hidden();
  for (std::size_t l = 0; l < ex.num_layers; ++l) {
    add_conv(w, extract_name(l, "conv_w"), extract_name(l, "conv_b"), C, ex.input_channels(l),
             ex.kernel_size);
    w.add(extract_name(l, "fc1_w"), Tensor({hidden, C}, 0.0, true));
    w.add(extract_name(l, "fc1_b"), Tensor({hidden}, 0.0, true));
    w.add(extract_name(l, "fc2_w"), Tensor({C, hidden}, 0.0, true));
    w.add(extract_name(l, "fc2_b"), Tensor({C}, 0.0, true));
  }
  std::size_t cin = ex.num_layers;
  const std::size_t k = cfg.decision.kernel_size;
  for (std::size_t l = 0; l < 3; ++l) {
    const std::size_t cout = cfg.decision.widths[l];
    add_conv(w, decide_name(l, "conv_w"), decide_name(l, "conv_b"), cout, cin, k);
    add_conv(w, decide_name(l, "sse_w"), decide_name(l, "sse_b"), 1, cout, cfg.sse.kernel_size);
    cin = cout;
  }
  add_conv(w, decide_name(3, "conv_w"), decide_name(3, "conv_b"), 1, cin, k);
  return w;
}

WeightStore init_weights(const NetworkConfig& cfg, std::uint64_t seed) {
  WeightStore w = weight_layout(cfg);
  Rng rng(seed);
  for (auto& [name, t] : w) {
    if (t.rank() < 2) continue;  // biases stay zero
    std::size_t fan_in = 1;
    for (std::size_t d = 1; d < t.rank(); ++d) fan_in *= t.dim(d);
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (double& v : t.values()) v = rng.uniform(-bound, bound);
  }
  // The squeeze input is non-negative, so a hidden unit whose weights sum
  // negative would start (and stay) dead; a positive bias keeps it active.
  for (std::size_t l = 0; l < cfg.extraction.num_layers; ++l) {
    for (double& v : w.at(extract_name(l, "fc1_b")).values()) v = kSeHiddenBias;
  }
  round_to_float(w);
  return w;
}

Tensor channel_se(Tape* tape, const Tensor& x, const Tensor& fc1_w, const Tensor& fc1_b,
                  const Tensor& fc2_w, const Tensor& fc2_b) {
  Tensor squeezed = ops::global_avg_pool(tape, x);
  Tensor hidden = ops::relu(tape, ops::dense(tape, squeezed, fc1_w, fc1_b));
  Tensor gate = ops::sigmoid(tape, ops::dense(tape, hidden, fc2_w, fc2_b));
  return ops::channel_scale(tape, x, gate);
}

Tensor spatial_se(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor gate = ops::sigmoid(tape, ops::conv2d(tape, x, w, b));
  return ops::spatial_scale(tape, x, gate);
}

FeaturePyramid extract_features(Tape* tape, const Tensor& img, const ExtractionConfig& cfg,
                                const WeightStore& w) {
  if (img.rank() != 4 || img.dim(1) != 1) {
    throw ShapeError("extract_features: expected a [1,1,H,W] image, got " +
                     shape_string(img.shape()));
  }
  const std::size_t min_side = 2 * cfg.sf_radius + 1;
  if (img.dim(2) < min_side || img.dim(3) < min_side) {
    throw ShapeError("extract_features: image " + std::to_string(img.dim(3)) + "x" +
                     std::to_string(img.dim(2)) + " is smaller than the " +
                     std::to_string(min_side) + "x" + std::to_string(min_side) + " SF window");
  }
  FeaturePyramid pyramid;
  std::vector<Tensor> dense_inputs{img};
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    Tensor in = l == 0 ? img : ops::concat_channels(tape, dense_inputs);
    Tensor y = ops::conv2d(tape, in, w.at(extract_name(l, "conv_w")), w.at(extract_name(l, "conv_b")));
    y = ops::relu(tape, y);
    y = channel_se(tape, y, w.at(extract_name(l, "fc1_w")), w.at(extract_name(l, "fc1_b")),
                   w.at(extract_name(l, "fc2_w")), w.at(extract_name(l, "fc2_b")));
    pyramid.scales.push_back(y);
    dense_inputs.push_back(y);
  }
  return pyramid;
}

Tensor decide(Tape* tape, const Tensor& activity, const NetworkConfig& cfg, const WeightStore& w) {
  (void)cfg;
  Tensor x = activity;
  for (std::size_t l = 0; l < 3; ++l) {
    x = ops::conv2d(tape, x, w.at(decide_name(l, "conv_w")), w.at(decide_name(l, "conv_b")));
    x = ops::relu(tape, x);
    x = spatial_se(tape, x, w.at(decide_name(l, "sse_w")), w.at(decide_name(l, "sse_b")));
  }
  x = ops::conv2d(tape, x, w.at(decide_name(3, "conv_w")), w.at(decide_name(3, "conv_b")));
  return ops::sigmoid(tape, x);
}

std::vector<std::uint8_t> boundary_region(const Tensor& dm, const GuidedFilterConfig& cfg) {
  std::vector<std::uint8_t> mask(dm.numel());
  auto p = dm.values();
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = p[i] >= cfg.threshold_low && p[i] <= cfg.threshold_high;
  }
  return mask;
}

Tensor compose_final_dm(Tape* tape, const Tensor& initial, const Tensor& smooth,
                        std::span<const std::uint8_t> boundary) {
  return ops::select(tape, boundary, smooth, initial);
}

Tensor fuse(Tape* tape, const Tensor& dm, const Tensor& a, const Tensor& b) {
  if (dm.shape() != a.shape() || a.shape() != b.shape()) {
    throw ShapeError("fuse: decision map " + shape_string(dm.shape()) + " and sources " +
                     shape_string(a.shape()) + ", " + shape_string(b.shape()) + " differ");
  }
  return ops::add(tape, ops::mul(tape, dm, ops::sub(tape, a, b)), b);
}

Image fuse_color(const Tensor& dm, const Image& a, const Image& b) {
  if (a.channels != b.channels) {
    throw ShapeError("fuse_color: channel counts differ (" + std::to_string(a.channels) + " vs " +
                     std::to_string(b.channels) + ")");
  }
  if (!a.same_size(b) || dm.numel() != a.plane_size()) {
    throw ShapeError("fuse_color: image and decision map sizes differ");
  }
  Image out(a.width, a.height, a.channels);
  const std::size_t n = a.plane_size();
  for (std::size_t c = 0; c < a.channels; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      const double p = dm[i];
      out.data[c * n + i] = p * a.data[c * n + i] + (1.0 - p) * b.data[c * n + i];
    }
  }
  return out;
}

std::vector<double> mean_guide(const Tensor& a, const Tensor& b) {
  std::vector<double> g(a.numel());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = 0.5 * (a[i] + b[i]);
  return g;
}

GacnModel::GacnModel(NetworkConfig cfg, WeightStore weights)
    : cfg_(cfg), weights_(std::move(weights)) {
  cfg_.validate();
  const WeightStore layout = weight_layout(cfg_);
  if (layout.size() != weights_.size()) {
    throw std::invalid_argument("weight store does not match the architecture");
  }
  for (const auto& [name, t] : layout) {
    if (!weights_.contains(name) || weights_.at(name).shape() != t.shape()) {
      throw std::invalid_argument("weight " + name + " missing or mis-shaped");
    }
  }
}

std::vector<Tensor> GacnModel::activity_maps(Tape* tape, const Tensor& img) const {
  counters_.extraction.fetch_add(1, std::memory_order_relaxed);
  FeaturePyramid pyramid = extract_features(tape, img, cfg_.extraction, weights_);
  std::vector<Tensor> sf;
  sf.reserve(pyramid.scales.size());
  for (const auto& scale : pyramid.scales) {
    sf.push_back(spatial_frequency(tape, scale, cfg_.extraction.sf_radius));
  }
  return sf;
}

Tensor GacnModel::initial_dm(Tape* tape, std::span<const Tensor> sf_a,
                             std::span<const Tensor> sf_b) const {
  counters_.decision.fetch_add(1, std::memory_order_relaxed);
  return decide(tape, activity_difference(tape, sf_a, sf_b), cfg_, weights_);
}

PairOutput GacnModel::finish(Tape* tape, Tensor dm_initial, const Tensor& a, const Tensor& b,
                             const std::vector<std::uint8_t>* frozen_boundary) const {
  PairOutput out;
  out.dm_initial = std::move(dm_initial);
  out.boundary = frozen_boundary ? *frozen_boundary : boundary_region(out.dm_initial, cfg_.guided);
  out.dm_smooth = guided_filter(tape, out.dm_initial, mean_guide(a, b), cfg_.guided);
  out.dm_final = compose_final_dm(tape, out.dm_initial, out.dm_smooth, out.boundary);
  out.fused = fuse(tape, out.dm_final, a, b);
  return out;
}

PairOutput GacnModel::forward(Tape* tape, const Tensor& a, const Tensor& b,
                              const std::vector<std::uint8_t>* frozen_boundary) const {
  if (a.shape() != b.shape()) {
    throw ShapeError("forward: source shapes " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()) + " differ");
  }
  const std::vector<Tensor> sf_a = activity_maps(tape, a);
  const std::vector<Tensor> sf_b = activity_maps(tape, b);
  return finish(tape, initial_dm(tape, sf_a, sf_b), a, b, frozen_boundary);
}

FusionResult fuse_images(const GacnModel& model, const Image& a, const Image& b) {
  if (!a.same_size(b)) {
    throw ShapeError("fuse_images: sources are " + std::to_string(a.width) + "x" +
                     std::to_string(a.height) + " and " + std::to_string(b.width) + "x" +
                     std::to_string(b.height));
  }
  const Tensor ga = to_tensor(to_gray(a));
  const Tensor gb = to_tensor(to_gray(b));
  const PairOutput out = model.forward(nullptr, ga, gb);
  FusionResult r;
  r.fused = a.channels == 1 && b.channels == 1 ? from_tensor(out.fused)
                                               : fuse_color(out.dm_final, a, b);
  r.dm_initial = from_tensor(out.dm_initial);
  r.dm_final = from_tensor(out.dm_final);
  return r;
}

}  // namespace gacn
