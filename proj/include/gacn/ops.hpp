#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "gacn/tensor.hpp"

// Differentiable operations over Tensor. Every op takes the active Tape
// first; pass nullptr for an untracked (inference) evaluation.
namespace gacn::ops {

/// Guard added to divisor magnitudes in div().
inline constexpr double kDivEps = 1e-12;
/// Lower bound on sqrt() output inside its backward rule.
inline constexpr double kSqrtEps = 1e-12;

/// 2-D cross-correlation with zero "same" padding.
/// input [B,Cin,H,W], weight [Cout,Cin,k,k] (k odd), bias [Cout] -> [B,Cout,H,W].
Tensor conv2d(Tape* tape, const Tensor& input, const Tensor& weight, const Tensor& bias);

Tensor relu(Tape* tape, const Tensor& x);
Tensor sigmoid(Tape* tape, const Tensor& x);

/// Per-channel spatial mean: [B,C,H,W] -> [B,C].
Tensor global_avg_pool(Tape* tape, const Tensor& x);

/// Affine map: x [B,N], weight [M,N], bias [M] -> [B,M].
Tensor dense(Tape* tape, const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Concatenates [B,Ci,H,W] tensors along the channel axis.
Tensor concat_channels(Tape* tape, std::span<const Tensor> xs);

/// Copies channels [first, first+count) out of a [B,C,H,W] tensor.
Tensor slice_channels(Tape* tape, const Tensor& x, std::size_t first, std::size_t count);

/// Rescales every channel: x [B,C,H,W] * gate [B,C].
Tensor channel_scale(Tape* tape, const Tensor& x, const Tensor& gate);
/// Rescales every pixel: x [B,C,H,W] * gate [B,1,H,W].
Tensor spatial_scale(Tape* tape, const Tensor& x, const Tensor& gate);

Tensor add(Tape* tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape* tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b);
/// a / b with |b| floored at kDivEps (sign preserved, zero treated as +).
Tensor div(Tape* tape, const Tensor& a, const Tensor& b);
Tensor sqrt(Tape* tape, const Tensor& x);
Tensor square(Tape* tape, const Tensor& x);
Tensor scale(Tape* tape, const Tensor& x, double factor);
Tensor shift(Tape* tape, const Tensor& x, double offset);
Tensor clamp(Tape* tape, const Tensor& x, double lo, double hi);
/// |x| with subgradient 0 at x == 0.
Tensor abs(Tape* tape, const Tensor& x);
Tensor atan(Tape* tape, const Tensor& x);
/// x^p for x >= 0; p == 1 is an exact pass-through.
Tensor pow(Tape* tape, const Tensor& x, double p);

Tensor sum(Tape* tape, const Tensor& x);
Tensor mean(Tape* tape, const Tensor& x);

/// mask[i] ? a[i] : b[i]. The mask is a constant: no gradient flows into it.
Tensor select(Tape* tape, std::span<const std::uint8_t> mask, const Tensor& a, const Tensor& b);

/// Fixed 3x3 cross-correlation of a single-channel map with replicate borders.
Tensor filter3x3_replicate(Tape* tape, const Tensor& x, const std::array<double, 9>& kernel);

/// Recorded branches of the piecewise ops (relu, abs, clamp, guided-filter
/// clamp) in one forward pass. While a PinScope over an empty pin is open,
/// each such op appends the piece every element fell on; a scope over a
/// filled pin makes the same ops, called in the same order, evaluate those
/// pieces instead. Finite differences taken under replay then see the
/// smooth piece the analytic gradient belongs to.
class BranchPin {
 public:
  bool empty() const { return sites_.empty(); }

 private:
  friend class PinScope;
  friend struct BranchSite;
  std::vector<std::vector<std::int8_t>> sites_;
  std::size_t cursor_ = 0;
  bool recording_ = false;
};

/// Activates a pin on this thread for the lifetime of the scope.
class PinScope {
 public:
  explicit PinScope(BranchPin& pin);
  ~PinScope();
  PinScope(const PinScope&) = delete;
  PinScope& operator=(const PinScope&) = delete;

 private:
  BranchPin* previous_;
};

/// Branch codes of the next piecewise op over `n` elements. Without an active
/// pin, `codes` is empty. Codes: 0 for the middle/identity piece, -1 and +1
/// for the lower and upper pieces.
struct BranchSite {
  explicit BranchSite(std::size_t n);
  std::span<std::int8_t> codes;
  bool recording = false;
};

}  // namespace gacn::ops
