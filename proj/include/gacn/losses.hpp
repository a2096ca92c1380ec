#pragma once

#include "gacn/tensor.hpp"

namespace gacn {

/// Guard used by every ratio and square root inside the Q_g loss.
inline constexpr double kLossEps = 1e-10;

enum class OrientationMode { abs, smooth };

struct QgConfig {
  double gamma_g = 1.0;
  double k_g = -10.0;
  double sigma_g = 0.5;
  double gamma_a = 1.0;
  double k_a = -20.0;
  double sigma_a = 0.75;
  double gamma = 1.0;  // weight exponent, w = g^gamma
  double k = 1000.0;   // Heaviside steepness
  OrientationMode orientation = OrientationMode::abs;

  void validate() const;
};

struct LossConfig {
  double lambda = 1.0;
  QgConfig qg;

  void validate() const;
};

/// Sobel edge strength g and orientation alpha = atan(sy^2 / sx^2) per pixel.
/// g = sqrt(sx^2 + sy^2 + eps) - sqrt(eps), so a flat region has g == 0 exactly.
struct EdgeField {
  Tensor sx;
  Tensor sy;
  Tensor g;
  Tensor alpha;
};

struct Preservation {
  Tensor strength;
  Tensor orientation;
  Tensor q;
};

/// 1 - (2 sum(p g) + 1) / (sum(p^2) + sum(g^2) + 1).
Tensor dice_loss(Tape* tape, const Tensor& p, const Tensor& g);

/// Sobel responses of a single-channel image with replicate borders.
EdgeField sobel_edges(Tape* tape, const Tensor& img);

/// 1 / (1 + exp(-k (x - y))). h(x,y) + h(y,x) == 1 holds exactly in floating point.
Tensor smooth_heaviside(Tape* tape, const Tensor& x, const Tensor& y, double k);

/// Smooth min/max ratio of two edge strengths:
/// f(gF,gA) gA/gF + (1 - f(gF,gA)) gF/gA.
Tensor relative_strength(Tape* tape, const Tensor& g_a, const Tensor& g_f, double k);

/// 1 - |alpha_a - alpha_f| / (pi/2), with |.| exact (subgradient 0) or smoothed.
Tensor orientation_preservation(Tape* tape, const Tensor& alpha_a, const Tensor& alpha_f,
                                const QgConfig& cfg);

Preservation preservation_values(Tape* tape, const Tensor& strength, const Tensor& orientation,
                                 const QgConfig& cfg);

/// 1 - Q_g with the smooth branch selection; 1.0 when no source has an edge.
Tensor qg_loss(Tape* tape, const Tensor& a, const Tensor& b, const Tensor& fused,
               const QgConfig& cfg);

Tensor total_loss(Tape* tape, const Tensor& dice, const Tensor& qg, double lambda);

}  // namespace gacn
