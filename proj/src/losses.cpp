#include "gacn/losses.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "gacn/ops.hpp"

namespace gacn {
namespace {

constexpr std::array<double, 9> kSobelX = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
constexpr std::array<double, 9> kSobelY = {-1, -2, -1, 0, 0, 0, 1, 2, 1};

// For z < 0 the value is formed as 1 - s(-z); since s(-z) >= 0.5 that
// subtraction is exact, which makes s(z) + s(-z) == 1 bit for bit.
double heaviside_value(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  return 1.0 - 1.0 / (1.0 + std::exp(z));
}

}  // namespace

void QgConfig::validate() const {
  if (!(k > 0.0)) throw std::invalid_argument("Heaviside steepness k must be positive");
  if (!(gamma_g > 0.0 && gamma_a > 0.0)) {
    throw std::invalid_argument("Gamma_g and Gamma_a must be positive");
  }
}

void LossConfig::validate() const {
  if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be non-negative");
  qg.validate();
}

Tensor dice_loss(Tape* tape, const Tensor& p, const Tensor& g) {
  if (p.shape() != g.shape()) {
    throw ShapeError("dice_loss: prediction " + shape_string(p.shape()) + " vs mask " +
                     shape_string(g.shape()));
  }
  const Tensor inter = ops::sum(tape, ops::mul(tape, p, g));
  const Tensor pp = ops::sum(tape, ops::square(tape, p));
  double gg = 0.0;
  for (double v : g.values()) gg += v * v;
  const Tensor num = ops::shift(tape, ops::scale(tape, inter, 2.0), 1.0);
  const Tensor den = ops::shift(tape, pp, gg + 1.0);
  return ops::shift(tape, ops::scale(tape, ops::div(tape, num, den), -1.0), 1.0);
}

EdgeField sobel_edges(Tape* tape, const Tensor& img) {
  EdgeField e;
  e.sx = ops::filter3x3_replicate(tape, img, kSobelX);
  e.sy = ops::filter3x3_replicate(tape, img, kSobelY);
  const Tensor sx2 = ops::square(tape, e.sx);
  const Tensor sy2 = ops::square(tape, e.sy);
  const Tensor mag = ops::sqrt(tape, ops::shift(tape, ops::add(tape, sx2, sy2), kLossEps));
  e.g = ops::clamp(tape, ops::shift(tape, mag, -std::sqrt(kLossEps)), 0.0,
                   std::numeric_limits<double>::infinity());
  e.alpha = ops::atan(tape, ops::div(tape, sy2, ops::shift(tape, sx2, kLossEps)));
  return e;
}

Tensor smooth_heaviside(Tape* tape, const Tensor& x, const Tensor& y, double k) {
  if (x.shape() != y.shape()) {
    throw ShapeError("smooth_heaviside: shape mismatch " + shape_string(x.shape()) + " vs " +
                     shape_string(y.shape()));
  }
  const bool track = tracking(tape, x, y);
  Tensor h(x.shape(), 0.0, track);
  for (std::size_t i = 0; i < h.numel(); ++i) h[i] = heaviside_value(k * (x[i] - y[i]));
  if (track) {
    tape->record([x, y, h, k]() mutable {
      if (!h.has_grad()) return;
      auto gh = std::as_const(h).grad();
      std::span<double> gx = x.requires_grad() ? x.grad_accum() : std::span<double>{};
      std::span<double> gy = y.requires_grad() ? y.grad_accum() : std::span<double>{};
      for (std::size_t i = 0; i < gh.size(); ++i) {
        const double d = gh[i] * k * h[i] * (1.0 - h[i]);
        if (!gx.empty()) gx[i] += d;
        if (!gy.empty()) gy[i] -= d;
      }
    });
  }
  return h;
}

Tensor relative_strength(Tape* tape, const Tensor& g_a, const Tensor& g_f, double k) {
  const Tensor f = smooth_heaviside(tape, g_f, g_a, k);
  const Tensor a_over_f = ops::div(tape, g_a, ops::shift(tape, g_f, kLossEps));
  const Tensor f_over_a = ops::div(tape, g_f, ops::shift(tape, g_a, kLossEps));
  const Tensor one_minus_f = ops::shift(tape, ops::scale(tape, f, -1.0), 1.0);
  return ops::add(tape, ops::mul(tape, f, a_over_f), ops::mul(tape, one_minus_f, f_over_a));
}

Tensor orientation_preservation(Tape* tape, const Tensor& alpha_a, const Tensor& alpha_f,
                                const QgConfig& cfg) {
  const Tensor d = ops::sub(tape, alpha_a, alpha_f);
  Tensor dist;
  if (cfg.orientation == OrientationMode::abs) {
    dist = ops::abs(tape, d);
  } else {
    const Tensor f = smooth_heaviside(tape, alpha_a, alpha_f, cfg.k);
    dist = ops::mul(tape, d, ops::shift(tape, ops::scale(tape, f, 2.0), -1.0));
  }
  return ops::shift(tape, ops::scale(tape, dist, -2.0 / std::numbers::pi), 1.0);
}

Preservation preservation_values(Tape* tape, const Tensor& strength, const Tensor& orientation,
                                 const QgConfig& cfg) {
  // Gamma / (1 + exp(k (x - sigma))) == Gamma * sigmoid(-k (x - sigma)).
  Preservation out;
  out.strength = ops::scale(
      tape, ops::sigmoid(tape, ops::scale(tape, ops::shift(tape, strength, -cfg.sigma_g), -cfg.k_g)),
      cfg.gamma_g);
  out.orientation = ops::scale(
      tape,
      ops::sigmoid(tape, ops::scale(tape, ops::shift(tape, orientation, -cfg.sigma_a), -cfg.k_a)),
      cfg.gamma_a);
  out.q = ops::mul(tape, out.strength, out.orientation);
  return out;
}

Tensor qg_loss(Tape* tape, const Tensor& a, const Tensor& b, const Tensor& fused,
               const QgConfig& cfg) {
  if (a.shape() != b.shape() || a.shape() != fused.shape()) {
    throw ShapeError("qg_loss: sources " + shape_string(a.shape()) + ", " + shape_string(b.shape()) +
                     " and fused " + shape_string(fused.shape()) + " must match");
  }
  const EdgeField ea = sobel_edges(tape, a);
  const EdgeField eb = sobel_edges(tape, b);
  const EdgeField ef = sobel_edges(tape, fused);

  auto transfer = [&](const EdgeField& src) {
    const Tensor g = relative_strength(tape, src.g, ef.g, cfg.k);
    const Tensor d = orientation_preservation(tape, src.alpha, ef.alpha, cfg);
    return preservation_values(tape, g, d, cfg).q;
  };
  const Tensor q_af = transfer(ea);
  const Tensor q_bf = transfer(eb);
  const Tensor w_a = ops::pow(tape, ea.g, cfg.gamma);
  const Tensor w_b = ops::pow(tape, eb.g, cfg.gamma);

  const Tensor num =
      ops::sum(tape, ops::add(tape, ops::mul(tape, q_af, w_a), ops::mul(tape, q_bf, w_b)));
  const Tensor den = ops::shift(tape, ops::sum(tape, ops::add(tape, w_a, w_b)), kLossEps);
  return ops::shift(tape, ops::scale(tape, ops::div(tape, num, den), -1.0), 1.0);
}

Tensor total_loss(Tape* tape, const Tensor& dice, const Tensor& qg, double lambda) {
  if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be non-negative");
  return ops::add(tape, dice, ops::scale(tape, qg, lambda));
}

}  // namespace gacn
