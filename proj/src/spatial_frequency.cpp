#include <algorithm>
#include <cmath>
#include <vector>

#include "gacn/network.hpp"
#include "gacn/ops.hpp"

namespace gacn {
namespace {

// Sum over a centred window of half-width r along each axis, on an
// (rows x cols) array; out-of-range taps contribute nothing.
std::vector<double> window_sum(const std::vector<double>& src, std::size_t rows, std::size_t cols,
                               std::size_t r) {
  std::vector<double> tmp(rows * cols, 0.0), out(rows * cols, 0.0);
  const long R = static_cast<long>(r);
  for (std::size_t y = 0; y < rows; ++y) {
    for (std::size_t x = 0; x < cols; ++x) {
      const long lo = std::max(0L, static_cast<long>(x) - R);
      const long hi = std::min(static_cast<long>(cols) - 1, static_cast<long>(x) + R);
      double s = 0.0;
      for (long i = lo; i <= hi; ++i) s += src[y * cols + static_cast<std::size_t>(i)];
      tmp[y * cols + x] = s;
    }
  }
  for (std::size_t y = 0; y < rows; ++y) {
    const long lo = std::max(0L, static_cast<long>(y) - R);
    const long hi = std::min(static_cast<long>(rows) - 1, static_cast<long>(y) + R);
    for (std::size_t x = 0; x < cols; ++x) {
      double s = 0.0;
      for (long i = lo; i <= hi; ++i) s += tmp[static_cast<std::size_t>(i) * cols + x];
      out[y * cols + x] = s;
    }
  }
  return out;
}

}  // namespace

// Windows reach r pixels past the border. With replicate padding a
// horizontal difference is non-zero only for columns 1..W-1 (its row index is
// clamped) and a vertical difference only for rows 1..H-1, so the padded
// energy map is built from the in-image differences alone.
Tensor spatial_frequency(Tape* tape, const Tensor& features, std::size_t radius) {
  if (features.rank() != 4) {
    throw ShapeError("spatial_frequency: expected [B,C,H,W], got " + shape_string(features.shape()));
  }
  const std::size_t B = features.dim(0), C = features.dim(1), H = features.dim(2),
                    W = features.dim(3);
  const std::size_t PH = H + 2 * radius, PW = W + 2 * radius;
  const double n = static_cast<double>((2 * radius + 1) * (2 * radius + 1));
  const bool track = tracking(tape, features);
  Tensor out({B, 1, H, W}, 0.0, track);
  auto F = features.values();

  auto clamp_index = [](long v, std::size_t size) {
    return static_cast<std::size_t>(std::clamp(v, 0L, static_cast<long>(size) - 1));
  };

  for (std::size_t b = 0; b < B; ++b) {
    const double* f = F.data() + b * C * H * W;
    std::vector<double> h(H * W, 0.0), v(H * W, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
      const double* fc = f + c * H * W;
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 1; x < W; ++x) {
          const double d = fc[y * W + x] - fc[y * W + x - 1];
          h[y * W + x] += d * d;
        }
      }
      for (std::size_t y = 1; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          const double d = fc[y * W + x] - fc[(y - 1) * W + x];
          v[y * W + x] += d * d;
        }
      }
    }
    std::vector<double> energy(PH * PW, 0.0);
    for (std::size_t py = 0; py < PH; ++py) {
      const long y = static_cast<long>(py) - static_cast<long>(radius);
      const std::size_t cy = clamp_index(y, H);
      for (std::size_t px = 0; px < PW; ++px) {
        const long x = static_cast<long>(px) - static_cast<long>(radius);
        const std::size_t cx = clamp_index(x, W);
        double e = 0.0;
        if (x >= 1 && x <= static_cast<long>(W) - 1) e += h[cy * W + static_cast<std::size_t>(x)];
        if (y >= 1 && y <= static_cast<long>(H) - 1) e += v[static_cast<std::size_t>(y) * W + cx];
        energy[py * PW + px] = e;
      }
    }
    const std::vector<double> u = window_sum(energy, PH, PW, radius);
    double* o = out.values().data() + b * H * W;
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        o[y * W + x] = std::sqrt(u[(y + radius) * PW + x + radius] / n);
      }
    }
  }

  if (track) {
    tape->record([features, out, B, C, H, W, PH, PW, radius, n, clamp_index]() mutable {
      if (!out.has_grad()) return;
      auto gs = std::as_const(out).grad();
      auto s = std::as_const(out).values();
      auto F = std::as_const(features).values();
      auto gF = features.grad_accum();
      for (std::size_t b = 0; b < B; ++b) {
        // dS/dU = 1 / (2 n S), scattered onto the padded grid.
        std::vector<double> gu(PH * PW, 0.0);
        for (std::size_t y = 0; y < H; ++y) {
          for (std::size_t x = 0; x < W; ++x) {
            const std::size_t i = b * H * W + y * W + x;
            gu[(y + radius) * PW + x + radius] = gs[i] * 0.5 / (n * std::max(s[i], ops::kSqrtEps));
          }
        }
        const std::vector<double> ge = window_sum(gu, PH, PW, radius);
        std::vector<double> gh(H * W, 0.0), gv(H * W, 0.0);
        for (std::size_t py = 0; py < PH; ++py) {
          const long y = static_cast<long>(py) - static_cast<long>(radius);
          const std::size_t cy = clamp_index(y, H);
          for (std::size_t px = 0; px < PW; ++px) {
            const long x = static_cast<long>(px) - static_cast<long>(radius);
            const std::size_t cx = clamp_index(x, W);
            const double g = ge[py * PW + px];
            if (x >= 1 && x <= static_cast<long>(W) - 1) gh[cy * W + static_cast<std::size_t>(x)] += g;
            if (y >= 1 && y <= static_cast<long>(H) - 1) gv[static_cast<std::size_t>(y) * W + cx] += g;
          }
        }
        for (std::size_t c = 0; c < C; ++c) {
          const double* fc = F.data() + (b * C + c) * H * W;
          double* gc = gF.data() + (b * C + c) * H * W;
          for (std::size_t y = 0; y < H; ++y) {
            for (std::size_t x = 1; x < W; ++x) {
              const double t = 2.0 * gh[y * W + x] * (fc[y * W + x] - fc[y * W + x - 1]);
              gc[y * W + x] += t;
              gc[y * W + x - 1] -= t;
            }
          }
          for (std::size_t y = 1; y < H; ++y) {
            for (std::size_t x = 0; x < W; ++x) {
              const double t = 2.0 * gv[y * W + x] * (fc[y * W + x] - fc[(y - 1) * W + x]);
              gc[y * W + x] += t;
              gc[(y - 1) * W + x] -= t;
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor activity_difference(Tape* tape, std::span<const Tensor> sf_a, std::span<const Tensor> sf_b) {
  if (sf_a.size() != sf_b.size() || sf_a.empty()) {
    throw ShapeError("activity_difference: need the same non-zero number of scales, got " +
                     std::to_string(sf_a.size()) + " and " + std::to_string(sf_b.size()));
  }
  std::vector<Tensor> diffs;
  diffs.reserve(sf_a.size());
  for (std::size_t i = 0; i < sf_a.size(); ++i) diffs.push_back(ops::sub(tape, sf_a[i], sf_b[i]));
  return ops::concat_channels(tape, diffs);
}

}  // namespace gacn
