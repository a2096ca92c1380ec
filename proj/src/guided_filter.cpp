#include <algorithm>
#include <vector>

#include "gacn/network.hpp"
#include "gacn/ops.hpp"

namespace gacn {
namespace {

// Box sums over a (2r+1)^2 window clipped to the image, and the matching
// per-pixel tap counts. Mean = sum / count; its transpose is sum(g / count).
struct BoxFilter {
  std::size_t rows, cols, r;
  std::vector<double> counts;

  BoxFilter(std::size_t rows_, std::size_t cols_, std::size_t r_) : rows(rows_), cols(cols_), r(r_) {
    counts.resize(rows * cols);
    for (std::size_t y = 0; y < rows; ++y) {
      const std::size_t ny = std::min(rows - 1, y + r) - (y >= r ? y - r : 0) + 1;
      for (std::size_t x = 0; x < cols; ++x) {
        const std::size_t nx = std::min(cols - 1, x + r) - (x >= r ? x - r : 0) + 1;
        counts[y * cols + x] = static_cast<double>(ny * nx);
      }
    }
  }

  std::vector<double> sum(const std::vector<double>& src) const {
    std::vector<double> tmp(rows * cols), out(rows * cols);
    for (std::size_t y = 0; y < rows; ++y) {
      for (std::size_t x = 0; x < cols; ++x) {
        const std::size_t lo = x >= r ? x - r : 0, hi = std::min(cols - 1, x + r);
        double s = 0.0;
        for (std::size_t i = lo; i <= hi; ++i) s += src[y * cols + i];
        tmp[y * cols + x] = s;
      }
    }
    for (std::size_t y = 0; y < rows; ++y) {
      const std::size_t lo = y >= r ? y - r : 0, hi = std::min(rows - 1, y + r);
      for (std::size_t x = 0; x < cols; ++x) {
        double s = 0.0;
        for (std::size_t i = lo; i <= hi; ++i) s += tmp[i * cols + x];
        out[y * cols + x] = s;
      }
    }
    return out;
  }

  std::vector<double> mean(const std::vector<double>& src) const {
    std::vector<double> s = sum(src);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] /= counts[i];
    return s;
  }

  std::vector<double> mean_transpose(const std::vector<double>& g) const {
    std::vector<double> scaled(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) scaled[i] = g[i] / counts[i];
    return sum(scaled);
  }
};

}  // namespace

Tensor guided_filter(Tape* tape, const Tensor& input, std::span<const double> guide,
                     const GuidedFilterConfig& cfg) {
  if (input.rank() != 4 || input.dim(0) != 1 || input.dim(1) != 1) {
    throw ShapeError("guided_filter: expected [1,1,H,W], got " + shape_string(input.shape()));
  }
  const std::size_t H = input.dim(2), W = input.dim(3), N = H * W;
  if (guide.size() != N) {
    throw ShapeError("guided_filter: guide has " + std::to_string(guide.size()) +
                     " pixels, map has " + std::to_string(N));
  }
  const BoxFilter box(H, W, cfg.radius);
  const std::vector<double> I(guide.begin(), guide.end());
  const std::vector<double> p(input.values().begin(), input.values().end());
  std::vector<double> II(N), Ip(N);
  for (std::size_t i = 0; i < N; ++i) {
    II[i] = I[i] * I[i];
    Ip[i] = I[i] * p[i];
  }
  const std::vector<double> mean_I = box.mean(I);
  const std::vector<double> mean_p = box.mean(p);
  const std::vector<double> mean_II = box.mean(II);
  const std::vector<double> mean_Ip = box.mean(Ip);
  std::vector<double> denom(N), a(N), b(N);
  for (std::size_t i = 0; i < N; ++i) {
    denom[i] = mean_II[i] - mean_I[i] * mean_I[i] + cfg.eps;
    a[i] = (mean_Ip[i] - mean_I[i] * mean_p[i]) / denom[i];
    b[i] = mean_p[i] - a[i] * mean_I[i];
  }
  const std::vector<double> mean_a = box.mean(a);
  const std::vector<double> mean_b = box.mean(b);

  const bool track = tracking(tape, input);
  Tensor out(input.shape(), 0.0, track);
  std::vector<std::uint8_t> inside(N);
  ops::BranchSite site(N);
  for (std::size_t i = 0; i < N; ++i) {
    const double q = mean_a[i] * I[i] + mean_b[i];
    if (site.codes.empty() || site.recording) {
      inside[i] = q >= 0.0 && q <= 1.0;
      out[i] = std::clamp(q, 0.0, 1.0);
      if (site.recording) site.codes[i] = q < 0.0 ? -1 : (q > 1.0 ? 1 : 0);
    } else {
      inside[i] = site.codes[i] == 0;
      out[i] = site.codes[i] < 0 ? 0.0 : (site.codes[i] > 0 ? 1.0 : q);
    }
  }

  if (track) {
    tape->record([input, out, box, I, mean_I, denom, inside = std::move(inside), N]() mutable {
      if (!out.has_grad()) return;
      auto gq = std::as_const(out).grad();
      std::vector<double> g_mean_a(N), g_mean_b(N);
      for (std::size_t i = 0; i < N; ++i) {
        const double g = inside[i] ? gq[i] : 0.0;
        g_mean_a[i] = g * I[i];
        g_mean_b[i] = g;
      }
      std::vector<double> ga = box.mean_transpose(g_mean_a);
      const std::vector<double> gb = box.mean_transpose(g_mean_b);
      std::vector<double> g_mean_p(N), g_mean_Ip(N);
      for (std::size_t i = 0; i < N; ++i) {
        ga[i] -= gb[i] * mean_I[i];
        g_mean_Ip[i] = ga[i] / denom[i];
        g_mean_p[i] = gb[i] - ga[i] * mean_I[i] / denom[i];
      }
      const std::vector<double> gp = box.mean_transpose(g_mean_p);
      const std::vector<double> gIp = box.mean_transpose(g_mean_Ip);
      auto gin = input.grad_accum();
      for (std::size_t i = 0; i < N; ++i) gin[i] += gp[i] + I[i] * gIp[i];
    });
  }
  return out;
}

}  // namespace gacn
