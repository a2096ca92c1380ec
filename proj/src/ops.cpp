#include "gacn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

namespace gacn::ops {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

// Output pixels per im2col tile. Small tiles keep the column matrix in L2,
// which matters more than GEMM call overhead at these channel counts.
constexpr std::size_t kTilePixels = 256;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

void require_rank(const Tensor& x, std::size_t rank, const char* op, const char* what) {
  if (x.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got " + shape_string(x.shape()));
  }
}

template <typename Fwd, typename Deriv>
Tensor unary(Tape* tape, const Tensor& x, Fwd fwd, Deriv deriv) {
  const bool track = tracking(tape, x);
  Tensor y(x.shape(), 0.0, track);
  auto xv = x.values();
  auto yv = y.values();
  for (std::size_t i = 0; i < xv.size(); ++i) yv[i] = fwd(xv[i]);
  if (track) {
    tape->record([x, y, deriv]() mutable {
      if (!y.has_grad()) return;
      auto gy = std::as_const(y).grad();
      auto gx = x.grad_accum();
      auto xs = std::as_const(x).values();
      auto ys = std::as_const(y).values();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * deriv(xs[i], ys[i]);
    });
  }
  return y;
}

// deriv(a, b) returns the pair (dy/da, dy/db).
template <typename Fwd, typename Deriv>
Tensor binary(Tape* tape, const Tensor& a, const Tensor& b, const char* name, Fwd fwd,
              Deriv deriv) {
  require_same_shape(a, b, name);
  const bool track = tracking(tape, a, b);
  Tensor y(a.shape(), 0.0, track);
  auto av = a.values();
  auto bv = b.values();
  auto yv = y.values();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] = fwd(av[i], bv[i]);
  if (track) {
    tape->record([a, b, y, deriv]() mutable {
      if (!y.has_grad()) return;
      auto gy = std::as_const(y).grad();
      auto as = std::as_const(a).values();
      auto bs = std::as_const(b).values();
      const bool ga_on = a.requires_grad();
      const bool gb_on = b.requires_grad();
      std::span<double> ga = ga_on ? a.grad_accum() : std::span<double>{};
      std::span<double> gb = gb_on ? b.grad_accum() : std::span<double>{};
      for (std::size_t i = 0; i < gy.size(); ++i) {
        const auto [da, db] = deriv(as[i], bs[i]);
        if (ga_on) ga[i] += gy[i] * da;
        if (gb_on) gb[i] += gy[i] * db;
      }
    });
  }
  return y;
}

double guard_divisor(double b) {
  if (std::abs(b) >= kDivEps) return b;
  return b < 0.0 ? -kDivEps : kDivEps;
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct ConvGeometry {
  std::size_t batch, cin, cout, height, width, k, pad;
  std::size_t cols() const { return cin * k * k; }
  std::size_t plane() const { return height * width; }
};

// Fills col (K x rows*W, row-major) for output rows [y0, y1) of one image.
void im2col(const double* src, const ConvGeometry& g, std::size_t y0, std::size_t y1, RowMat& col) {
  const std::size_t W = g.width;
  const std::size_t T = (y1 - y0) * W;
  col.resize(static_cast<Eigen::Index>(g.cols()), static_cast<Eigen::Index>(T));
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    const double* plane = src + ci * g.plane();
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = col.data() + ((ci * g.k + ky) * g.k + kx) * T;
        const long dx = static_cast<long>(kx) - static_cast<long>(g.pad);
        const long x_lo = std::max(0L, -dx);
        const long x_hi = std::min(static_cast<long>(W), static_cast<long>(W) - dx);
        for (std::size_t y = y0; y < y1; ++y) {
          double* dst = row + (y - y0) * W;
          const long sy = static_cast<long>(y + ky) - static_cast<long>(g.pad);
          if (sy < 0 || sy >= static_cast<long>(g.height) || x_hi <= x_lo) {
            std::fill(dst, dst + W, 0.0);
            continue;
          }
          const double* srow = plane + static_cast<std::size_t>(sy) * W;
          std::fill(dst, dst + x_lo, 0.0);
          std::copy(srow + x_lo + dx, srow + x_hi + dx, dst + x_lo);
          std::fill(dst + x_hi, dst + W, 0.0);
        }
      }
    }
  }
}

// Scatter-adds col back into the input gradient; transpose of im2col.
void col2im(const RowMat& col, const ConvGeometry& g, std::size_t y0, std::size_t y1, double* dst) {
  const std::size_t W = g.width;
  const std::size_t T = (y1 - y0) * W;
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    double* plane = dst + ci * g.plane();
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = col.data() + ((ci * g.k + ky) * g.k + kx) * T;
        const long dx = static_cast<long>(kx) - static_cast<long>(g.pad);
        const long x_lo = std::max(0L, -dx);
        const long x_hi = std::min(static_cast<long>(W), static_cast<long>(W) - dx);
        if (x_hi <= x_lo) continue;
        for (std::size_t y = y0; y < y1; ++y) {
          const long sy = static_cast<long>(y + ky) - static_cast<long>(g.pad);
          if (sy < 0 || sy >= static_cast<long>(g.height)) continue;
          double* drow = plane + static_cast<std::size_t>(sy) * W;
          const double* srow = row + (y - y0) * W;
          for (long x = x_lo; x < x_hi; ++x) drow[x + dx] += srow[x];
        }
      }
    }
  }
}

// Zero-padded copy of one image's channels: [cin, H+2p, W+2p].
std::vector<double> pad_planes(const double* src, const ConvGeometry& g) {
  const std::size_t PW = g.width + 2 * g.pad, PH = g.height + 2 * g.pad;
  std::vector<double> padded(g.cin * PH * PW, 0.0);
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t y = 0; y < g.height; ++y) {
      const double* s = src + c * g.plane() + y * g.width;
      std::copy(s, s + g.width, padded.data() + (c * PH + y + g.pad) * PW + g.pad);
    }
  }
  return padded;
}

// Single-output-channel convolution (the spatial SE gate and the last decision
// layer). im2col would copy k*k*cin values per pixel for one output value, so
// these accumulate kBlock output pixels in a fixed-size Eigen array instead;
// plain loops here are not auto-vectorized.
constexpr Eigen::Index kBlock = 32;
using BlockArray = Eigen::Array<double, kBlock, 1>;

// dst[y][x] = bias + sum_c sum_ky sum_kx w[c][ky][kx] * padded[c][y+ky][x+kx]
void correlate_sum(const double* padded, std::size_t planes, std::size_t PH, std::size_t PW,
                   const double* w, std::size_t k, double bias, std::size_t H, std::size_t W,
                   double* dst) {
  const auto B = static_cast<std::size_t>(kBlock);
  for (std::size_t y = 0; y < H; ++y) {
    std::size_t x0 = 0;
    for (; x0 + B <= W; x0 += B) {
      BlockArray acc = BlockArray::Constant(bias);
      for (std::size_t c = 0; c < planes; ++c) {
        for (std::size_t ky = 0; ky < k; ++ky) {
          const double* row = padded + (c * PH + y + ky) * PW + x0;
          const double* wk = w + (c * k + ky) * k;
          for (std::size_t kx = 0; kx < k; ++kx) {
            acc += wk[kx] * Eigen::Map<const BlockArray>(row + kx);
          }
        }
      }
      Eigen::Map<BlockArray>(dst + y * W + x0) = acc;
    }
    for (std::size_t x = x0; x < W; ++x) {
      double acc = bias;
      for (std::size_t c = 0; c < planes; ++c) {
        for (std::size_t ky = 0; ky < k; ++ky) {
          const double* row = padded + (c * PH + y + ky) * PW + x;
          const double* wk = w + (c * k + ky) * k;
          for (std::size_t kx = 0; kx < k; ++kx) acc += wk[kx] * row[kx];
        }
      }
      dst[y * W + x] = acc;
    }
  }
}

void conv_single_forward(const double* src, const double* w, double bias, const ConvGeometry& g,
                         double* dst) {
  const std::vector<double> padded = pad_planes(src, g);
  correlate_sum(padded.data(), g.cin, g.height + 2 * g.pad, g.width + 2 * g.pad, w, g.k, bias,
                g.height, g.width, dst);
}

void conv_single_backward(const double* src, const double* w, const double* gout,
                          const ConvGeometry& g, double* gw, double* gb, double* gin) {
  const std::size_t H = g.height, W = g.width, k = g.k;
  const std::size_t PH = H + 2 * g.pad, PW = W + 2 * g.pad;
  if (gb) {
    double s = 0.0;
    for (std::size_t i = 0; i < H * W; ++i) s += gout[i];
    *gb += s;
  }
  if (gw) {
    const std::vector<double> padded = pad_planes(src, g);
    for (std::size_t c = 0; c < g.cin; ++c) {
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const auto B = static_cast<std::size_t>(kBlock);
          BlockArray acc = BlockArray::Zero();
          double tail = 0.0;
          for (std::size_t y = 0; y < H; ++y) {
            const double* go = gout + y * W;
            const double* in = padded.data() + (c * PH + y + ky) * PW + kx;
            std::size_t x = 0;
            for (; x + B <= W; x += B) {
              acc += Eigen::Map<const BlockArray>(go + x) * Eigen::Map<const BlockArray>(in + x);
            }
            for (; x < W; ++x) tail += go[x] * in[x];
          }
          gw[(c * k + ky) * k + kx] += tail + acc.sum();
        }
      }
    }
  }
  if (gin) {
    // The input gradient is the zero-padded output gradient correlated with
    // the flipped kernel of each input channel.
    const ConvGeometry one{1, 1, 1, H, W, k, g.pad};
    const std::vector<double> gpad = pad_planes(gout, one);
    std::vector<double> flipped(k * k), plane(H * W);
    for (std::size_t c = 0; c < g.cin; ++c) {
      for (std::size_t i = 0; i < k * k; ++i) flipped[i] = w[c * k * k + (k * k - 1 - i)];
      correlate_sum(gpad.data(), 1, PH, PW, flipped.data(), k, 0.0, H, W, plane.data());
      double* d = gin + c * H * W;
      for (std::size_t i = 0; i < H * W; ++i) d[i] += plane[i];
    }
  }
}

}  // namespace

Tensor conv2d(Tape* tape, const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require_rank(input, 4, "conv2d", "input");
  require_rank(weight, 4, "conv2d", "weight");
  require_rank(bias, 1, "conv2d", "bias");
  const std::size_t k = weight.dim(2);
  if (k != weight.dim(3) || k % 2 == 0) {
    throw ShapeError("conv2d: kernel must be square with odd size, got " +
                     shape_string(weight.shape()));
  }
  if (weight.dim(1) != input.dim(1)) {
    throw ShapeError("conv2d: weight expects " + std::to_string(weight.dim(1)) +
                     " input channels but input " + shape_string(input.shape()) + " has " +
                     std::to_string(input.dim(1)));
  }
  if (bias.dim(0) != weight.dim(0)) {
    throw ShapeError("conv2d: bias length " + std::to_string(bias.dim(0)) +
                     " does not match output channels " + std::to_string(weight.dim(0)));
  }
  const ConvGeometry g{input.dim(0), input.dim(1), weight.dim(0), input.dim(2), input.dim(3),
                       k, k / 2};
  const bool track = tracking(tape, input, weight, bias);
  Tensor out({g.batch, g.cout, g.height, g.width}, 0.0, track);

  const auto K = static_cast<Eigen::Index>(g.cols());
  const auto Cout = static_cast<Eigen::Index>(g.cout);
  const auto stride = static_cast<Eigen::Index>(g.plane());
  Eigen::Map<const RowMat> wmat(weight.values().data(), Cout, K);
  const std::size_t rows_per_tile = std::max<std::size_t>(1, kTilePixels / g.width);

  RowMat col;
  for (std::size_t b = 0; b < g.batch; ++b) {
    const double* src = input.values().data() + b * g.cin * g.plane();
    double* dst = out.values().data() + b * g.cout * g.plane();
    if (g.cout == 1) {
      conv_single_forward(src, weight.values().data(), bias[0], g, dst);
      continue;
    }
    for (std::size_t y0 = 0; y0 < g.height; y0 += rows_per_tile) {
      const std::size_t y1 = std::min(g.height, y0 + rows_per_tile);
      im2col(src, g, y0, y1, col);
      StridedMap tile(dst + y0 * g.width, Cout, col.cols(), Eigen::OuterStride<>(stride));
      tile.noalias() = wmat * col;
      for (Eigen::Index co = 0; co < Cout; ++co) tile.row(co).array() += bias[co];
    }
  }

  if (track) {
    tape->record([input, weight, bias, out, g]() mutable {
      if (!out.has_grad()) return;
      const auto K = static_cast<Eigen::Index>(g.cols());
      const auto Cout = static_cast<Eigen::Index>(g.cout);
      const auto stride = static_cast<Eigen::Index>(g.plane());
      const std::size_t rows_per_tile = std::max<std::size_t>(1, kTilePixels / g.width);
      Eigen::Map<const RowMat> wmat(std::as_const(weight).values().data(), Cout, K);
      const bool want_w = weight.requires_grad();
      const bool want_b = bias.requires_grad();
      const bool want_x = input.requires_grad();
      RowMat gw_acc = RowMat::Zero(Cout, K);
      RowMat col, dcol;
      auto gout = std::as_const(out).grad();
      for (std::size_t b = 0; b < g.batch; ++b) {
        const double* src = std::as_const(input).values().data() + b * g.cin * g.plane();
        const double* gsrc = gout.data() + b * g.cout * g.plane();
        if (g.cout == 1) {
          conv_single_backward(src, wmat.data(), gsrc, g, want_w ? gw_acc.data() : nullptr,
                               want_b ? bias.grad_accum().data() : nullptr,
                               want_x ? input.grad_accum().data() + b * g.cin * g.plane() : nullptr);
          continue;
        }
        for (std::size_t y0 = 0; y0 < g.height; y0 += rows_per_tile) {
          const std::size_t y1 = std::min(g.height, y0 + rows_per_tile);
          const auto T = static_cast<Eigen::Index>((y1 - y0) * g.width);
          ConstStridedMap gtile(gsrc + y0 * g.width, Cout, T, Eigen::OuterStride<>(stride));
          if (want_w) {
            im2col(src, g, y0, y1, col);
            gw_acc.noalias() += gtile * col.transpose();
          }
          if (want_b) {
            auto gb = bias.grad_accum();
            // Plain loop: Eigen's vectorized sum peels to an aligned address, so its
            // rounding would depend on where the buffer happens to live.
            for (Eigen::Index co = 0; co < Cout; ++co) {
              const double* row = gtile.row(co).data();
              double s = 0.0;
              for (Eigen::Index t = 0; t < T; ++t) s += row[t];
              gb[co] += s;
            }
          }
          if (want_x) {
            dcol.noalias() = wmat.transpose() * gtile;
            col2im(dcol, g, y0, y1, input.grad_accum().data() + b * g.cin * g.plane());
          }
        }
      }
      if (want_w) {
        auto gw = weight.grad_accum();
        for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += gw_acc.data()[i];
      }
    });
  }
  return out;
}

Tensor relu(Tape* tape, const Tensor& x) {
  Tensor y = unary(
      tape, x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
  BranchSite site(x.numel());
  if (site.codes.empty()) return y;
  auto xv = x.values();
  auto yv = y.values();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    if (site.recording) site.codes[i] = xv[i] > 0.0 ? 0 : -1;
    else yv[i] = site.codes[i] == 0 ? xv[i] : 0.0;
  }
  return y;
}

Tensor sigmoid(Tape* tape, const Tensor& x) {
  return unary(tape, x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor global_avg_pool(Tape* tape, const Tensor& x) {
  require_rank(x, 4, "global_avg_pool", "input");
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (HW == 0) throw ShapeError("global_avg_pool: empty spatial extent");
  const bool track = tracking(tape, x);
  Tensor y({B, C}, 0.0, track);
  auto xv = x.values();
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    double s = 0.0;
    for (std::size_t i = 0; i < HW; ++i) s += xv[bc * HW + i];
    y[bc] = s / static_cast<double>(HW);
  }
  if (track) {
    tape->record([x, y, HW]() mutable {
      if (!y.has_grad()) return;
      auto gy = std::as_const(y).grad();
      auto gx = x.grad_accum();
      for (std::size_t bc = 0; bc < gy.size(); ++bc) {
        const double share = gy[bc] / static_cast<double>(HW);
        for (std::size_t i = 0; i < HW; ++i) gx[bc * HW + i] += share;
      }
    });
  }
  return y;
}

Tensor dense(Tape* tape, const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "dense", "input");
  require_rank(weight, 2, "dense", "weight");
  require_rank(bias, 1, "dense", "bias");
  const std::size_t B = x.dim(0), N = x.dim(1), M = weight.dim(0);
  if (weight.dim(1) != N) {
    throw ShapeError("dense: weight " + shape_string(weight.shape()) + " cannot consume input " +
                     shape_string(x.shape()));
  }
  if (bias.dim(0) != M) {
    throw ShapeError("dense: bias length " + std::to_string(bias.dim(0)) + " != " +
                     std::to_string(M));
  }
  const bool track = tracking(tape, x, weight, bias);
  Tensor y({B, M}, 0.0, track);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t m = 0; m < M; ++m) {
      double s = bias[m];
      for (std::size_t n = 0; n < N; ++n) s += weight[m * N + n] * x[b * N + n];
      y[b * M + m] = s;
    }
  }
  if (track) {
    tape->record([x, weight, bias, y, B, N, M]() mutable {
      if (!y.has_grad()) return;
      auto gy = std::as_const(y).grad();
      const bool want_x = x.requires_grad();
      const bool want_w = weight.requires_grad();
      const bool want_b = bias.requires_grad();
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t m = 0; m < M; ++m) {
          const double g = gy[b * M + m];
          if (want_b) bias.grad_accum()[m] += g;
          for (std::size_t n = 0; n < N; ++n) {
            if (want_w) weight.grad_accum()[m * N + n] += g * x[b * N + n];
            if (want_x) x.grad_accum()[b * N + n] += g * weight[m * N + n];
          }
        }
      }
    });
  }
  return y;
}

Tensor concat_channels(Tape* tape, std::span<const Tensor> xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  const Tensor& first = xs.front();
  require_rank(first, 4, "concat_channels", "input");
  std::size_t total_c = 0;
  bool track = false;
  for (const auto& t : xs) {
    require_rank(t, 4, "concat_channels", "input");
    if (t.dim(0) != first.dim(0) || t.dim(2) != first.dim(2) || t.dim(3) != first.dim(3)) {
      throw ShapeError("concat_channels: " + shape_string(t.shape()) + " incompatible with " +
                       shape_string(first.shape()));
    }
    total_c += t.dim(1);
    track = track || tracking(tape, t);
  }
  const std::size_t B = first.dim(0), HW = first.dim(2) * first.dim(3);
  Tensor y({B, total_c, first.dim(2), first.dim(3)}, 0.0, track);
  auto yv = y.values();
  std::size_t c0 = 0;
  for (const auto& t : xs) {
    const std::size_t C = t.dim(1);
    for (std::size_t b = 0; b < B; ++b) {
      auto src = t.values().subspan(b * C * HW, C * HW);
      std::copy(src.begin(), src.end(), yv.begin() + static_cast<long>((b * total_c + c0) * HW));
    }
    c0 += C;
  }
  if (track) {
    std::vector<Tensor> parts(xs.begin(), xs.end());
    tape->record([parts, y, B, HW, total_c]() mutable {
      if (!y.has_grad()) return;
      auto gy = std::as_const(y).grad();
      std::size_t c0 = 0;
      for (auto& t : parts) {
        const std::size_t C = t.dim(1);
        if (t.requires_grad()) {
          auto gt = t.grad_accum();
          for (std::size_t b = 0; b < B; ++b) {
            const double* src = gy.data() + (b * total_c + c0) * HW;
            double* dst = gt.data() + b * C * HW;
            for (std::size_t i = 0; i < C * HW; ++i) dst[i] += src[i];
          }
        }
        c0 += C;
      }
    });
  }
  return y;
}

Tensor slice_channels(Tape* tape, const Tensor& x, std::size_t first, std::size_t count) {
  require_rank(x, 4, "slice_channels", "input");
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (first + count > C || count == 0) {
    throw ShapeError("slice_channels: range [" + std::to_string(first) + "," +
                     std::to_string(first + count) + ") outside " + shape_string(x.shape()));
  }
  const bool track = tracking(tape, x);
  Tensor y({B, count, x.dim(2), x.dim(3)}, 0.0, track);
  for (std::size_t b = 0; b < B; ++b) {
    auto src = x.values().subspan((b * C + first) * HW, count * HW);
    std::copy(src.begin(), src.end(), y.values().begin() + static_cast<long>(b * count * HW));
  }
  if (track) {
    tape->record([x, y, B, C, HW, first, count]() mutable {
      if (!y.has_grad()) return;
      auto gy = std::as_const(y).grad();
      auto gx = x.grad_accum();
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < count * HW; ++i) {
          gx[(b * C + first) * HW + i] += gy[b * count * HW + i];
        }
      }
    });
  }
  return y;
}

Tensor channel_scale(Tape* tape, const Tensor& x, const Tensor& gate) {
  require_rank(x, 4, "channel_scale", "input");
  require_rank(gate, 2, "channel_scale", "gate");
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gate.dim(0) != B || gate.dim(1) != C) {
    throw ShapeError("channel_scale: gate " + shape_string(gate.shape()) + " does not match " +
                     shape_string(x.shape()));
  }
  const bool track = tracking(tape, x, gate);
  Tensor y(x.shape(), 0.0, track);
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const double s = gate[bc];
    for (std::size_t i = 0; i < HW; ++i) y[bc * HW + i] = x[bc * HW + i] * s;
  }
  if (track) {
    tape->record([x, gate, y, B, C, HW]() mutable {
      if (!y.has_grad()) return;
      auto gy = std::as_const(y).grad();
      for (std::size_t bc = 0; bc < B * C; ++bc) {
        if (x.requires_grad()) {
          auto gx = x.grad_accum();
          for (std::size_t i = 0; i < HW; ++i) gx[bc * HW + i] += gy[bc * HW + i] * gate[bc];
        }
        if (gate.requires_grad()) {
          double s = 0.0;
          for (std::size_t i = 0; i < HW; ++i) s += gy[bc * HW + i] * x[bc * HW + i];
          gate.grad_accum()[bc] += s;
        }
      }
    });
  }
  return y;
}

Tensor spatial_scale(Tape* tape, const Tensor& x, const Tensor& gate) {
  require_rank(x, 4, "spatial_scale", "input");
  require_rank(gate, 4, "spatial_scale", "gate");
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gate.dim(0) != B || gate.dim(1) != 1 || gate.dim(2) != x.dim(2) || gate.dim(3) != x.dim(3)) {
    throw ShapeError("spatial_scale: gate " + shape_string(gate.shape()) + " does not match " +
                     shape_string(x.shape()));
  }
  const bool track = tracking(tape, x, gate);
  Tensor y(x.shape(), 0.0, track);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t i = 0; i < HW; ++i) {
        y[(b * C + c) * HW + i] = x[(b * C + c) * HW + i] * gate[b * HW + i];
      }
    }
  }
  if (track) {
    tape->record([x, gate, y, B, C, HW]() mutable {
      if (!y.has_grad()) return;
      auto gy = std::as_const(y).grad();
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t base = (b * C + c) * HW;
          if (x.requires_grad()) {
            auto gx = x.grad_accum();
            for (std::size_t i = 0; i < HW; ++i) gx[base + i] += gy[base + i] * gate[b * HW + i];
          }
          if (gate.requires_grad()) {
            auto gg = gate.grad_accum();
            for (std::size_t i = 0; i < HW; ++i) gg[b * HW + i] += gy[base + i] * x[base + i];
          }
        }
      }
    });
  }
  return y;
}

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
  return binary(
      tape, a, b, "add", [](double x, double y) { return x + y; },
      [](double, double) { return std::pair{1.0, 1.0}; });
}

Tensor sub(Tape* tape, const Tensor& a, const Tensor& b) {
  return binary(
      tape, a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double) { return std::pair{1.0, -1.0}; });
}

Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
  return binary(
      tape, a, b, "mul", [](double x, double y) { return x * y; },
      [](double x, double y) { return std::pair{y, x}; });
}

Tensor div(Tape* tape, const Tensor& a, const Tensor& b) {
  return binary(
      tape, a, b, "div", [](double x, double y) { return x / guard_divisor(y); },
      [](double x, double y) {
        const double d = guard_divisor(y);
        const double db = std::abs(y) >= kDivEps ? -x / (d * d) : 0.0;
        return std::pair{1.0 / d, db};
      });
}

Tensor sqrt(Tape* tape, const Tensor& x) {
  return unary(
      tape, x, [](double v) { return std::sqrt(std::max(v, 0.0)); },
      [](double v, double y) { return v > 0.0 ? 0.5 / std::max(y, kSqrtEps) : 0.0; });
}

Tensor square(Tape* tape, const Tensor& x) {
  return unary(
      tape, x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor scale(Tape* tape, const Tensor& x, double factor) {
  return unary(
      tape, x, [factor](double v) { return v * factor; },
      [factor](double, double) { return factor; });
}

Tensor shift(Tape* tape, const Tensor& x, double offset) {
  return unary(
      tape, x, [offset](double v) { return v + offset; }, [](double, double) { return 1.0; });
}

Tensor clamp(Tape* tape, const Tensor& x, double lo, double hi) {
  Tensor y = unary(
      tape, x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
  BranchSite site(x.numel());
  if (site.codes.empty()) return y;
  auto xv = x.values();
  auto yv = y.values();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    if (site.recording) site.codes[i] = xv[i] < lo ? -1 : (xv[i] > hi ? 1 : 0);
    else yv[i] = site.codes[i] < 0 ? lo : (site.codes[i] > 0 ? hi : xv[i]);
  }
  return y;
}

Tensor abs(Tape* tape, const Tensor& x) {
  Tensor y = unary(
      tape, x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
  BranchSite site(x.numel());
  if (site.codes.empty()) return y;
  auto xv = x.values();
  auto yv = y.values();
  // Code 0 marks an exact zero, whose subgradient 0 is what |x| gives under
  // central differences, so it stays unpinned.
  for (std::size_t i = 0; i < xv.size(); ++i) {
    if (site.recording) site.codes[i] = xv[i] > 0.0 ? 1 : (xv[i] < 0.0 ? -1 : 0);
    else if (site.codes[i] != 0) yv[i] = site.codes[i] * xv[i];
  }
  return y;
}

Tensor atan(Tape* tape, const Tensor& x) {
  return unary(
      tape, x, [](double v) { return std::atan(v); },
      [](double v, double) { return 1.0 / (1.0 + v * v); });
}

Tensor pow(Tape* tape, const Tensor& x, double p) {
  if (p == 1.0) {
    return unary(
        tape, x, [](double v) { return v; }, [](double, double) { return 1.0; });
  }
  return unary(
      tape, x, [p](double v) { return std::pow(std::max(v, 0.0), p); },
      [p](double v, double) { return v > 0.0 ? p * std::pow(v, p - 1.0) : 0.0; });
}

namespace {
thread_local BranchPin* active_pin = nullptr;
}  // namespace

PinScope::PinScope(BranchPin& pin) : previous_(active_pin) {
  pin.recording_ = pin.sites_.empty();
  pin.cursor_ = 0;
  active_pin = &pin;
}

PinScope::~PinScope() {
  if (active_pin != nullptr) active_pin->recording_ = false;
  active_pin = previous_;
}

BranchSite::BranchSite(std::size_t n) {
  BranchPin* pin = active_pin;
  if (pin == nullptr) return;
  if (pin->recording_) {
    pin->sites_.emplace_back(n, 0);
    codes = pin->sites_.back();
    recording = true;
    return;
  }
  if (pin->cursor_ >= pin->sites_.size() || pin->sites_[pin->cursor_].size() != n) {
    throw ShapeError("branch pin replayed on a different op sequence");
  }
  codes = pin->sites_[pin->cursor_++];
}

Tensor sum(Tape* tape, const Tensor& x) {
  const bool track = tracking(tape, x);
  double s = 0.0;
  for (double v : x.values()) s += v;
  Tensor y = Tensor::scalar(s, track);
  if (track) {
    tape->record([x, y]() mutable {
      if (!y.has_grad()) return;
      const double g = std::as_const(y).grad()[0];
      for (double& gx : x.grad_accum()) gx += g;
    });
  }
  return y;
}

Tensor mean(Tape* tape, const Tensor& x) {
  return scale(tape, sum(tape, x), 1.0 / static_cast<double>(x.numel()));
}

Tensor select(Tape* tape, std::span<const std::uint8_t> mask, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "select");
  if (mask.size() != a.numel()) {
    throw ShapeError("select: mask has " + std::to_string(mask.size()) + " entries for shape " +
                     shape_string(a.shape()));
  }
  const bool track = tracking(tape, a, b);
  Tensor y(a.shape(), 0.0, track);
  for (std::size_t i = 0; i < mask.size(); ++i) y[i] = mask[i] ? a[i] : b[i];
  if (track) {
    std::vector<std::uint8_t> m(mask.begin(), mask.end());
    tape->record([a, b, y, m = std::move(m)]() mutable {
      if (!y.has_grad()) return;
      auto gy = std::as_const(y).grad();
      if (a.requires_grad()) {
        auto ga = a.grad_accum();
        for (std::size_t i = 0; i < gy.size(); ++i) if (m[i]) ga[i] += gy[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_accum();
        for (std::size_t i = 0; i < gy.size(); ++i) if (!m[i]) gb[i] += gy[i];
      }
    });
  }
  return y;
}

Tensor filter3x3_replicate(Tape* tape, const Tensor& x, const std::array<double, 9>& kernel) {
  if (x.rank() < 2) throw ShapeError("filter3x3_replicate: need at least rank 2");
  const std::size_t H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
  const std::size_t planes = x.numel() / (H * W);
  const bool track = tracking(tape, x);
  Tensor y(x.shape(), 0.0, track);
  auto clampi = [](long v, std::size_t n) {
    return static_cast<std::size_t>(std::clamp(v, 0L, static_cast<long>(n) - 1));
  };
  for (std::size_t p = 0; p < planes; ++p) {
    const std::size_t base = p * H * W;
    for (std::size_t i = 0; i < H; ++i) {
      for (std::size_t j = 0; j < W; ++j) {
        double s = 0.0;
        for (int dy = -1; dy <= 1; ++dy) {
          const std::size_t si = clampi(static_cast<long>(i) + dy, H);
          for (int dx = -1; dx <= 1; ++dx) {
            const std::size_t sj = clampi(static_cast<long>(j) + dx, W);
            s += kernel[(dy + 1) * 3 + (dx + 1)] * x[base + si * W + sj];
          }
        }
        y[base + i * W + j] = s;
      }
    }
  }
  if (track) {
    tape->record([x, y, kernel, H, W, planes, clampi]() mutable {
      if (!y.has_grad()) return;
      auto gy = std::as_const(y).grad();
      auto gx = x.grad_accum();
      for (std::size_t p = 0; p < planes; ++p) {
        const std::size_t base = p * H * W;
        for (std::size_t i = 0; i < H; ++i) {
          for (std::size_t j = 0; j < W; ++j) {
            const double g = gy[base + i * W + j];
            for (int dy = -1; dy <= 1; ++dy) {
              const std::size_t si = clampi(static_cast<long>(i) + dy, H);
              for (int dx = -1; dx <= 1; ++dx) {
                const std::size_t sj = clampi(static_cast<long>(j) + dx, W);
                gx[base + si * W + sj] += kernel[(dy + 1) * 3 + (dx + 1)] * g;
              }
            }
          }
        }
      }
    });
  }
  return y;
}

}  // namespace gacn::ops
