#include "gacn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

namespace gacn {
namespace {

struct Edges {
  std::vector<double> g;
  std::vector<double> alpha;
};

Edges sobel(const Image& img) {
  const std::size_t W = img.width, H = img.height;
  Edges e{std::vector<double>(W * H), std::vector<double>(W * H)};
  auto px = [&](long x, long y) {
    x = std::clamp(x, 0L, static_cast<long>(W) - 1);
    y = std::clamp(y, 0L, static_cast<long>(H) - 1);
    return img.data[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)];
  };
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const long X = static_cast<long>(x), Y = static_cast<long>(y);
      const double sx = (px(X + 1, Y - 1) + 2 * px(X + 1, Y) + px(X + 1, Y + 1)) -
                        (px(X - 1, Y - 1) + 2 * px(X - 1, Y) + px(X - 1, Y + 1));
      const double sy = (px(X - 1, Y + 1) + 2 * px(X, Y + 1) + px(X + 1, Y + 1)) -
                        (px(X - 1, Y - 1) + 2 * px(X, Y - 1) + px(X + 1, Y - 1));
      e.g[y * W + x] = std::hypot(sx, sy);
      double alpha;
      if (sx != 0.0) {
        alpha = std::atan((sy * sy) / (sx * sx));
      } else {
        alpha = sy == 0.0 ? 0.0 : std::numbers::pi / 2;
      }
      e.alpha[y * W + x] = alpha;
    }
  }
  return e;
}

double transfer(double g_src, double g_f, double a_src, double a_f, const QgConfig& cfg) {
  const double hi = std::max(g_src, g_f);
  const double G = hi > 0.0 ? std::min(g_src, g_f) / hi : 1.0;
  const double D = 1.0 - std::abs(a_src - a_f) / (std::numbers::pi / 2);
  const double qs = cfg.gamma_g / (1.0 + std::exp(cfg.k_g * (G - cfg.sigma_g)));
  const double qa = cfg.gamma_a / (1.0 + std::exp(cfg.k_a * (D - cfg.sigma_a)));
  return qs * qa;
}

}  // namespace

double qg_eval(const Image& a, const Image& b, const Image& fused, const QgConfig& cfg) {
  if (!a.same_size(b) || !a.same_size(fused)) {
    throw ShapeError("qg_eval: images must share dimensions");
  }
  const Edges ea = sobel(to_gray(a)), eb = sobel(to_gray(b)), ef = sobel(to_gray(fused));
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < ea.g.size(); ++i) {
    const double wa = std::pow(ea.g[i], cfg.gamma), wb = std::pow(eb.g[i], cfg.gamma);
    num += transfer(ea.g[i], ef.g[i], ea.alpha[i], ef.alpha[i], cfg) * wa +
           transfer(eb.g[i], ef.g[i], eb.alpha[i], ef.alpha[i], cfg) * wb;
    den += wa + wb;
  }
  return den > 0.0 ? num / den : 0.0;
}

std::vector<std::pair<double, double>> blur_sensitivity(const Image& a, const Image& b,
                                                        const Image& fused,
                                                        const std::vector<double>& sigmas,
                                                        const QgConfig& cfg) {
  std::vector<std::pair<double, double>> curve;
  curve.reserve(sigmas.size());
  for (double s : sigmas) {
    const Image blurred = s > 0.0 ? gaussian_blur(fused, s) : fused;
    curve.emplace_back(s, qg_eval(a, b, blurred, cfg));
  }
  return curve;
}

Image difference_image(const Image& fused, const Image& near) {
  if (!fused.same_size(near) || fused.channels != near.channels) {
    throw ShapeError("difference_image: images must share dimensions and channels");
  }
  Image out(fused.width, fused.height, fused.channels);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = fused.data[i] - near.data[i];
  const auto [lo, hi] = std::minmax_element(out.data.begin(), out.data.end());
  const double mn = out.empty() ? 0.0 : *lo, mx = out.empty() ? 0.0 : *hi;
  for (double& v : out.data) v = mx > mn ? (v - mn) / (mx - mn) : 0.5;
  return out;
}

double MetricReport::mean_qg(const std::string& method) const {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& r : rows) {
    if (r.method != method) continue;
    s += r.qg;
    ++n;
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

void write_report_csv(const MetricReport& report, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << "pair_id,method,Q_g,runtime_ms\n";
  os.precision(10);
  for (const auto& r : report.rows) {
    os << r.pair_id << ',' << r.method << ',' << r.qg << ',' << r.runtime_ms << '\n';
  }
}

}  // namespace gacn
