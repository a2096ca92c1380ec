#include "gacn/selfcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>

#include "gacn/losses.hpp"
#include "gacn/metrics.hpp"
#include "gacn/network.hpp"
#include "gacn/ops.hpp"
#include "gacn/random.hpp"

namespace gacn {
namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo, double hi, bool grad) {
  Tensor t(std::move(shape), 0.0, grad);
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Worst relative error between the tape gradient of `loss` w.r.t. `param` and
// central differences, with piecewise ops pinned to the unperturbed branches.
double fd_error(Tensor& param, const std::function<Tensor(Tape*)>& loss, std::size_t stride = 1) {
  ops::BranchPin pin;
  param.zero_grad();
  {
    ops::PinScope scope(pin);
    Tape tape;
    Tensor l = loss(&tape);
    tape.backward(l);
  }
  const auto g = std::as_const(param).grad();
  const std::vector<double> analytic(g.begin(), g.end());
  double worst = 0.0;
  const double h = 1e-5;
  for (std::size_t i = 0; i < param.numel(); i += stride) {
    const double orig = param[i];
    auto eval = [&](double v) {
      param[i] = v;
      ops::PinScope scope(pin);
      return loss(nullptr).item();
    };
    const double num = (eval(orig + h) - eval(orig - h)) / (2 * h);
    param[i] = orig;
    const double err = std::abs(analytic[i] - num) / std::max({std::abs(analytic[i]), std::abs(num), 1e-6});
    worst = std::max(worst, err);
  }
  return worst;
}

std::string fmt(const char* label, double v) {
  std::ostringstream os;
  os << label << ' ' << v;
  return os.str();
}

CheckResult conv_direct() {
  Rng rng(11);
  const Tensor x = random_tensor({1, 2, 6, 7}, rng, -1, 1, false);
  const Tensor w = random_tensor({3, 2, 3, 3}, rng, -1, 1, false);
  const Tensor b = random_tensor({3}, rng, -1, 1, false);
  const Tensor y = ops::conv2d(nullptr, x, w, b);
  double worst = 0.0;
  for (long o = 0; o < 3; ++o)
    for (long r = 0; r < 6; ++r)
      for (long c = 0; c < 7; ++c) {
        double s = b[static_cast<std::size_t>(o)];
        for (long i = 0; i < 2; ++i)
          for (long dr = -1; dr <= 1; ++dr)
            for (long dc = -1; dc <= 1; ++dc) {
              const long rr = r + dr, cc = c + dc;
              if (rr < 0 || rr >= 6 || cc < 0 || cc >= 7) continue;
              s += x[static_cast<std::size_t>((i * 6 + rr) * 7 + cc)] *
                   w[static_cast<std::size_t>(((o * 2 + i) * 3 + dr + 1) * 3 + dc + 1)];
            }
        worst = std::max(worst, std::abs(s - y[static_cast<std::size_t>((o * 6 + r) * 7 + c)]));
      }
  return {"conv2d matches direct loops", worst < 1e-12, fmt("max abs error", worst)};
}

CheckResult conv_gradient() {
  Rng rng(12);
  Tensor x = random_tensor({1, 2, 5, 5}, rng, -2, 2, true);
  const Tensor w = random_tensor({3, 2, 3, 3}, rng, -1, 1, false);
  const Tensor b = random_tensor({3}, rng, -1, 1, false);
  const double err = fd_error(x, [&](Tape* t) { return ops::sum(t, ops::conv2d(t, x, w, b)); });
  return {"conv2d input gradient", err < 1e-6, fmt("max relative error", err)};
}

CheckResult sf_direct() {
  Rng rng(13);
  const std::size_t C = 3, H = 9, W = 8, r = 2;
  const Tensor f = random_tensor({1, C, H, W}, rng, 0, 1, false);
  const Tensor sf = spatial_frequency(nullptr, f, r);
  auto at = [&](std::size_t c, long y, long x) {
    y = std::clamp(y, 0L, static_cast<long>(H) - 1);
    x = std::clamp(x, 0L, static_cast<long>(W) - 1);
    return f[(c * H + static_cast<std::size_t>(y)) * W + static_cast<std::size_t>(x)];
  };
  double worst = 0.0;
  const long R = static_cast<long>(r);
  for (long y = 0; y < static_cast<long>(H); ++y)
    for (long x = 0; x < static_cast<long>(W); ++x) {
      double s = 0.0;
      for (long dy = -R; dy <= R; ++dy)
        for (long dx = -R; dx <= R; ++dx)
          for (std::size_t c = 0; c < C; ++c) {
            const double h = at(c, y + dy, x + dx) - at(c, y + dy, x + dx - 1);
            const double v = at(c, y + dy, x + dx) - at(c, y + dy - 1, x + dx);
            s += h * h + v * v;
          }
      const double expect = std::sqrt(s / static_cast<double>((2 * r + 1) * (2 * r + 1)));
      worst = std::max(worst, std::abs(expect - sf[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)]));
    }
  return {"spatial frequency matches direct loops", worst < 1e-9, fmt("max abs error", worst)};
}

CheckResult pipeline_gradient() {
  NetworkConfig cfg;
  GacnModel model(cfg, init_weights(cfg, 3));
  Rng rng(14);
  const Tensor a = random_tensor({1, 1, 12, 12}, rng, 0, 1, false);
  const Tensor b = random_tensor({1, 1, 12, 12}, rng, 0, 1, false);
  Tensor mask({1, 1, 12, 12});
  for (double& v : mask.values()) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
  const auto frozen = model.forward(nullptr, a, b).boundary;
  auto loss = [&](Tape* t) {
    const PairOutput out = model.forward(t, a, b, &frozen);
    return total_loss(t, dice_loss(t, out.dm_initial, mask), qg_loss(t, a, b, out.fused, {}), 1.0);
  };
  double worst = 0.0;
  for (const char* name : {"extract.0.conv_w", "extract.2.fc1_w", "extract.3.conv_b", "decide.0.conv_w",
                           "decide.1.sse_w", "decide.3.conv_b"}) {
    worst = std::max(worst, fd_error(model.weights().at(name), loss, 7));
  }
  return {"pipeline weight gradients", worst < 1e-3, fmt("max relative error", worst)};
}

CheckResult qg_anchor() {
  Rng rng(15);
  Image img(16, 16);
  for (double& v : img.data) v = rng.uniform();
  const double expect = 1.0 / ((1.0 + std::exp(-5.0)) * (1.0 + std::exp(-5.0)));
  const double got = qg_eval(img, img, img);
  return {"Q_g of identical images", std::abs(got - expect) < 1e-12, fmt("value", got)};
}

CheckResult qg_smooth() {
  Rng rng(16);
  double worst = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    Image a(16, 16), b(16, 16), f(16, 16);
    for (double& v : a.data) v = rng.uniform();
    for (double& v : b.data) v = rng.uniform();
    const double w = rng.uniform();
    for (std::size_t i = 0; i < f.data.size(); ++i) f.data[i] = w * a.data[i] + (1 - w) * b.data[i];
    const double smooth = 1.0 - qg_loss(nullptr, to_tensor(a), to_tensor(b), to_tensor(f), {}).item();
    worst = std::max(worst, std::abs(qg_eval(a, b, f) - smooth));
  }
  return {"smooth and exact Q_g agree", worst < 1e-3, fmt("max difference", worst)};
}

}  // namespace

std::vector<CheckResult> run_selfcheck() {
  return {conv_direct(), conv_gradient(), sf_direct(), pipeline_gradient(), qg_anchor(), qg_smooth()};
}

}  // namespace gacn
