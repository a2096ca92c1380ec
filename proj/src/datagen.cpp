#include "gacn/datagen.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "gacn/random.hpp"

namespace gacn {
namespace {

void require_same(const Image& a, const Image& b, const char* what) {
  if (!a.same_size(b)) {
    throw ShapeError(std::string(what) + ": " + std::to_string(a.width) + "x" +
                     std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                     std::to_string(b.height));
  }
}

// Value noise: random lattice values every `cell` px, smoothstep-interpolated.
std::vector<double> value_noise(std::size_t w, std::size_t h, double cell, Rng& rng) {
  const std::size_t gw = static_cast<std::size_t>(std::ceil(w / cell)) + 2;
  const std::size_t gh = static_cast<std::size_t>(std::ceil(h / cell)) + 2;
  std::vector<double> lattice(gw * gh);
  for (double& v : lattice) v = rng.uniform();
  const double ox = rng.uniform(0.0, cell), oy = rng.uniform(0.0, cell);
  std::vector<double> out(w * h);
  auto smooth = [](double t) { return t * t * (3.0 - 2.0 * t); };
  for (std::size_t y = 0; y < h; ++y) {
    const double fy = (static_cast<double>(y) + oy) / cell;
    const std::size_t iy = static_cast<std::size_t>(fy);
    const double ty = smooth(fy - static_cast<double>(iy));
    for (std::size_t x = 0; x < w; ++x) {
      const double fx = (static_cast<double>(x) + ox) / cell;
      const std::size_t ix = static_cast<std::size_t>(fx);
      const double tx = smooth(fx - static_cast<double>(ix));
      const double v00 = lattice[iy * gw + ix], v01 = lattice[iy * gw + ix + 1];
      const double v10 = lattice[(iy + 1) * gw + ix], v11 = lattice[(iy + 1) * gw + ix + 1];
      out[y * w + x] = (v00 * (1 - tx) + v01 * tx) * (1 - ty) + (v10 * (1 - tx) + v11 * tx) * ty;
    }
  }
  return out;
}

// Multi-octave noise plus a few oriented stripes, normalized to roughly [0,1].
std::vector<double> texture(std::size_t w, std::size_t h, Rng& rng) {
  std::vector<double> t(w * h, 0.0);
  double amp = 1.0, total = 0.0;
  for (double cell : {24.0, 10.0, 4.0, 2.0}) {
    const std::vector<double> n = value_noise(w, h, cell * rng.uniform(0.7, 1.3), rng);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] += amp * n[i];
    total += amp;
    amp *= rng.uniform(0.5, 0.9);
  }
  const double theta = rng.uniform(0.0, std::numbers::pi);
  const double freq = rng.uniform(0.15, 0.6), stripe = rng.uniform(0.0, 0.5);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double u = std::cos(theta) * static_cast<double>(x) + std::sin(theta) * static_cast<double>(y);
      t[y * w + x] = t[y * w + x] / total + stripe * 0.5 * (std::sin(freq * u) > 0.0 ? 1.0 : -1.0);
    }
  }
  const auto [lo, hi] = std::minmax_element(t.begin(), t.end());
  const double mn = *lo, span = std::max(*hi - *lo, 1e-9);
  const double low = rng.uniform(0.0, 0.35), high = rng.uniform(0.65, 1.0);
  for (double& v : t) v = low + (high - low) * (v - mn) / span;
  return t;
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

void GenConfig::validate() const {
  if (!(sigma_min >= 0.0 && sigma_min <= sigma_max)) {
    throw std::invalid_argument("blur sigma range must satisfy 0 <= min <= max");
  }
  if (!(min_fraction > 0.0 && min_fraction < max_fraction && max_fraction < 1.0)) {
    throw std::invalid_argument("foreground bounds must satisfy 0 < min < max < 1");
  }
}

TrainingSample generate_pair(const Image& image, const Image& mask, double sigma) {
  require_same(image, mask, "generate_pair: image and mask sizes differ");
  if (mask.channels != 1) throw ShapeError("generate_pair: mask must be single-channel");
  if (foreground_fraction(mask) == 0.0) throw DataError("generate_pair: mask is empty");
  const Image blurred = gaussian_blur(image, sigma);
  const Image soft = gaussian_blur(mask, sigma / 2.0);
  TrainingSample s;
  s.near_focused = Image(image.width, image.height, image.channels);
  s.far_focused = s.near_focused;
  const std::size_t n = image.plane_size();
  for (std::size_t c = 0; c < image.channels; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      // Away from the seam the blurred mask is 0 or 1 up to kernel-sum roundoff.
      double m = soft.data[i];
      if (m > 1.0 - 1e-12) m = 1.0;
      if (m < 1e-12) m = 0.0;
      const double sharp = image.data[c * n + i], blur = blurred.data[c * n + i];
      s.near_focused.data[c * n + i] = sharp * m + blur * (1.0 - m);
      s.far_focused.data[c * n + i] = blur * m + sharp * (1.0 - m);
    }
  }
  s.mask = mask;
  s.fused = image;
  s.sigma = sigma;
  return s;
}

double foreground_fraction(const Image& mask) {
  if (mask.empty()) return 0.0;
  std::size_t fg = 0;
  for (std::size_t i = 0; i < mask.plane_size(); ++i) fg += mask.data[i] >= 0.5;
  return static_cast<double>(fg) / static_cast<double>(mask.plane_size());
}

bool filter_by_foreground(const Image& mask, const GenConfig& cfg) {
  const double f = foreground_fraction(mask);
  return f >= cfg.min_fraction && f <= cfg.max_fraction;
}

TrainingSample crop_sample(const TrainingSample& s, std::size_t x0, std::size_t y0,
                           std::size_t side) {
  TrainingSample out = s;
  out.near_focused = crop(s.near_focused, x0, y0, side, side);
  out.far_focused = crop(s.far_focused, x0, y0, side, side);
  out.mask = crop(s.mask, x0, y0, side, side);
  out.fused = crop(s.fused, x0, y0, side, side);
  return out;
}

TrainingSample resize_sample(const TrainingSample& s, std::size_t side) {
  TrainingSample out = s;
  out.near_focused = resize_bilinear(s.near_focused, side, side);
  out.far_focused = resize_bilinear(s.far_focused, side, side);
  out.fused = resize_bilinear(s.fused, side, side);
  out.mask = resize_bilinear(s.mask, side, side);
  for (double& v : out.mask.data) v = v >= 0.5 ? 1.0 : 0.0;
  return out;
}

TrainingSample to_gray(const TrainingSample& s) {
  TrainingSample out = s;
  out.near_focused = to_gray(s.near_focused);
  out.far_focused = to_gray(s.far_focused);
  out.fused = to_gray(s.fused);
  return out;
}

TrainingSample augment(const TrainingSample& sample, const AugmentConfig& cfg, std::uint64_t seed) {
  if (!cfg.enabled) return sample;
  const std::size_t W = sample.fused.width, H = sample.fused.height;
  const std::size_t side = cfg.crop == 0 ? std::min(W, H) : cfg.crop;
  if (side > W || side > H) {
    throw ShapeError("augment: crop " + std::to_string(side) + " exceeds image " +
                     std::to_string(W) + "x" + std::to_string(H));
  }
  Rng rng(seed);
  const long x0 = static_cast<long>(rng.below(W - side + 1));
  const long y0 = static_cast<long>(rng.below(H - side + 1));
  TrainingSample out = crop_sample(sample, static_cast<std::size_t>(x0), static_cast<std::size_t>(y0), side);

  // Each source is cut from its own shifted window, kept inside the frame.
  auto shifted = [&](const Image& src) {
    const long dx = rng.between(-cfg.max_offset, cfg.max_offset);
    const long dy = rng.between(-cfg.max_offset, cfg.max_offset);
    const long sx = std::clamp(x0 + dx, 0L, static_cast<long>(W - side));
    const long sy = std::clamp(y0 + dy, 0L, static_cast<long>(H - side));
    return crop(src, static_cast<std::size_t>(sx), static_cast<std::size_t>(sy), side, side);
  };
  if (cfg.max_offset > 0) {
    out.near_focused = shifted(sample.near_focused);
    out.far_focused = shifted(sample.far_focused);
  }
  if (cfg.extra_blur_max > 0.0 && rng.uniform() < cfg.extra_blur_prob) {
    const double s = cfg.extra_blur_max * (1.0 - rng.uniform());
    out.near_focused = gaussian_blur(out.near_focused, s);
    out.far_focused = gaussian_blur(out.far_focused, s);
    out.fused = gaussian_blur(out.fused, s);
  }
  if (cfg.noise_sigma > 0.0) {
    for (Image* img : {&out.near_focused, &out.far_focused}) {
      for (double& v : img->data) v = std::clamp(v + cfg.noise_sigma * rng.normal(), 0.0, 1.0);
    }
  }
  return out;
}

std::pair<Image, Image> synth_scene(std::size_t width, std::size_t height, std::uint64_t seed,
                                    std::size_t channels) {
  Rng rng(seed);
  Image mask(width, height, 1);
  for (int attempt = 0; attempt < 50; ++attempt) {
    std::fill(mask.data.begin(), mask.data.end(), 0.0);
    const long blobs = rng.between(1, 3);
    for (long k = 0; k < blobs; ++k) {
      const double cx = rng.uniform(0.15, 0.85) * static_cast<double>(width);
      const double cy = rng.uniform(0.15, 0.85) * static_cast<double>(height);
      const double side = static_cast<double>(std::min(width, height));
      const double ax = rng.uniform(0.12, 0.35) * side, ay = rng.uniform(0.12, 0.35) * side;
      const double th = rng.uniform(0.0, std::numbers::pi);
      const double c = std::cos(th), s = std::sin(th);
      for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
          const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
          const double u = (c * dx + s * dy) / ax, v = (-s * dx + c * dy) / ay;
          if (u * u + v * v <= 1.0) mask.at(x, y) = 1.0;
        }
      }
    }
    const double f = foreground_fraction(mask);
    if (f >= 0.1 && f <= 0.6) break;
  }
  Image img(width, height, channels);
  const std::size_t n = img.plane_size();
  for (std::size_t c = 0; c < channels; ++c) {
    const std::vector<double> bg = texture(width, height, rng);
    const std::vector<double> fg = texture(width, height, rng);
    for (std::size_t i = 0; i < n; ++i) img.data[c * n + i] = mask.data[i] > 0.5 ? fg[i] : bg[i];
  }
  return {img, mask};
}

void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write manifest " + path.string());
  for (const auto& e : entries) {
    os << e.id << '\t' << e.near_focused.generic_string() << '\t' << e.far_focused.generic_string()
       << '\t' << e.mask.generic_string() << '\t' << e.fused.generic_string() << '\t'
       << format_double(e.sigma) << '\n';
  }
  if (!os) throw DataError("failed writing manifest " + path.string());
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open manifest " + path.string());
  std::vector<ManifestEntry> entries;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) fields.push_back(f);
    auto fail = [&](const std::string& why) {
      return DataError(path.string() + ":" + std::to_string(lineno) + ": " + why);
    };
    if (fields.size() != 6) {
      throw fail("expected 6 tab-separated fields, got " + std::to_string(fields.size()));
    }
    ManifestEntry e{fields[0], fields[1], fields[2], fields[3], fields[4], 0.0};
    const auto res = std::from_chars(fields[5].data(), fields[5].data() + fields[5].size(), e.sigma);
    if (res.ec != std::errc{} || res.ptr != fields[5].data() + fields[5].size() || e.sigma < 0.0) {
      throw fail("bad sigma '" + fields[5] + "'");
    }
    if (e.id.empty()) throw fail("empty sample id");
    entries.push_back(std::move(e));
  }
  return entries;
}

std::filesystem::path manifest_path(const std::filesystem::path& manifest,
                                    const std::filesystem::path& entry) {
  return entry.is_absolute() ? entry : manifest.parent_path() / entry;
}

ManifestEntry save_sample(const TrainingSample& s, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  ManifestEntry e{s.id, s.id + "_near.png", s.id + "_far.png", s.id + "_mask.png",
                  s.id + "_fused.png", s.sigma};
  save_image(s.near_focused, dir / e.near_focused);
  save_image(s.far_focused, dir / e.far_focused);
  save_image(s.mask, dir / e.mask);
  save_image(s.fused, dir / e.fused);
  return e;
}

TrainingSample load_sample(const ManifestEntry& e, const std::filesystem::path& manifest) {
  TrainingSample s;
  s.id = e.id;
  s.sigma = e.sigma;
  s.near_focused = load_image(manifest_path(manifest, e.near_focused));
  s.far_focused = load_image(manifest_path(manifest, e.far_focused));
  s.mask = to_gray(load_image(manifest_path(manifest, e.mask)));
  s.fused = load_image(manifest_path(manifest, e.fused));
  for (double& v : s.mask.data) v = v >= 0.5 ? 1.0 : 0.0;
  if (!s.near_focused.same_size(s.far_focused) || !s.near_focused.same_size(s.mask) ||
      !s.near_focused.same_size(s.fused)) {
    throw DataError("sample " + e.id + ": images differ in size");
  }
  return s;
}

GenSummary generate_dataset(const std::filesystem::path& images, const std::filesystem::path& masks,
                            const std::filesystem::path& out, const GenConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::map<std::string, std::filesystem::path> mask_by_stem;
  for (const auto& m : list_images(masks)) mask_by_stem[m.stem().string()] = m;
  Rng rng = Rng::derive(seed, 5);
  GenSummary summary;
  std::size_t paired = 0;
  for (const auto& path : list_images(images)) {
    const auto it = mask_by_stem.find(path.stem().string());
    if (it == mask_by_stem.end()) continue;
    ++paired;
    const double sigma = rng.uniform(cfg.sigma_min, cfg.sigma_max);
    Image mask = to_gray(load_image(it->second));
    for (double& v : mask.data) v = v >= 0.5 ? 1.0 : 0.0;
    if (!filter_by_foreground(mask, cfg)) {
      ++summary.rejected;
      continue;
    }
    TrainingSample s = generate_pair(load_image(path), mask, sigma);
    s.id = path.stem().string();
    summary.entries.push_back(save_sample(s, out));
    ++summary.accepted;
  }
  if (paired == 0) throw DataError("no image has a mask with the same name");
  std::filesystem::create_directories(out);
  write_manifest(summary.entries, out / "manifest.tsv");
  return summary;
}

void write_synth_corpus(const std::filesystem::path& dir, std::size_t count, std::size_t side,
                        std::uint64_t seed, std::size_t channels) {
  Rng rng = Rng::derive(seed, 6);
  for (std::size_t i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "s%04zu.png", i);
    auto [img, mask] = synth_scene(side, side, rng.next(), channels);
    save_image(img, dir / "images" / name);
    save_image(mask, dir / "masks" / name);
  }
}

}  // namespace gacn
