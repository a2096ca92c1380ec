#include "gacn/image.hpp"

#include <algorithm>
#include <cmath>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

namespace gacn {

Image load_image(const std::filesystem::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw DataError("cannot read image " + path.string());
  if (m.depth() != CV_8U) throw DataError("expected 8-bit samples in " + path.string());
  const int nc = m.channels();
  if (nc != 1 && nc != 3 && nc != 4) {
    throw DataError("unsupported channel count " + std::to_string(nc) + " in " + path.string());
  }
  const std::size_t out_c = nc == 1 ? 1 : 3;
  Image img(static_cast<std::size_t>(m.cols), static_cast<std::size_t>(m.rows), out_c);
  for (int y = 0; y < m.rows; ++y) {
    const auto* row = m.ptr<std::uint8_t>(y);
    for (int x = 0; x < m.cols; ++x) {
      const auto ux = static_cast<std::size_t>(x), uy = static_cast<std::size_t>(y);
      if (out_c == 1) {
        img.at(ux, uy) = row[x] / 255.0;
      } else {
        // OpenCV stores BGR(A).
        const std::uint8_t* px = row + x * nc;
        img.at(ux, uy, 0) = px[2] / 255.0;
        img.at(ux, uy, 1) = px[1] / 255.0;
        img.at(ux, uy, 2) = px[0] / 255.0;
      }
    }
  }
  return img;
}

void save_image(const Image& img, const std::filesystem::path& path) {
  if (img.channels != 1 && img.channels != 3) {
    throw DataError("cannot save image with " + std::to_string(img.channels) + " channels");
  }
  const int type = img.channels == 1 ? CV_8UC1 : CV_8UC3;
  cv::Mat m(static_cast<int>(img.height), static_cast<int>(img.width), type);
  auto quantize = [](double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
  };
  for (std::size_t y = 0; y < img.height; ++y) {
    auto* row = m.ptr<std::uint8_t>(static_cast<int>(y));
    for (std::size_t x = 0; x < img.width; ++x) {
      if (img.channels == 1) {
        row[x] = quantize(img.at(x, y));
      } else {
        row[3 * x + 0] = quantize(img.at(x, y, 2));
        row[3 * x + 1] = quantize(img.at(x, y, 1));
        row[3 * x + 2] = quantize(img.at(x, y, 0));
      }
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), m)) throw DataError("cannot write image " + path.string());
}

std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (ext == ".png" || ext == ".pgm" || ext == ".ppm" || ext == ".jpg" || ext == ".jpeg" ||
        ext == ".bmp" || ext == ".tif" || ext == ".tiff") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  return files;
}

Image to_gray(const Image& img) {
  if (img.channels == 1) return img;
  if (img.channels != 3) {
    throw DataError("to_gray: expected 1 or 3 channels, got " + std::to_string(img.channels));
  }
  Image g(img.width, img.height, 1);
  const std::size_t n = img.plane_size();
  for (std::size_t i = 0; i < n; ++i) {
    g.data[i] = 0.299 * img.data[i] + 0.587 * img.data[n + i] + 0.114 * img.data[2 * n + i];
  }
  return g;
}

Image channel(const Image& img, std::size_t c) {
  Image out(img.width, img.height, 1);
  const std::size_t n = img.plane_size();
  std::copy_n(img.data.begin() + static_cast<long>(c * n), n, out.data.begin());
  return out;
}

Image resize_bilinear(const Image& img, std::size_t width, std::size_t height) {
  if (width == img.width && height == img.height) return img;
  if (img.empty() || width == 0 || height == 0) throw DataError("resize of empty image");
  Image out(width, height, img.channels);
  const double sx = static_cast<double>(img.width) / static_cast<double>(width);
  const double sy = static_cast<double>(img.height) / static_cast<double>(height);
  auto sample_axis = [](double pos, std::size_t n, std::size_t& i0, std::size_t& i1, double& t) {
    pos = std::clamp(pos, 0.0, static_cast<double>(n - 1));
    i0 = static_cast<std::size_t>(std::floor(pos));
    i1 = std::min(i0 + 1, n - 1);
    t = pos - static_cast<double>(i0);
  };
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t y = 0; y < height; ++y) {
      std::size_t y0, y1;
      double ty;
      sample_axis((static_cast<double>(y) + 0.5) * sy - 0.5, img.height, y0, y1, ty);
      for (std::size_t x = 0; x < width; ++x) {
        std::size_t x0, x1;
        double tx;
        sample_axis((static_cast<double>(x) + 0.5) * sx - 0.5, img.width, x0, x1, tx);
        const double top = (1 - tx) * img.at(x0, y0, c) + tx * img.at(x1, y0, c);
        const double bot = (1 - tx) * img.at(x0, y1, c) + tx * img.at(x1, y1, c);
        out.at(x, y, c) = (1 - ty) * top + ty * bot;
      }
    }
  }
  return out;
}

Image crop(const Image& img, std::size_t x0, std::size_t y0, std::size_t width, std::size_t height) {
  if (x0 + width > img.width || y0 + height > img.height) {
    throw DataError("crop window outside image");
  }
  Image out(width, height, img.channels);
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) out.at(x, y, c) = img.at(x0 + x, y0 + y, c);
    }
  }
  return out;
}

std::vector<double> gaussian_kernel(double sigma) {
  if (sigma <= 0.0) return {1.0};
  const auto radius = static_cast<std::size_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double total = 0.0;
  for (std::size_t i = 0; i < k.size(); ++i) {
    const double d = static_cast<double>(i) - static_cast<double>(radius);
    k[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    total += k[i];
  }
  for (double& v : k) v /= total;
  return k;
}

Image gaussian_blur(const Image& img, double sigma) {
  if (sigma <= 0.0) return img;
  const std::vector<double> k = gaussian_kernel(sigma);
  const long r = static_cast<long>(k.size() / 2);
  const long W = static_cast<long>(img.width), H = static_cast<long>(img.height);
  Image tmp(img.width, img.height, img.channels);
  Image out(img.width, img.height, img.channels);
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (long y = 0; y < H; ++y) {
      for (long x = 0; x < W; ++x) {
        double s = 0.0;
        for (long i = -r; i <= r; ++i) {
          const long sx = std::clamp(x + i, 0L, W - 1);
          s += k[static_cast<std::size_t>(i + r)] *
               img.at(static_cast<std::size_t>(sx), static_cast<std::size_t>(y), c);
        }
        tmp.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), c) = s;
      }
    }
    for (long y = 0; y < H; ++y) {
      for (long x = 0; x < W; ++x) {
        double s = 0.0;
        for (long i = -r; i <= r; ++i) {
          const long sy = std::clamp(y + i, 0L, H - 1);
          s += k[static_cast<std::size_t>(i + r)] *
               tmp.at(static_cast<std::size_t>(x), static_cast<std::size_t>(sy), c);
        }
        out.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), c) = s;
      }
    }
  }
  return out;
}

Tensor to_tensor(const Image& gray, bool requires_grad) {
  if (gray.channels != 1) throw DataError("to_tensor expects a single-channel image");
  return Tensor({1, 1, gray.height, gray.width}, gray.data, requires_grad);
}

Image from_tensor(const Tensor& t) {
  if (t.rank() != 4 || t.dim(0) != 1 || t.dim(1) != 1) {
    throw ShapeError("from_tensor expects [1,1,H,W], got " + shape_string(t.shape()));
  }
  Image img(t.dim(3), t.dim(2), 1);
  std::copy(t.values().begin(), t.values().end(), img.data.begin());
  return img;
}

}  // namespace gacn
