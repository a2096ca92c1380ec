#pragma once

#include <cstddef>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "gacn/tensor.hpp"

namespace gacn {

/// Thrown for unreadable, malformed or inconsistent input data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Planar image with samples in [0,1]: data[c*H*W + y*W + x].
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<double> data;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::size_t c = 1, double fill = 0.0)
      : width(w), height(h), channels(c), data(w * h * c, fill) {}

  std::size_t plane_size() const { return width * height; }
  bool empty() const { return data.empty(); }
  bool same_size(const Image& o) const { return width == o.width && height == o.height; }

  double& at(std::size_t x, std::size_t y, std::size_t c = 0) {
    return data[c * plane_size() + y * width + x];
  }
  double at(std::size_t x, std::size_t y, std::size_t c = 0) const {
    return data[c * plane_size() + y * width + x];
  }
};

/// Reads an 8-bit PNG/PGM (gray, RGB or RGBA; alpha dropped).
Image load_image(const std::filesystem::path& path);
/// Writes an 8-bit image; the format follows the file extension.
void save_image(const Image& img, const std::filesystem::path& path);
/// Image files (png, pgm, ppm, jpg, bmp, tif) directly inside `dir`, sorted by name.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);

/// ITU-R 601 luma: 0.299 R + 0.587 G + 0.114 B. Gray input is returned as is.
Image to_gray(const Image& img);
Image channel(const Image& img, std::size_t c);

/// Bilinear resampling with pixel-centre alignment; identity when the size is unchanged.
Image resize_bilinear(const Image& img, std::size_t width, std::size_t height);
Image crop(const Image& img, std::size_t x0, std::size_t y0, std::size_t width, std::size_t height);

/// Normalized gaussian taps truncated at ceil(3 sigma). sigma <= 0 gives {1}.
std::vector<double> gaussian_kernel(double sigma);
/// Separable gaussian blur with replicate borders.
Image gaussian_blur(const Image& img, double sigma);

/// Single-channel image -> [1,1,H,W] tensor (and back).
Tensor to_tensor(const Image& gray, bool requires_grad = false);
Image from_tensor(const Tensor& t);

}  // namespace gacn
