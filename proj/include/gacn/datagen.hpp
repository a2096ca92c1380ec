#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "gacn/image.hpp"

namespace gacn {

/// Random crop, optional extra blur, per-source offsets and noise.
struct AugmentConfig {
  bool enabled = true;
  std::size_t crop = 128;         // square crop side; 0 keeps the full frame
  double extra_blur_prob = 0.3;   // chance of blurring the whole sample once more
  double extra_blur_max = 1.0;    // sigma drawn from (0, extra_blur_max]
  long max_offset = 2;            // independent +-px shift of each source
  double noise_sigma = 0.01;      // additive gaussian noise on both sources
};

struct GenConfig {
  double sigma_min = 1.0;
  double sigma_max = 4.0;
  double min_fraction = 0.08;
  double max_fraction = 0.65;
  AugmentConfig augment;

  void validate() const;
};

struct TrainingSample {
  std::string id;
  Image near_focused;  // foreground sharp, background blurred
  Image far_focused;   // foreground blurred, background sharp
  Image mask;          // 1 where the near-focused source is sharp
  Image fused;         // the all-sharp original
  double sigma = 0.0;
};

/// Blends sharp and blurred copies through the mask blurred by sigma/2.
TrainingSample generate_pair(const Image& image, const Image& mask, double sigma);

double foreground_fraction(const Image& mask);
bool filter_by_foreground(const Image& mask, const GenConfig& cfg);

/// Seeded augmentation; identical seeds give identical samples.
TrainingSample augment(const TrainingSample& sample, const AugmentConfig& cfg, std::uint64_t seed);

/// Resizes every image of the sample; the mask is re-binarized at 0.5.
TrainingSample resize_sample(const TrainingSample& sample, std::size_t side);
/// Same crop window for all four images.
TrainingSample crop_sample(const TrainingSample& sample, std::size_t x0, std::size_t y0,
                           std::size_t side);
TrainingSample to_gray(const TrainingSample& sample);

/// Textured scene with one to three elliptical foreground objects.
/// Returns (image in [0,1], binary mask).
std::pair<Image, Image> synth_scene(std::size_t width, std::size_t height, std::uint64_t seed,
                                    std::size_t channels = 1);

struct ManifestEntry {
  std::string id;
  std::filesystem::path near_focused;
  std::filesystem::path far_focused;
  std::filesystem::path mask;
  std::filesystem::path fused;
  double sigma = 0.0;

  bool operator==(const ManifestEntry&) const = default;
};

/// One tab-separated line per sample: id, near, far, mask, fused, sigma.
void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path);
/// Relative paths stay as written; resolve them with manifest_path().
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
std::filesystem::path manifest_path(const std::filesystem::path& manifest,
                                    const std::filesystem::path& entry);

struct GenSummary {
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::vector<ManifestEntry> entries;
};

/// Pairs each image with the mask of the same file stem, drops masks outside the
/// foreground bounds, blurs with sigma ~ U[sigma_min, sigma_max] and writes the
/// samples plus <out>/manifest.tsv. Throws DataError when no pair exists.
GenSummary generate_dataset(const std::filesystem::path& images, const std::filesystem::path& masks,
                            const std::filesystem::path& out, const GenConfig& cfg, std::uint64_t seed);

/// Writes `count` synthetic scenes as <dir>/images/sNNNN.png and <dir>/masks/sNNNN.png.
void write_synth_corpus(const std::filesystem::path& dir, std::size_t count, std::size_t side,
                        std::uint64_t seed, std::size_t channels = 1);

/// Writes <dir>/<id>_{near,far,mask,fused}.png and returns the manifest entry
/// with paths relative to `dir`.
ManifestEntry save_sample(const TrainingSample& sample, const std::filesystem::path& dir);
TrainingSample load_sample(const ManifestEntry& entry, const std::filesystem::path& manifest);

}  // namespace gacn
