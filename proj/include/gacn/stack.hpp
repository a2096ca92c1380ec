#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "gacn/image.hpp"
#include "gacn/network.hpp"

namespace gacn {

/// Co-registered images of one scene, all the same size.
struct FocalStack {
  std::vector<Image> images;
  std::vector<std::string> ids;

  std::size_t size() const { return images.size(); }
  /// Throws DataError unless there are at least two images of equal size.
  void validate() const;
};

/// Every image file in `dir`, sorted by file name.
FocalStack load_stack(const std::filesystem::path& dir);

/// Floor applied to each pairwise DM value before it enters the volume.
inline constexpr double kVolumeEps = 1e-6;

/// Per-pixel activity of every stack image relative to image 0:
/// values[j * pixels + i].
struct DecisionVolume {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t count = 0;
  std::vector<double> values;

  double at(std::size_t j, std::size_t i) const { return values[j * width * height + i]; }
};

/// Volume from the final DMs of pairs (0, j), j = 1..N-1. With p = pair (0,1)
/// and q = pair (0,j), both clamped to [eps, 1-eps]: DV0 = p, DV1 = 1 - p,
/// DVj = p (1 - q) / q.
DecisionVolume build_volume(const std::vector<std::vector<double>>& pair_dms, std::size_t width,
                            std::size_t height);
/// Index of the largest volume entry per pixel; ties go to the lowest index.
std::vector<std::size_t> select_sources(const DecisionVolume& dv);

struct CalibratedResult {
  Image fused;
  DecisionVolume volume;
  std::vector<std::size_t> selection;
};

/// Folds the stack pairwise: fuse(0,1), then fuse(result, 2), ...
/// Costs 2(N-1) extraction and N-1 decision passes.
Image serial_fuse(const FocalStack& stack, const GacnModel& model);
/// One extraction per image, decisions on pairs (0,j), hard selection from the
/// volume. Costs N extraction and N-1 decision passes. Independent images and
/// pairs run on `threads` workers (0: GACN_THREADS or the hardware count).
CalibratedResult calibrated_fuse(const FocalStack& stack, const GacnModel& model,
                                 std::size_t threads = 0);

/// Worker count from GACN_THREADS, else the hardware concurrency (at least 1).
std::size_t default_threads();

struct BenchRow {
  std::string strategy;
  std::size_t n = 0;
  std::size_t extraction_count = 0;
  std::size_t decision_count = 0;
  double wall_ms_total = 0.0;
  /// Mean wall time per fused output.
  double wall_ms_per_image = 0.0;
};

/// Times both strategies over `repetitions` runs each; counters are per run.
std::vector<BenchRow> bench_stack(const FocalStack& stack, const GacnModel& model,
                                  std::size_t repetitions, std::size_t threads = 0);
/// 1 - calibrated / serial per-image time, from the rows of bench_stack.
double bench_saving(const std::vector<BenchRow>& rows);
/// CSV header: strategy,N,extraction_count,decision_count,wall_ms_total,wall_ms_per_image
void write_bench_csv(const std::vector<BenchRow>& rows, const std::filesystem::path& path);

}  // namespace gacn
