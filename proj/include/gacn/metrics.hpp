#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "gacn/image.hpp"
#include "gacn/losses.hpp"

namespace gacn {

/// Q_g with exact min/max strength ratios and exact |.| on orientations.
/// Colour inputs are converted to luma first. Returns 0 when no source has an edge.
double qg_eval(const Image& a, const Image& b, const Image& fused, const QgConfig& cfg = {});

/// (sigma, Q_g) for the fused image blurred by each sigma; sigma 0 leaves it untouched.
std::vector<std::pair<double, double>> blur_sensitivity(const Image& a, const Image& b,
                                                        const Image& fused,
                                                        const std::vector<double>& sigmas,
                                                        const QgConfig& cfg = {});

/// (fused - near) min-max normalized to [0,1]; a constant difference maps to 0.5.
Image difference_image(const Image& fused, const Image& near);

struct MetricRow {
  std::string pair_id;
  std::string method;
  double qg = 0.0;
  double runtime_ms = 0.0;
};

struct MetricReport {
  std::vector<MetricRow> rows;

  double mean_qg(const std::string& method) const;
};

/// CSV header: pair_id,method,Q_g,runtime_ms
void write_report_csv(const MetricReport& report, const std::filesystem::path& path);

}  // namespace gacn
