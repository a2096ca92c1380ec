#pragma once

#include <string>
#include <vector>

namespace gacn {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Quick numerical self-test: conv and SF against direct loops, finite-difference
/// gradients of conv and of the full pipeline, and the Q_g anchors.
std::vector<CheckResult> run_selfcheck();

}  // namespace gacn
