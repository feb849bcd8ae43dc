#pragma once

// Central-difference verification of every differentiable component on
// small shapes (N=4, D=8, K=3).

#include <cstddef>
#include <string>
#include <vector>

namespace all4one {

inline constexpr double kGradcheckTolerance = 1e-4;
inline constexpr double kGradcheckStep = 1e-5;

struct GradcheckResult {
  std::string module;
  double max_rel_error = 0.0;
  std::size_t entries = 0;  // perturbed scalars
  bool passed() const { return max_rel_error <= kGradcheckTolerance; }
};

// neighbour, centroid, redundancy, total, mhsa, encoder_layer, batchnorm,
// train_step.
std::vector<std::string> gradcheck_modules();

// Runs one module, or all of them when `module` is empty. The train_step
// module reports one row per parameter group (train_step/online.encoder, ...).
std::vector<GradcheckResult> run_gradcheck(const std::string& module = "");

}  // namespace all4one
