#pragma once

// Neighbour contrast, centroid contrast and redundancy reduction losses, and
// their weighted sum.

#include <optional>
#include <vector>

#include "all4one/tensor.hpp"

namespace all4one {

struct ObjectiveParams {
  double tau = 0.2;
  double lambda_red = 0.5;
  double sigma = 0.5;  // neighbour contrast weight
  double kappa = 0.5;  // centroid contrast weight
  double eta = 5.0;    // redundancy reduction weight
  bool symmetrize = true;

  void validate() const;
  bool uses_neighbour() const { return sigma != 0.0; }
  bool uses_centroid() const { return kappa != 0.0; }
  bool uses_redundancy() const { return eta != 0.0; }
};

// InfoNCE with in-batch negatives: mean over i of
// −log softmax_k(a_i·b_k / τ)[i], rows of a and b unit-normalised first.
Tensor info_nce(const Tensor& anchors, const Tensor& candidates, double tau);

// Neighbour contrast. `nn1` comes from the support set and is detached.
Tensor neighbour_loss(const Tensor& nn1, const Tensor& p2, double tau);
// Mean of neighbour_loss(nn1, p2) and the role-swapped neighbour_loss(nn2, p1).
Tensor symmetric_neighbour_loss(const Tensor& nn1, const Tensor& p2, const Tensor& nn2,
                                const Tensor& p1, double tau);

// Centroid contrast; gradients reach both centroid batches.
Tensor centroid_loss(const Tensor& c1, const Tensor& c2, double tau);
Tensor symmetric_centroid_loss(const Tensor& c1, const Tensor& c2, const Tensor& c1_swapped,
                               const Tensor& c2_swapped, double tau);

// D×D matrix z1ᵀ·z2 after unit-normalising every feature column over the
// batch. Zero columns stay zero and are reported in `degenerate`.
Tensor cross_correlation(const Tensor& z1, const Tensor& z2,
                         std::vector<std::size_t>* degenerate = nullptr);

// sqrt(Σ_i (1−cc1_ii)² + (1−cc2_ii)² / 2D)
//   + λ·sqrt(Σ_{i≠j} cc1_ij² + cc2_ij² / 2D(D−1))
Tensor redundancy_loss(const Tensor& cc1, const Tensor& cc2, double lambda_red);

// Component losses of one step. Absent terms (queue warm-up, ablations)
// are left empty.
struct LossTerms {
  std::optional<Tensor> neighbour;
  std::optional<Tensor> centroid;
  std::optional<Tensor> redundancy;
};

struct LossBreakdown {
  double l_nn = 0.0;
  double l_centroid = 0.0;
  double l_red = 0.0;
  double l_total = 0.0;
  bool has_nn = false;
  bool has_centroid = false;
  bool has_red = false;
  double red_contribution = 0.0;  // η·l_red
  Tensor total;                   // differentiable σ·l_nn + κ·l_centroid + η·l_red
};

LossBreakdown total_loss(const LossTerms& parts, const ObjectiveParams& params);

}  // namespace all4one
