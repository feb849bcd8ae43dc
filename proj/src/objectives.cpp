#include "all4one/objectives.hpp"

#include <cmath>

#include "all4one/errors.hpp"

namespace all4one {

void ObjectiveParams::validate() const {
  if (!(tau > 0.0)) throw ConfigError("objective: tau must be strictly positive");
  if (lambda_red < 0.0 || sigma < 0.0 || kappa < 0.0 || eta < 0.0) {
    throw ConfigError("objective: weights must be non-negative");
  }
}

namespace {

void check_pair(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rank() != 2 || a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()));
  }
  if (a.rows() < 2) throw ContractError(std::string(op) + ": needs N >= 2 for negatives");
}

}  // namespace

Tensor info_nce(const Tensor& anchors, const Tensor& candidates, double tau) {
  check_pair(anchors, candidates, "info_nce");
  if (!(tau > 0.0)) throw ContractError("info_nce: tau must be positive");
  Tensor a = l2_normalize(anchors, 1);
  Tensor b = l2_normalize(candidates, 1);
  Tensor logits = scale(matmul(a, transpose(b)), 1.0 / tau);
  return scale(mean(diagonal(log_softmax_rows(logits))), -1.0);
}

Tensor neighbour_loss(const Tensor& nn1, const Tensor& p2, double tau) {
  check_pair(nn1, p2, "neighbour_loss");
  return info_nce(nn1.detach(), p2, tau);
}

Tensor symmetric_neighbour_loss(const Tensor& nn1, const Tensor& p2, const Tensor& nn2,
                                const Tensor& p1, double tau) {
  return scale(add(neighbour_loss(nn1, p2, tau), neighbour_loss(nn2, p1, tau)), 0.5);
}

Tensor centroid_loss(const Tensor& c1, const Tensor& c2, double tau) {
  check_pair(c1, c2, "centroid_loss");
  return info_nce(c1, c2, tau);
}

Tensor symmetric_centroid_loss(const Tensor& c1, const Tensor& c2, const Tensor& c1_swapped,
                               const Tensor& c2_swapped, double tau) {
  return scale(add(centroid_loss(c1, c2, tau), centroid_loss(c1_swapped, c2_swapped, tau)), 0.5);
}

Tensor cross_correlation(const Tensor& z1, const Tensor& z2, std::vector<std::size_t>* degenerate) {
  check_pair(z1, z2, "cross_correlation");
  Tensor a = l2_normalize(z1, 0, degenerate);
  Tensor b = l2_normalize(z2, 0, degenerate);
  return matmul(transpose(a), b);
}

Tensor redundancy_loss(const Tensor& cc1, const Tensor& cc2, double lambda_red) {
  if (cc1.rank() != 2 || cc1.rows() != cc1.cols() || cc1.shape() != cc2.shape()) {
    throw DimensionError("redundancy_loss: expected equal square matrices, got " +
                         shape_to_string(cc1.shape()) + " and " + shape_to_string(cc2.shape()));
  }
  const std::size_t d = cc1.rows();
  if (d < 2) throw ContractError("redundancy_loss: off-diagonal term needs D >= 2");
  std::vector<double> mask(d * d, 1.0);
  for (std::size_t i = 0; i < d; ++i) mask[i * d + i] = 0.0;
  const Tensor off_mask = Tensor::from({d, d}, std::move(mask));

  auto invariance = [](const Tensor& cc) { return sum(square(add_scalar(scale(diagonal(cc), -1.0), 1.0))); };
  auto redundancy = [&off_mask](const Tensor& cc) { return sum(square(mul(cc, off_mask))); };

  const double dd = static_cast<double>(d);
  Tensor on = scale(add(invariance(cc1), invariance(cc2)), 1.0 / (2.0 * dd));
  Tensor off = scale(add(redundancy(cc1), redundancy(cc2)), 1.0 / (2.0 * dd * (dd - 1.0)));
  return add(sqrt(on), scale(sqrt(off), lambda_red));
}

LossBreakdown total_loss(const LossTerms& parts, const ObjectiveParams& params) {
  LossBreakdown out;
  Tensor total;
  auto accumulate = [&total](const Tensor& term, double weight) {
    Tensor weighted = scale(term, weight);
    total = total.defined() ? add(total, weighted) : weighted;
    return weighted;
  };
  if (parts.neighbour) {
    out.has_nn = true;
    out.l_nn = parts.neighbour->item();
    accumulate(*parts.neighbour, params.sigma);
  }
  if (parts.centroid) {
    out.has_centroid = true;
    out.l_centroid = parts.centroid->item();
    accumulate(*parts.centroid, params.kappa);
  }
  if (parts.redundancy) {
    out.has_red = true;
    out.l_red = parts.redundancy->item();
    out.red_contribution = accumulate(*parts.redundancy, params.eta).item();
  }
  out.total = total.defined() ? total : Tensor::scalar(0.0);
  out.l_total = out.total.item();
  return out;
}

}  // namespace all4one
