#include <cmath>
#include <random>

#include "all4one/errors.hpp"
#include "all4one/nn.hpp"
#include "all4one/objectives.hpp"
#include "doctest.h"

using namespace all4one;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = n(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor mat(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor::from({r, c}, std::move(v)); }

std::vector<double> unit_rows(std::span<const double> x, std::size_t d) {
  std::vector<double> out(x.begin(), x.end());
  for (std::size_t r = 0; r < x.size() / d; ++r) {
    double sq = 0.0;
    for (std::size_t c = 0; c < d; ++c) sq += x[r * d + c] * x[r * d + c];
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] /= std::sqrt(sq);
  }
  return out;
}

// Straight-line InfoNCE with a max-shifted log-sum-exp per row.
double reference_info_nce(const Tensor& a, const Tensor& b, double tau) {
  const std::size_t n = a.rows(), d = a.cols();
  const auto ua = unit_rows(a.data(), d), ub = unit_rows(b.data(), d);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> logits(n);
    double mx = -INFINITY;
    for (std::size_t k = 0; k < n; ++k) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += ua[i * d + c] * ub[k * d + c];
      logits[k] = s / tau;
      mx = std::max(mx, logits[k]);
    }
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    total += -(logits[i] - mx - std::log(z));
  }
  return total / static_cast<double>(n);
}

// Column-normalised z1ᵀ z2, computed entry by entry.
std::vector<double> reference_cc(const Tensor& z1, const Tensor& z2) {
  const std::size_t n = z1.rows(), d = z1.cols();
  const auto a = z1.data(), b = z2.data();
  std::vector<double> na(d), nb(d);
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t i = 0; i < n; ++i) {
      na[j] += a[i * d + j] * a[i * d + j];
      nb[j] += b[i * d + j] * b[i * d + j];
    }
  }
  std::vector<double> cc(d * d);
  for (std::size_t p = 0; p < d; ++p) {
    for (std::size_t q = 0; q < d; ++q) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += a[i * d + p] * b[i * d + q];
      cc[p * d + q] = s / std::sqrt(na[p] * nb[q]);
    }
  }
  return cc;
}

double reference_redundancy(std::span<const double> c1, std::span<const double> c2, std::size_t d,
                            double lambda) {
  double on = 0.0, off = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      if (i == j) {
        on += (1 - c1[i * d + i]) * (1 - c1[i * d + i]) + (1 - c2[i * d + i]) * (1 - c2[i * d + i]);
      } else {
        off += c1[i * d + j] * c1[i * d + j] + c2[i * d + j] * c2[i * d + j];
      }
    }
  }
  const double dd = static_cast<double>(d);
  return std::sqrt(on / (2 * dd)) + lambda * std::sqrt(off / (2 * dd * (dd - 1)));
}

}  // namespace

TEST_CASE("neighbour loss examples") {
  const auto e = mat(2, 2, {1, 0, 0, 1});
  CHECK(neighbour_loss(e, e, 1.0).item() == doctest::Approx(std::log(1 + std::exp(-1.0))).epsilon(1e-14));
  CHECK(neighbour_loss(e, e, 1.0).item() == doctest::Approx(0.31326).epsilon(1e-5));
  const auto same = mat(2, 2, {0.6, 0.8, 0.6, 0.8});
  CHECK(neighbour_loss(same, same, 0.2).item() == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(neighbour_loss(e, e, 0.01).item() <= 1e-6);
  CHECK(neighbour_loss(e, e, 0.01).item() >= 0.0);
}

TEST_CASE("centroid loss examples") {
  const auto e = mat(2, 3, {1, 0, 0, 0, 1, 0});
  CHECK(centroid_loss(e, e, 1.0).item() == doctest::Approx(0.31326).epsilon(1e-5));
  const auto dup = mat(2, 3, {0, 0, 2, 0, 0, 2});
  CHECK(centroid_loss(dup, dup, 1.0).item() == doctest::Approx(0.69315).epsilon(1e-5));
  CHECK(centroid_loss(dup, dup, 1.0).item() == doctest::Approx(std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("uniform similarities give log N") {
  for (std::size_t n : {2u, 8u, 64u}) {
    CAPTURE(n);
    // Every anchor is orthogonal to every candidate.
    std::vector<double> a(n * 2), b(n * 2);
    for (std::size_t i = 0; i < n; ++i) {
      a[i * 2] = 1.0 + static_cast<double>(i);
      b[i * 2 + 1] = -3.0;
    }
    CHECK(std::abs(info_nce(mat(n, 2, a), mat(n, 2, b), 0.2).item() - std::log(static_cast<double>(n))) <=
          1e-9);
    // Every row identical.
    const auto same = Tensor::full({n, 5}, 0.7);
    CHECK(std::abs(neighbour_loss(same, same, 0.1).item() - std::log(static_cast<double>(n))) <= 1e-9);
    CHECK(std::abs(centroid_loss(same, same, 1.0).item() - std::log(static_cast<double>(n))) <= 1e-9);
  }
}

TEST_CASE("info_nce matches straight-line reference") {
  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 2 + trial % 9, d = 1 + trial % 7;
    const auto a = random_tensor({n, d}, rng), b = random_tensor({n, d}, rng);
    const double tau = 0.05 + 0.1 * (trial % 5);
    CHECK(info_nce(a, b, tau).item() == doctest::Approx(reference_info_nce(a, b, tau)).epsilon(1e-12));
  }
}

TEST_CASE("contrastive losses are scale invariant") {
  Rng rng(4);
  std::uniform_real_distribution<double> scale_dist(1e-3, 1e3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = random_tensor({6, 4}, rng), b = random_tensor({6, 4}, rng);
    const double s = scale_dist(rng);
    const auto sa = scale(a, s), sb = scale(b, s);
    CHECK(std::abs(neighbour_loss(a, b, 0.2).item() - neighbour_loss(sa, sb, 0.2).item()) <= 1e-9);
    CHECK(std::abs(centroid_loss(a, b, 0.2).item() - centroid_loss(sa, sb, 0.2).item()) <= 1e-9);
  }
}

TEST_CASE("contrastive loss contracts") {
  const auto one = mat(1, 2, {1, 0});
  CHECK_THROWS_AS(neighbour_loss(one, one, 0.2), ContractError);
  CHECK_THROWS_AS(centroid_loss(one, one, 0.2), ContractError);
  const auto a = mat(2, 2, {1, 0, 0, 1});
  CHECK_THROWS_AS(neighbour_loss(a, mat(2, 3, {1, 0, 0, 0, 1, 0}), 0.2), DimensionError);
  CHECK_THROWS_AS(info_nce(a, a, 0.0), ContractError);
}

TEST_CASE("neighbour loss never sends gradient to the queue side") {
  Rng rng(5);
  auto nn1 = random_tensor({4, 8}, rng);
  auto p2 = random_tensor({4, 8}, rng);
  nn1.set_requires_grad(true);
  p2.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  const auto grads = backward(neighbour_loss(nn1, p2, 0.2));
  CHECK_FALSE(grads.participated(nn1));
  CHECK(grads.participated(p2));

  Tape tape2;
  TapeScope scope2(tape2);
  const auto g2 = backward(centroid_loss(nn1, p2, 0.2));
  CHECK(g2.participated(nn1));
  CHECK(g2.participated(p2));
}

TEST_CASE("symmetric losses average the two assignments") {
  Rng rng(6);
  const auto a = random_tensor({5, 3}, rng), b = random_tensor({5, 3}, rng);
  const auto c = random_tensor({5, 3}, rng), d = random_tensor({5, 3}, rng);
  const double expect_nn = 0.5 * (reference_info_nce(a, b, 0.3) + reference_info_nce(c, d, 0.3));
  CHECK(symmetric_neighbour_loss(a, b, c, d, 0.3).item() == doctest::Approx(expect_nn).epsilon(1e-12));
  CHECK(symmetric_centroid_loss(a, b, c, d, 0.3).item() == doctest::Approx(expect_nn).epsilon(1e-12));
}

TEST_CASE("cross correlation examples") {
  const auto q = mat(3, 2, {1, 0, 0, 1, 0, 0});
  const auto cc_t = cross_correlation(q, q);
  const auto cc = cc_t.data();
  CHECK(std::vector<double>(cc.begin(), cc.end()) == std::vector<double>{1, 0, 0, 1});

  // FMA in the product leaves a rounding residual.
  CHECK(std::abs(cross_correlation(mat(2, 1, {1, 1}), mat(2, 1, {1, -1})).item()) <= 1e-15);

  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const auto z1 = random_tensor({7, 4}, rng), z2 = random_tensor({7, 4}, rng);
    const auto ab_t = cross_correlation(z1, z2), ba_t = cross_correlation(z2, z1);
    const auto ab = ab_t.data();
    const auto ba = ba_t.data();
    const auto ref = reference_cc(z1, z2);
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t j = 0; j < 4; ++j) {
        CHECK(ab[i * 4 + j] == ba[j * 4 + i]);
        CHECK(ab[i * 4 + j] == doctest::Approx(ref[i * 4 + j]).epsilon(1e-12));
        CHECK(std::abs(ab[i * 4 + j]) <= 1.0 + 1e-12);
      }
    }
  }
}

TEST_CASE("cross correlation flags zero columns") {
  std::vector<std::size_t> degenerate;
  const auto z1 = mat(3, 2, {1, 0, 2, 0, 3, 0});
  const auto z2 = mat(3, 2, {1, 1, 0, 1, 1, 0});
  const auto cc_t = cross_correlation(z1, z2, &degenerate);
  const auto cc = cc_t.data();
  CHECK(degenerate == std::vector<std::size_t>{1});
  for (double v : cc) CHECK(std::isfinite(v));
  CHECK(cc[2] == 0.0);
  CHECK(cc[3] == 0.0);
  CHECK_THROWS_AS(cross_correlation(mat(1, 2, {1, 2}), mat(1, 2, {1, 2})), ContractError);
}

TEST_CASE("redundancy loss examples") {
  const auto eye = Tensor::eye(2);
  CHECK(std::abs(redundancy_loss(eye, eye, 0.5).item()) <= 1e-12);
  const auto ones = Tensor::full({2, 2}, 1.0);
  CHECK(std::abs(redundancy_loss(ones, ones, 0.5).item() - 0.5) <= 1e-12);
  const auto zeros = Tensor::zeros({2, 2});
  CHECK(std::abs(redundancy_loss(zeros, zeros, 0.5).item() - 1.0) <= 1e-12);
  for (std::size_t d : {3u, 8u, 64u}) CHECK(std::abs(redundancy_loss(Tensor::eye(d), Tensor::eye(d), 0.5).item()) <= 1e-12);

  CHECK_THROWS_AS(redundancy_loss(Tensor::eye(1), Tensor::eye(1), 0.5), ContractError);
  CHECK_THROWS_AS(redundancy_loss(Tensor::eye(2), Tensor::eye(3), 0.5), DimensionError);
  CHECK_THROWS_AS(redundancy_loss(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}), 0.5), DimensionError);
}

TEST_CASE("redundancy loss matches reference and is non-negative") {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t d = 2 + trial % 6;
    const auto c1 = random_tensor({d, d}, rng, 0.5), c2 = random_tensor({d, d}, rng, 0.5);
    const double lambda = 0.1 * (trial % 11);
    const double got = redundancy_loss(c1, c2, lambda).item();
    CHECK(got >= 0.0);
    CHECK(got == doctest::Approx(reference_redundancy(c1.data(), c2.data(), d, lambda)).epsilon(1e-12));
  }
}

TEST_CASE("redundancy loss is zero only at the identity") {
  const std::size_t d = 4;
  CHECK(redundancy_loss(Tensor::eye(d), Tensor::eye(d), 0.5).item() == 0.0);
  for (std::size_t at = 0; at < d * d; ++at) {
    for (int which = 0; which < 2; ++which) {
      auto c1 = Tensor::eye(d), c2 = Tensor::eye(d);
      (which == 0 ? c1 : c2).mutable_data()[at] += 1e-3;
      CHECK(redundancy_loss(c1, c2, 0.5).item() > 0.0);
    }
  }
}

TEST_CASE("loss gradients match finite differences") {
  Rng rng(10);
  for (int trial = 0; trial < 5; ++trial) {
    auto a = random_tensor({4, 8}, rng), b = random_tensor({4, 8}, rng);
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    CHECK(finite_diff_check([&](const Tensor& x) { return neighbour_loss(a, x, 0.2); }, b) <= 1e-4);
    CHECK(finite_diff_check([&](const Tensor& x) { return centroid_loss(x, b, 0.2); }, a) <= 1e-4);
    CHECK(finite_diff_check([&](const Tensor& x) { return centroid_loss(a, x, 0.2); }, b) <= 1e-4);
    CHECK(finite_diff_check(
              [&](const Tensor& x) { return redundancy_loss(cross_correlation(x, b), cross_correlation(b, x), 0.5); },
              a) <= 1e-4);
  }
}

TEST_CASE("total loss examples") {
  const LossTerms ones{Tensor::scalar(1.0), Tensor::scalar(1.0), Tensor::scalar(1.0)};
  const ObjectiveParams defaults;
  CHECK(defaults.sigma == 0.5);
  CHECK(defaults.kappa == 0.5);
  CHECK(defaults.eta == 5.0);
  CHECK(defaults.lambda_red == 0.5);
  auto out = total_loss(ones, defaults);
  CHECK(out.l_total == 6.0);
  CHECK(out.total.item() == 6.0);

  const LossTerms mixed{Tensor::scalar(0.7), Tensor::scalar(1.3), Tensor::scalar(0.9)};
  ObjectiveParams red_only;
  red_only.sigma = red_only.kappa = 0.0;
  CHECK(total_loss(mixed, red_only).l_total == 5.0 * 0.9);

  ObjectiveParams none = red_only;
  none.eta = 0.0;
  CHECK(total_loss(mixed, none).l_total == 0.0);

  const auto empty = total_loss(LossTerms{}, defaults);
  CHECK(empty.l_total == 0.0);
  CHECK_FALSE(empty.has_nn);
  CHECK_FALSE(empty.has_centroid);
  CHECK_FALSE(empty.has_red);
}

TEST_CASE("total loss is the weighted sum") {
  Rng rng(12);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  for (int trial = 0; trial < 100; ++trial) {
    const double a = u(rng), b = u(rng), c = u(rng);
    ObjectiveParams p;
    p.sigma = u(rng);
    p.kappa = u(rng);
    p.eta = u(rng);
    const auto out = total_loss({Tensor::scalar(a), Tensor::scalar(b), Tensor::scalar(c)}, p);
    CHECK(std::abs(out.l_total - (p.sigma * out.l_nn + p.kappa * out.l_centroid + p.eta * out.l_red)) <= 1e-12);
    CHECK(out.l_nn == a);
    CHECK(out.l_centroid == b);
    CHECK(out.l_red == c);
    CHECK(out.red_contribution == p.eta * c);
  }
}

TEST_CASE("doubling eta doubles the redundancy contribution exactly") {
  Rng rng(13);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  for (int trial = 0; trial < 100; ++trial) {
    const LossTerms parts{Tensor::scalar(u(rng)), Tensor::scalar(u(rng)), Tensor::scalar(u(rng))};
    ObjectiveParams p;
    p.eta = u(rng);
    const auto once = total_loss(parts, p);
    p.eta *= 2.0;
    const auto twice = total_loss(parts, p);
    CHECK(twice.red_contribution == 2.0 * once.red_contribution);
  }
  // Dyadic components keep every sum exact, so the l_total gap is exact too.
  const LossTerms dyadic{Tensor::scalar(0.75), Tensor::scalar(1.25), Tensor::scalar(0.375)};
  ObjectiveParams p;
  const auto once = total_loss(dyadic, p);
  p.eta = 10.0;
  const auto twice = total_loss(dyadic, p);
  CHECK(twice.l_total - once.l_total == once.red_contribution);
  CHECK(twice.l_total - once.l_total == 5.0 * 0.375);
}

TEST_CASE("objective parameter validation") {
  ObjectiveParams p;
  CHECK_NOTHROW(p.validate());
  p.tau = 0.0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = {};
  p.eta = -1.0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = {};
  p.lambda_red = -0.1;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = {};
  p.sigma = p.kappa = p.eta = 0.0;
  CHECK_NOTHROW(p.validate());
  CHECK_FALSE(p.uses_neighbour());
  CHECK_FALSE(p.uses_centroid());
  CHECK_FALSE(p.uses_redundancy());
}
