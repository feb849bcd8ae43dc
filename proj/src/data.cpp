#include "all4one/data.hpp"

#include <algorithm>
#include <cmath>

#include "all4one/errors.hpp"

namespace all4one {

namespace {

constexpr std::uint64_t kPrototypeStream = 0x9e3779b97f4a7c15ull;
constexpr std::uint64_t kTrainStream = 0xbf58476d1ce4e5b9ull;
constexpr std::uint64_t kTestStream = 0x94d049bb133111ebull;

std::vector<double> gaussian_prototypes(const DatasetSpec& spec, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> means(spec.num_classes * spec.input_dim);
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    double* m = means.data() + c * spec.input_dim;
    double sq = 0.0;
    for (std::size_t d = 0; d < spec.input_dim; ++d) {
      m[d] = normal(rng);
      sq += m[d] * m[d];
    }
    const double s = spec.radius / std::sqrt(sq);
    for (std::size_t d = 0; d < spec.input_dim; ++d) m[d] *= s;
  }
  return means;
}

// A few soft blobs per class on the grid.
std::vector<double> grid_prototypes(const DatasetSpec& spec, Rng& rng) {
  const std::size_t side = spec.grid_side();
  std::uniform_real_distribution<double> pos(0.0, static_cast<double>(side - 1));
  std::vector<double> out(spec.num_classes * spec.input_dim, 0.0);
  constexpr int kBlobs = 3;
  constexpr double kWidth = 1.2;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    double* t = out.data() + c * spec.input_dim;
    for (int b = 0; b < kBlobs; ++b) {
      const double cy = pos(rng), cx = pos(rng);
      for (std::size_t y = 0; y < side; ++y) {
        for (std::size_t x = 0; x < side; ++x) {
          const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
          t[y * side + x] += std::exp(-(dy * dy + dx * dx) / (2.0 * kWidth * kWidth));
        }
      }
    }
    double sq = 0.0;
    for (std::size_t d = 0; d < spec.input_dim; ++d) sq += t[d] * t[d];
    const double s = spec.radius / std::sqrt(sq);
    for (std::size_t d = 0; d < spec.input_dim; ++d) t[d] *= s;
  }
  return out;
}

}  // namespace

Dataset synthesize_dataset(const DatasetSpec& spec, Split split) {
  spec.validate();
  Rng proto_rng(spec.seed ^ kPrototypeStream);
  const auto prototypes = spec.mode == DatasetMode::kGaussianMixture ? gaussian_prototypes(spec, proto_rng)
                                                                     : grid_prototypes(spec, proto_rng);
  const std::size_t m = split == Split::kTrain ? spec.samples : spec.test_samples;
  Rng rng(spec.seed ^ (split == Split::kTrain ? kTrainStream : kTestStream));
  std::normal_distribution<double> normal(0.0, 1.0);
  Dataset ds;
  ds.labels.resize(m);
  std::vector<double> x(m * spec.input_dim);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t c = i % spec.num_classes;
    ds.labels[i] = static_cast<int>(c);
    const double* proto = prototypes.data() + c * spec.input_dim;
    for (std::size_t d = 0; d < spec.input_dim; ++d) {
      x[i * spec.input_dim + d] = proto[d] + spec.cluster_std * normal(rng);
    }
  }
  ds.inputs = Tensor::from({m, spec.input_dim}, std::move(x));
  return ds;
}

DatasetSplits synthesize_splits(const DatasetSpec& spec) {
  return {synthesize_dataset(spec, Split::kTrain), synthesize_dataset(spec, Split::kTest)};
}

namespace {

void crop_and_resize(double* img, std::size_t side, double min_fraction, Rng& rng) {
  const auto min_side = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(min_fraction * static_cast<double>(side))));
  std::uniform_int_distribution<std::size_t> side_dist(min_side, side);
  const std::size_t crop = side_dist(rng);
  std::uniform_int_distribution<std::size_t> off_dist(0, side - crop);
  const std::size_t oy = off_dist(rng), ox = off_dist(rng);
  std::vector<double> src(img, img + side * side);
  for (std::size_t y = 0; y < side; ++y) {
    const std::size_t sy = oy + y * crop / side;
    for (std::size_t x = 0; x < side; ++x) {
      const std::size_t sx = ox + x * crop / side;
      img[y * side + x] = src[sy * side + sx];
    }
  }
}

}  // namespace

Tensor augment(const Tensor& x, const AugmentationSpec& spec, Rng& rng, std::size_t grid_side) {
  spec.validate();
  if (x.rank() != 2) throw DimensionError("augment: expected N×d input, got " + shape_to_string(x.shape()));
  for (double v : x.data()) {
    if (!std::isfinite(v)) throw NumericError("augment: non-finite input");
  }
  if (grid_side > 0 && grid_side * grid_side != x.cols()) {
    throw DimensionError("augment: grid side " + std::to_string(grid_side) + " does not tile " +
                         std::to_string(x.cols()) + " features");
  }
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<double> out(x.data().begin(), x.data().end());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t r = 0; r < n; ++r) {
    double* row = out.data() + r * d;
    if (spec.random_scale_range > 0.0) {
      const double f = 1.0 + spec.random_scale_range * (2.0 * unit(rng) - 1.0);
      for (std::size_t c = 0; c < d; ++c) row[c] *= f;
    }
    if (spec.gaussian_noise_std > 0.0) {
      for (std::size_t c = 0; c < d; ++c) row[c] += spec.gaussian_noise_std * normal(rng);
    }
    if (spec.coordinate_mask_prob > 0.0) {
      for (std::size_t c = 0; c < d; ++c) {
        if (unit(rng) < spec.coordinate_mask_prob) row[c] = 0.0;
      }
    }
    if (grid_side > 0 && spec.crop_fraction > 0.0 && spec.crop_fraction < 1.0) {
      crop_and_resize(row, grid_side, spec.crop_fraction, rng);
    }
  }
  return Tensor::from(x.shape(), std::move(out));
}

}  // namespace all4one
