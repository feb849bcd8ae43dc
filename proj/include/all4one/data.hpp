#pragma once

#include <cstddef>
#include <vector>

#include "all4one/config.hpp"
#include "all4one/nn.hpp"
#include "all4one/tensor.hpp"

namespace all4one {

struct Dataset {
  Tensor inputs;  // M × input_dim
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

struct DatasetSplits {
  Dataset train;
  Dataset test;
};

enum class Split { kTrain, kTest };

// Sample i has label i mod num_classes. Class prototypes depend only on the
// spec seed, so both splits share them.
Dataset synthesize_dataset(const DatasetSpec& spec, Split split = Split::kTrain);
DatasetSplits synthesize_splits(const DatasetSpec& spec);

// scale → noise → mask (→ crop when grid_side > 0), fresh draws from `rng`.
Tensor augment(const Tensor& x, const AugmentationSpec& spec, Rng& rng, std::size_t grid_side = 0);

}  // namespace all4one
