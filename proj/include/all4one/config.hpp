#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "all4one/nn.hpp"
#include "all4one/objectives.hpp"

namespace all4one {

enum class DatasetMode { kGaussianMixture, kTinyGrid };

struct DatasetSpec {
  DatasetMode mode = DatasetMode::kGaussianMixture;
  std::size_t num_classes = 8;
  std::size_t samples = 4096;       // training split
  std::size_t test_samples = 1024;  // held-out split
  std::size_t input_dim = 32;       // perfect square in tiny-grid mode
  double cluster_std = 1.0;
  double radius = 4.0;  // class means lie on a sphere of this radius
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t grid_side() const;  // 0 outside tiny-grid mode
};

struct AugmentationSpec {
  double gaussian_noise_std = 0.0;
  double coordinate_mask_prob = 0.0;
  // Per-sample scale factor drawn from U(1 − r, 1 + r).
  double random_scale_range = 0.0;
  // Tiny-grid only: crop side drawn between crop_fraction·side and side,
  // resized back to full grid. 0 disables.
  double crop_fraction = 0.0;

  void validate() const;
};

struct ModelSpec {
  std::vector<std::size_t> encoder_widths{128, 128};
  std::vector<std::size_t> projector_widths{256, 256, 64};
  std::vector<std::size_t> predictor_widths{512, 64};
  std::size_t transformer_layers = 3;
  std::size_t transformer_heads = 8;

  std::size_t projection_dim() const { return projector_widths.back(); }
};

struct TrainConfig {
  DatasetSpec dataset;
  ModelSpec model;
  AugmentationSpec augmentation{0.3, 0.1, 0.2, 0.0};
  ObjectiveParams objective;
  std::size_t batch_size = 128;
  std::size_t steps = 2000;
  std::size_t k_neighbours = 5;
  std::size_t queue_capacity = 4096;
  double base_lr = 1.0;
  std::size_t warmup_steps = 200;
  double transformer_lr = 0.1;
  EmaParams ema;
  double sgd_momentum = 0.9;
  std::uint64_t seed = 0;

  void validate() const;
  BranchDims branch_dims() const;
};

// JSON with exactly the keys of the structs above (nested objects for
// "dataset", "model", "augmentation", "objective", "ema"). Missing keys keep
// their defaults; unknown keys raise ConfigError.
TrainConfig parse_config(std::string_view json_text);
TrainConfig load_config(const std::filesystem::path& path);
std::string config_to_json(const TrainConfig& cfg);

DatasetSpec parse_dataset_spec(std::string_view json_text);
DatasetSpec load_dataset_spec(const std::filesystem::path& path);
std::string dataset_spec_to_json(const DatasetSpec& spec);

}  // namespace all4one
