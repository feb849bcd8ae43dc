#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "all4one/checkpoint.hpp"
#include "all4one/config.hpp"
#include "all4one/tensor.hpp"

namespace all4one {

// Cosine-similarity k-nearest-neighbour vote. Neighbours are ranked by
// similarity, then by lower training index; a tied vote goes to the tied
// class whose member ranks nearest.
std::vector<int> knn_predict(const Tensor& train, std::span<const int> train_labels,
                             const Tensor& test, std::size_t k);
double knn_probe(const Tensor& train, std::span<const int> train_labels, const Tensor& test,
                 std::span<const int> test_labels, std::size_t k = 5);

struct LinearProbeOptions {
  std::size_t epochs = 500;
  double lr = 1.0;
};

// Affine softmax classifier trained from zero by full-batch gradient descent.
// Embeddings are centred on the training mean and divided by the training
// RMS row norm first, which keeps the probe rotation-equivariant.
double linear_probe(const Tensor& train, std::span<const int> train_labels, const Tensor& test,
                    std::span<const int> test_labels, const LinearProbeOptions& opts = {});

struct ProbeReport {
  double knn_top1 = 0.0;
  double linear_top1 = 0.0;
  double nn_retrieval_top1 = 0.0;
  double encoder_knn_top1 = 0.0;
  double encoder_linear_top1 = 0.0;
  std::size_t train_size = 0;
  std::size_t test_size = 0;
  std::size_t k = 5;
  std::uint64_t seed = 0;

  std::string to_json() const;
};

struct EvalOptions {
  std::size_t k = 5;
  LinearProbeOptions linear;
  bool encoder_probes = true;
};

// Probes the frozen online branch of `ckpt` on `dataset` (default: the
// checkpoint's own dataset). Projector-output probes fill knn_top1 and
// linear_top1; encoder-output probes fill the encoder_* fields.
// nn_retrieval_top1 queries the checkpoint's support-set snapshot with the
// test embeddings (falls back to the training embeddings when it is empty).
ProbeReport evaluate_checkpoint(const Checkpoint& ckpt, const std::optional<DatasetSpec>& dataset = {},
                                const EvalOptions& opts = {});

enum class ExportSplit { kTrain, kTest };

// id,label,z0..z{D-1} with one row per sample in dataset order.
std::string export_embeddings(const Checkpoint& ckpt, const std::optional<DatasetSpec>& dataset = {},
                              ExportSplit split = ExportSplit::kTrain, bool encoder_output = false);
void export_embeddings(const Checkpoint& ckpt, const std::filesystem::path& out,
                       const std::optional<DatasetSpec>& dataset = {},
                       ExportSplit split = ExportSplit::kTrain, bool encoder_output = false);

}  // namespace all4one
