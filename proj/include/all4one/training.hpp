#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "all4one/attention.hpp"
#include "all4one/checkpoint.hpp"
#include "all4one/config.hpp"
#include "all4one/data.hpp"
#include "all4one/nn.hpp"
#include "all4one/objectives.hpp"
#include "all4one/support_set.hpp"

namespace all4one {

enum class ParamGroup { kOnline, kTransformer };

// Online group: linear warm-up from 0 to base_lr·N/256 over warmup_steps,
// then cosine decay to 0 at `steps`. Transformer group: constant
// transformer_lr.
double lr_schedule(std::size_t step, const TrainConfig& cfg, ParamGroup group = ParamGroup::kOnline);

/// Online/momentum branches, predictors and the shared transformer ψ.
struct Model {
  BranchParams branches;
  TransformerEncoderParams psi;

  static Model create(const TrainConfig& cfg, Rng& rng);

  // Everything the optimizer updates, tagged by learning-rate group.
  std::vector<std::pair<NamedTensor, ParamGroup>> trainable() const;
  ParameterList transformer_parameters() const;

  void save(Checkpoint& ckpt) const;
  void load(const Checkpoint& ckpt);

  // Frozen online embeddings (eval-mode batch norm, no tape).
  Tensor embed(const Tensor& x, bool encoder_output = false);
};

/// SGD with heavy-ball momentum: v ← μ·v + g, w ← w − lr·v.
class SgdMomentum {
 public:
  SgdMomentum(std::vector<std::pair<NamedTensor, ParamGroup>> params, double momentum);

  void step(const Gradients& grads, double online_lr, double transformer_lr);
  std::size_t size() const { return slots_.size(); }

 private:
  struct Slot {
    NamedTensor param;
    ParamGroup group;
    std::vector<double> velocity;
  };
  std::vector<Slot> slots_;
  double momentum_;
};

/// Forward result of one step's objective on a fixed pair of views.
struct ObjectiveEvaluation {
  LossBreakdown loss;
  Tensor z1_momentum;  // view 1, momentum branch (constant)
  Tensor z2_online;    // view 2, online branch
  std::optional<RetrievalResult> retrieval;  // neighbours of z1_momentum
};

// Builds the full objective on the active tape: both views through both
// branches, neighbour and centroid terms once the queue holds K entries,
// redundancy term always. Deterministic for fixed inputs.
ObjectiveEvaluation evaluate_objective(Model& model, const Tensor& view1, const Tensor& view2,
                                       const SupportSet& queue, const TrainConfig& cfg);

struct StepMetrics {
  std::size_t step = 0;  // completed steps
  double l_total = 0.0;
  double l_nn = 0.0;
  double l_centroid = 0.0;
  double l_red = 0.0;
  double nn_retrieval_top1 = 0.0;
  double lr = 0.0;
  std::size_t queue_fill = 0;
  double embedding_std = 0.0;
  bool warmup = false;  // queue too small for neighbour terms
};

inline constexpr const char* kMetricsHeader =
    "step,l_total,l_nn,l_centroid,l_red,nn_retrieval_top1,lr,queue_fill,embedding_std";
std::string metrics_csv_row(const StepMetrics& m);

// Mean over features of the per-feature std of row-normalised embeddings.
double embedding_std(const Tensor& z);
// Smallest per-feature std of row-normalised embeddings.
double min_feature_std(const Tensor& z);

class Trainer {
 public:
  explicit Trainer(TrainConfig cfg);

  // One full update on `batch`; `labels` only feed the retrieval metric.
  StepMetrics train_step(const Tensor& batch, std::span<const int> labels);
  // Draws the next batch from the training split.
  StepMetrics step();

  std::size_t steps_done() const { return step_; }
  const TrainConfig& config() const { return cfg_; }
  Model& model() { return model_; }
  SupportSet& queue() { return queue_; }
  const DatasetSplits& data() const { return data_; }

  Checkpoint checkpoint() const;

 private:
  TrainConfig cfg_;
  Rng rng_;
  DatasetSplits data_;
  Model model_;
  SupportSet queue_;
  SgdMomentum optimizer_;
  std::size_t step_ = 0;
  std::vector<std::size_t> order_;  // shuffled epoch order
  std::size_t cursor_ = 0;
};

struct TrainingOutputs {
  std::filesystem::path metrics_csv;
  std::filesystem::path checkpoint;
  std::vector<StepMetrics> metrics;
};

using StepCallback = std::function<void(const StepMetrics&)>;

// Seeded end-to-end run writing metrics.csv and checkpoint.bin into out_dir.
TrainingOutputs run_training(const TrainConfig& cfg, const std::filesystem::path& out_dir,
                             const StepCallback& on_step = {});

// Restores a model (and its config) from a checkpoint written by run_training.
struct LoadedModel {
  TrainConfig config;
  Model model;
};
LoadedModel load_model(const Checkpoint& ckpt);

}  // namespace all4one
