#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "all4one/tensor.hpp"

namespace all4one {

using Rng = std::mt19937_64;

enum class Mode { kTrain, kEval };

struct NamedTensor {
  std::string name;
  Tensor tensor;
};
using ParameterList = std::vector<NamedTensor>;

/// Fully connected layer computing x·Wᵀ + b.
///
/// Weights are drawn from U(−1/√in, 1/√in). The bias is optional: layers
/// feeding a batch norm carry none, since the normalisation cancels it.
struct LinearLayer {
  Tensor weight;  // out × in
  Tensor bias;    // out, or undefined

  static LinearLayer create(std::size_t in, std::size_t out, bool with_bias, Rng& rng);

  std::size_t in_dim() const { return weight.cols(); }
  std::size_t out_dim() const { return weight.rows(); }
};

Tensor linear_forward(const LinearLayer& layer, const Tensor& x);

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Per-feature batch normalisation with learnable affine (γ, β).
///
/// Train mode standardises with the biased batch variance and folds the
/// unbiased one into the running statistics; eval mode uses the running
/// statistics only.
struct BatchNormLayer {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double momentum = kBatchNormMomentum;
  double eps = kBatchNormEpsilon;

  static BatchNormLayer create(std::size_t features);
  std::size_t features() const { return gamma.numel(); }
};

Tensor batchnorm_forward(BatchNormLayer& layer, const Tensor& x, Mode mode);

struct MlpSpec {
  std::size_t input_dim = 0;
  std::vector<std::size_t> layer_widths;
  bool activate_output = false;  // give the last layer BN → ReLU as well
};

// Linear → BN → ReLU for every hidden layer, bare Linear at the end unless
// activate_output is set.
class Mlp {
 public:
  Mlp() = default;
  static Mlp create(const MlpSpec& spec, Rng& rng);

  const MlpSpec& spec() const { return spec_; }
  std::size_t input_dim() const { return spec_.input_dim; }
  std::size_t output_dim() const { return spec_.layer_widths.back(); }

  Tensor forward(const Tensor& x, Mode mode);

  std::vector<LinearLayer>& linears() { return linears_; }
  std::vector<BatchNormLayer>& norms() { return norms_; }

  void collect_parameters(ParameterList& out, const std::string& prefix) const;
  // Batch-norm running statistics.
  void collect_buffers(ParameterList& out, const std::string& prefix) const;

 private:
  MlpSpec spec_;
  std::vector<LinearLayer> linears_;
  std::vector<BatchNormLayer> norms_;
};

Tensor mlp_forward(Mlp& mlp, const Tensor& x, Mode mode);

// The encoder backbone is an MLP standing in for a convolutional network;
// like one, its features leave through BN → ReLU.
Tensor backbone_forward(Mlp& encoder, const Tensor& x, Mode mode = Mode::kTrain);

// Encoder followed by projector.
struct Branch {
  Mlp encoder;
  Mlp projector;

  Tensor forward(const Tensor& x, Mode mode);
  void collect_parameters(ParameterList& out, const std::string& prefix) const;
  void collect_buffers(ParameterList& out, const std::string& prefix) const;
};

struct BranchDims {
  std::size_t input_dim = 32;
  std::vector<std::size_t> encoder_widths{128, 128};
  std::vector<std::size_t> projector_widths{256, 256, 64};
  std::vector<std::size_t> predictor_widths{512, 64};
};

/// Online branch with its two predictors, plus the momentum branch that
/// tracks it by EMA. Momentum tensors never require gradients.
struct BranchParams {
  Branch online;
  Mlp predictor_nn;
  Mlp predictor_c;
  Branch momentum;

  static BranchParams create(const BranchDims& dims, Rng& rng);

  std::size_t projection_dim() const { return online.projector.output_dim(); }

  ParameterList online_parameters() const;  // encoder + projector
  ParameterList predictor_parameters() const;
  ParameterList momentum_parameters() const;
  ParameterList buffers() const;
};

enum class EmaSchedule { kFixed, kCosineToOne };

struct EmaParams {
  double m = 0.996;
  EmaSchedule schedule = EmaSchedule::kFixed;
};

// Coefficient for `step` of `total`. The cosine schedule rises from m to 1.
double ema_coefficient(const EmaParams& ema, std::size_t step, std::size_t total);

// ξ ← m·ξ + (1−m)·θ for each pair, outside any tape. Names and shapes must
// match pairwise.
void ema_update(const ParameterList& online, const ParameterList& momentum, double m);

}  // namespace all4one
