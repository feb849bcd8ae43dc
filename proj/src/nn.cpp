#include "all4one/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "all4one/errors.hpp"

namespace all4one {

LinearLayer LinearLayer::create(std::size_t in, std::size_t out, bool with_bias, Rng& rng) {
  if (in == 0 || out == 0) throw ContractError("LinearLayer: zero width");
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> w(out * in);
  for (auto& v : w) v = dist(rng);
  LinearLayer layer;
  layer.weight = Tensor::from({out, in}, std::move(w), true);
  if (with_bias) layer.bias = Tensor::zeros({out}, true);
  return layer;
}

Tensor linear_forward(const LinearLayer& layer, const Tensor& x) {
  return linear(x, layer.weight, layer.bias);
}

BatchNormLayer BatchNormLayer::create(std::size_t features) {
  BatchNormLayer bn;
  bn.gamma = Tensor::full({features}, 1.0, true);
  bn.beta = Tensor::zeros({features}, true);
  bn.running_mean = Tensor::zeros({features});
  bn.running_var = Tensor::full({features}, 1.0);
  return bn;
}

Tensor batchnorm_forward(BatchNormLayer& layer, const Tensor& x, Mode mode) {
  if (x.rank() != 2 || x.cols() != layer.features()) {
    throw DimensionError("batchnorm: input " + shape_to_string(x.shape()) + " vs " +
                         std::to_string(layer.features()) + " features");
  }
  const std::size_t n = x.rows(), d = x.cols();
  if (mode == Mode::kEval) {
    std::vector<double> shift(d), inv_std(d);
    const auto rm = layer.running_mean.data(), rv = layer.running_var.data();
    for (std::size_t c = 0; c < d; ++c) {
      shift[c] = -rm[c];
      inv_std[c] = 1.0 / std::sqrt(rv[c] + layer.eps);
    }
    Tensor y = mul_rowwise(add_rowwise(x, Tensor::from({d}, std::move(shift))),
                           Tensor::from({d}, std::move(inv_std)));
    return add_rowwise(mul_rowwise(y, layer.gamma), layer.beta);
  }
  if (n < 2) throw ContractError("batchnorm: train mode needs at least 2 rows");
  const double inv_n = 1.0 / static_cast<double>(n);
  Tensor mu = scale(sum_rows(x), inv_n);
  Tensor centred = add_rowwise(x, scale(mu, -1.0));
  Tensor var = scale(sum_rows(square(centred)), inv_n);
  Tensor inv_std = reciprocal(sqrt(add_scalar(var, layer.eps)));
  Tensor y = mul_rowwise(centred, inv_std);

  {
    auto rm = layer.running_mean.mutable_data();
    auto rv = layer.running_var.mutable_data();
    const auto m = mu.data(), v = var.data();
    const double unbias = static_cast<double>(n) / static_cast<double>(n - 1);
    for (std::size_t c = 0; c < d; ++c) {
      rm[c] = (1.0 - layer.momentum) * rm[c] + layer.momentum * m[c];
      rv[c] = (1.0 - layer.momentum) * rv[c] + layer.momentum * v[c] * unbias;
    }
  }
  return add_rowwise(mul_rowwise(y, layer.gamma), layer.beta);
}

Mlp Mlp::create(const MlpSpec& spec, Rng& rng) {
  if (spec.input_dim == 0 || spec.layer_widths.empty()) {
    throw ContractError("Mlp: needs an input width and at least one layer");
  }
  Mlp mlp;
  mlp.spec_ = spec;
  std::size_t in = spec.input_dim;
  for (std::size_t i = 0; i < spec.layer_widths.size(); ++i) {
    const std::size_t out = spec.layer_widths[i];
    const bool last = i + 1 == spec.layer_widths.size() && !spec.activate_output;
    mlp.linears_.push_back(LinearLayer::create(in, out, last, rng));
    if (!last) mlp.norms_.push_back(BatchNormLayer::create(out));
    in = out;
  }
  return mlp;
}

Tensor Mlp::forward(const Tensor& x, Mode mode) {
  if (x.rank() != 2 || x.cols() != spec_.input_dim) {
    throw DimensionError("mlp: input " + shape_to_string(x.shape()) + " but first layer expects " +
                         std::to_string(spec_.input_dim) + " features");
  }
  Tensor h = x;
  for (std::size_t i = 0; i < linears_.size(); ++i) {
    h = linear_forward(linears_[i], h);
    if (i < norms_.size()) h = relu(batchnorm_forward(norms_[i], h, mode));
  }
  return h;
}

void Mlp::collect_parameters(ParameterList& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < linears_.size(); ++i) {
    const std::string base = prefix + "." + std::to_string(i);
    out.push_back({base + ".weight", linears_[i].weight});
    if (linears_[i].bias.defined()) out.push_back({base + ".bias", linears_[i].bias});
    if (i < norms_.size()) {
      out.push_back({base + ".bn.gamma", norms_[i].gamma});
      out.push_back({base + ".bn.beta", norms_[i].beta});
    }
  }
}

void Mlp::collect_buffers(ParameterList& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < norms_.size(); ++i) {
    const std::string base = prefix + "." + std::to_string(i);
    out.push_back({base + ".bn.running_mean", norms_[i].running_mean});
    out.push_back({base + ".bn.running_var", norms_[i].running_var});
  }
}

Tensor mlp_forward(Mlp& mlp, const Tensor& x, Mode mode) { return mlp.forward(x, mode); }

Tensor backbone_forward(Mlp& encoder, const Tensor& x, Mode mode) { return encoder.forward(x, mode); }

Tensor Branch::forward(const Tensor& x, Mode mode) {
  return projector.forward(encoder.forward(x, mode), mode);
}

void Branch::collect_parameters(ParameterList& out, const std::string& prefix) const {
  encoder.collect_parameters(out, prefix + ".encoder");
  projector.collect_parameters(out, prefix + ".projector");
}

void Branch::collect_buffers(ParameterList& out, const std::string& prefix) const {
  encoder.collect_buffers(out, prefix + ".encoder");
  projector.collect_buffers(out, prefix + ".projector");
}

namespace {

Mlp copy_without_grad(Mlp& source) {
  Mlp copy = source;
  for (auto& l : copy.linears()) {
    l.weight = l.weight.clone().set_requires_grad(false);
    if (l.bias.defined()) l.bias = l.bias.clone().set_requires_grad(false);
  }
  for (auto& bn : copy.norms()) {
    bn.gamma = bn.gamma.clone().set_requires_grad(false);
    bn.beta = bn.beta.clone().set_requires_grad(false);
    bn.running_mean = bn.running_mean.clone();
    bn.running_var = bn.running_var.clone();
  }
  return copy;
}

}  // namespace

BranchParams BranchParams::create(const BranchDims& dims, Rng& rng) {
  if (dims.encoder_widths.empty() || dims.projector_widths.empty() ||
      dims.predictor_widths.empty()) {
    throw ContractError("BranchParams: empty layer widths");
  }
  const std::size_t proj = dims.projector_widths.back();
  if (dims.predictor_widths.back() != proj) {
    throw ContractError("BranchParams: predictor output must equal projector output");
  }
  BranchParams p;
  p.online.encoder = Mlp::create({dims.input_dim, dims.encoder_widths, true}, rng);
  p.online.projector = Mlp::create({dims.encoder_widths.back(), dims.projector_widths}, rng);
  p.predictor_nn = Mlp::create({proj, dims.predictor_widths}, rng);
  p.predictor_c = Mlp::create({proj, dims.predictor_widths}, rng);
  p.momentum.encoder = copy_without_grad(p.online.encoder);
  p.momentum.projector = copy_without_grad(p.online.projector);
  return p;
}

ParameterList BranchParams::online_parameters() const {
  ParameterList out;
  online.collect_parameters(out, "online");
  return out;
}

ParameterList BranchParams::predictor_parameters() const {
  ParameterList out;
  predictor_nn.collect_parameters(out, "predictor_nn");
  predictor_c.collect_parameters(out, "predictor_c");
  return out;
}

ParameterList BranchParams::momentum_parameters() const {
  ParameterList out;
  momentum.collect_parameters(out, "momentum");
  return out;
}

ParameterList BranchParams::buffers() const {
  ParameterList out;
  online.collect_buffers(out, "online");
  predictor_nn.collect_buffers(out, "predictor_nn");
  predictor_c.collect_buffers(out, "predictor_c");
  momentum.collect_buffers(out, "momentum");
  return out;
}

double ema_coefficient(const EmaParams& ema, std::size_t step, std::size_t total) {
  if (ema.m < 0.0 || ema.m > 1.0) throw ContractError("ema: coefficient outside [0,1]");
  if (ema.schedule == EmaSchedule::kFixed || total == 0) return ema.m;
  const double progress = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return 1.0 - (1.0 - ema.m) * (std::cos(std::numbers::pi * progress) + 1.0) / 2.0;
}

void ema_update(const ParameterList& online, const ParameterList& momentum, double m) {
  if (online.size() != momentum.size()) {
    throw DimensionError("ema_update: " + std::to_string(online.size()) + " online vs " +
                         std::to_string(momentum.size()) + " momentum tensors");
  }
  if (m < 0.0 || m > 1.0) throw ContractError("ema_update: coefficient outside [0,1]");
  for (std::size_t i = 0; i < online.size(); ++i) {
    const Tensor& theta = online[i].tensor;
    Tensor xi = momentum[i].tensor;
    if (theta.shape() != xi.shape()) {
      throw DimensionError("ema_update: " + online[i].name + " " + shape_to_string(theta.shape()) +
                           " vs " + momentum[i].name + " " + shape_to_string(xi.shape()));
    }
    const auto src = theta.data();
    auto dst = xi.mutable_data();
    if (m == 1.0) continue;
    if (m == 0.0) {
      std::copy(src.begin(), src.end(), dst.begin());
      continue;
    }
    for (std::size_t j = 0; j < dst.size(); ++j) {
      const double lo = std::min(dst[j], src[j]);
      const double hi = std::max(dst[j], src[j]);
      // Clamp so rounding never leaves the segment between old and target.
      dst[j] = std::clamp(m * dst[j] + (1.0 - m) * src[j], lo, hi);
    }
  }
}

}  // namespace all4one
