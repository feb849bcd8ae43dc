#include "all4one/attention.hpp"

#include <cmath>

namespace all4one {

LayerNormParams LayerNormParams::create(std::size_t dim) {
  return {Tensor::full({dim}, 1.0, true), Tensor::zeros({dim}, true)};
}

Tensor layer_norm(const Tensor& x, const LayerNormParams& params, double eps) {
  if (x.rank() != 2 || x.cols() != params.gamma.numel()) {
    throw DimensionError("layer_norm: input " + shape_to_string(x.shape()) + " vs width " +
                         std::to_string(params.gamma.numel()));
  }
  const double inv_d = 1.0 / static_cast<double>(x.cols());
  Tensor mu = scale(sum_cols(x), inv_d);
  Tensor centred = add_colwise(x, scale(mu, -1.0));
  Tensor var = scale(sum_cols(square(centred)), inv_d);
  Tensor y = mul_colwise(centred, reciprocal(sqrt(add_scalar(var, eps))));
  return add_rowwise(mul_rowwise(y, params.gamma), params.beta);
}

TransformerEncoderParams TransformerEncoderParams::create(std::size_t model_dim,
                                                          std::size_t num_layers,
                                                          std::size_t num_heads, Rng& rng) {
  if (num_heads == 0 || model_dim % num_heads != 0) {
    throw ContractError("transformer: model width " + std::to_string(model_dim) +
                        " not divisible by " + std::to_string(num_heads) + " heads");
  }
  TransformerEncoderParams psi;
  psi.model_dim = model_dim;
  psi.num_heads = num_heads;
  for (std::size_t l = 0; l < num_layers; ++l) {
    EncoderLayerParams layer;
    layer.attention.query = LinearLayer::create(model_dim, model_dim, true, rng);
    layer.attention.key = LinearLayer::create(model_dim, model_dim, false, rng);
    layer.attention.value = LinearLayer::create(model_dim, model_dim, true, rng);
    layer.attention.output = LinearLayer::create(model_dim, model_dim, true, rng);
    layer.attention.heads = num_heads;
    layer.norm1 = LayerNormParams::create(model_dim);
    layer.ff_in = LinearLayer::create(model_dim, 4 * model_dim, true, rng);
    layer.ff_out = LinearLayer::create(4 * model_dim, model_dim, true, rng);
    layer.norm2 = LayerNormParams::create(model_dim);
    psi.layers.push_back(std::move(layer));
  }
  return psi;
}

void TransformerEncoderParams::collect_parameters(ParameterList& out,
                                                  const std::string& prefix) const {
  auto add_linear = [&out](const std::string& name, const LinearLayer& l) {
    out.push_back({name + ".weight", l.weight});
    if (l.bias.defined()) out.push_back({name + ".bias", l.bias});
  };
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string base = prefix + "." + std::to_string(i);
    add_linear(base + ".attn.query", l.attention.query);
    add_linear(base + ".attn.key", l.attention.key);
    add_linear(base + ".attn.value", l.attention.value);
    add_linear(base + ".attn.output", l.attention.output);
    out.push_back({base + ".norm1.gamma", l.norm1.gamma});
    out.push_back({base + ".norm1.beta", l.norm1.beta});
    add_linear(base + ".ff_in", l.ff_in);
    add_linear(base + ".ff_out", l.ff_out);
    out.push_back({base + ".norm2.gamma", l.norm2.gamma});
    out.push_back({base + ".norm2.beta", l.norm2.beta});
  }
}

Tensor sinusoidal_pe(std::size_t seq_len, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0) throw ContractError("sinusoidal_pe: dimension must be even");
  if (seq_len == 0) throw ContractError("sinusoidal_pe: empty sequence");
  std::vector<double> pe(seq_len * dim);
  for (std::size_t pos = 0; pos < seq_len; ++pos) {
    for (std::size_t i = 0; i < dim / 2; ++i) {
      const double angle = static_cast<double>(pos) /
                           std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(dim));
      pe[pos * dim + 2 * i] = std::sin(angle);
      pe[pos * dim + 2 * i + 1] = std::cos(angle);
    }
  }
  return Tensor::from({seq_len, dim}, std::move(pe));
}

namespace {

void check_layout(const Tensor& x, std::size_t seq_len, std::size_t dim) {
  if (x.rank() != 2 || x.cols() != dim || seq_len == 0 || x.rows() % seq_len != 0) {
    throw DimensionError("transformer: input " + shape_to_string(x.shape()) +
                         " is not a stack of length-" + std::to_string(seq_len) + " sequences of width " +
                         std::to_string(dim));
  }
}

std::vector<std::size_t> first_rows(std::size_t sequences, std::size_t seq_len) {
  std::vector<std::size_t> rows(sequences);
  for (std::size_t s = 0; s < sequences; ++s) rows[s] = s * seq_len;
  return rows;
}

Tensor feed_forward(const EncoderLayerParams& p, const Tensor& h) {
  return linear_forward(p.ff_out, relu(linear_forward(p.ff_in, h)));
}

}  // namespace

Tensor mhsa_forward(const AttentionParams& params, const Tensor& x, std::size_t seq_len) {
  check_layout(x, seq_len, params.query.in_dim());
  Tensor q = linear_forward(params.query, x);
  Tensor k = linear_forward(params.key, x);
  Tensor v = linear_forward(params.value, x);
  return linear_forward(params.output, attention(q, k, v, seq_len, seq_len, params.heads));
}

Tensor encoder_layer_forward(const EncoderLayerParams& params, const Tensor& x,
                             std::size_t seq_len) {
  Tensor h = layer_norm(add(x, mhsa_forward(params.attention, x, seq_len)), params.norm1);
  return layer_norm(add(h, feed_forward(params, h)), params.norm2);
}

Tensor encoder_layer_first_token(const EncoderLayerParams& params, const Tensor& x,
                                 std::size_t seq_len) {
  const auto& attn = params.attention;
  check_layout(x, seq_len, attn.query.in_dim());
  const auto rows = first_rows(x.rows() / seq_len, seq_len);
  Tensor x0 = gather_rows(x, rows);
  Tensor q = linear_forward(attn.query, x0);
  Tensor k = linear_forward(attn.key, x);
  Tensor v = linear_forward(attn.value, x);
  Tensor a = linear_forward(attn.output, attention(q, k, v, 1, seq_len, attn.heads));
  Tensor h = layer_norm(add(x0, a), params.norm1);
  return layer_norm(add(h, feed_forward(params, h)), params.norm2);
}

Tensor transformer_forward(const TransformerEncoderParams& psi, const Tensor& x,
                           std::size_t seq_len) {
  Tensor h = x;
  for (const auto& layer : psi.layers) h = encoder_layer_forward(layer, h, seq_len);
  return h;
}

std::vector<std::vector<double>> attention_maps(const TransformerEncoderParams& psi,
                                                const Tensor& x, std::size_t seq_len) {
  NoGradScope no_grad;
  std::vector<std::vector<double>> maps;
  Tensor h = x;
  for (const auto& layer : psi.layers) {
    check_layout(h, seq_len, psi.model_dim);
    Tensor q = linear_forward(layer.attention.query, h);
    Tensor k = linear_forward(layer.attention.key, h);
    maps.push_back(attention_probabilities(q, k, seq_len, seq_len, layer.attention.heads));
    h = encoder_layer_forward(layer, h, seq_len);
  }
  return maps;
}

Tensor NeighbourSequences::assemble() const {
  if (batch == 0 || length == 0 || elements.size() != batch * length) {
    throw ContractError("NeighbourSequences: inconsistent batch/length/elements");
  }
  const std::size_t offset = neighbours.rows();
  Tensor table = neighbours.detach();
  if (injections.defined()) {
    if (injections.cols() != neighbours.cols()) {
      throw DimensionError("NeighbourSequences: injections " + shape_to_string(injections.shape()) +
                           " vs neighbours " + shape_to_string(neighbours.shape()));
    }
    table = concat_rows({table, injections});
  }
  std::vector<std::size_t> rows(elements.size());
  for (std::size_t i = 0; i < elements.size(); ++i) {
    const auto& e = elements[i];
    if (e.origin == Origin::kPredictorInjection) {
      if (!injections.defined()) throw ContractError("NeighbourSequences: injection without source");
      rows[i] = offset + e.row;
    } else {
      rows[i] = e.row;
    }
  }
  return gather_rows(table, rows);
}

NeighbourSequences shift_sequences(const NeighbourSequences& seqs, const Tensor& p) {
  if (p.rank() != 2 || p.rows() != seqs.batch || p.cols() != seqs.dim()) {
    throw DimensionError("shift: predictor batch " + shape_to_string(p.shape()) + " vs " +
                         std::to_string(seqs.batch) + " sequences of width " +
                         std::to_string(seqs.dim()));
  }
  if (seqs.injections.defined()) throw ContractError("shift: sequences already carry injections");
  NeighbourSequences out;
  out.batch = seqs.batch;
  out.length = seqs.length;
  out.neighbours = seqs.neighbours;
  out.injections = p;
  out.elements.reserve(seqs.elements.size());
  for (std::size_t i = 0; i < seqs.batch; ++i) {
    auto shifted = shift(seqs.sequence(i), SequenceElement{Origin::kPredictorInjection, i});
    out.elements.insert(out.elements.end(), shifted.begin(), shifted.end());
  }
  return out;
}

CentroidBatch centroids_from_sequences(const TransformerEncoderParams& psi,
                                       const NeighbourSequences& seqs) {
  if (psi.layers.empty()) throw ContractError("centroids: transformer has no layers");
  if (seqs.dim() != psi.model_dim) {
    throw DimensionError("centroids: sequence width " + std::to_string(seqs.dim()) +
                         " vs transformer width " + std::to_string(psi.model_dim));
  }
  const std::size_t k = seqs.length;
  Tensor pe = sinusoidal_pe(k, psi.model_dim);
  std::vector<double> tiled;
  tiled.reserve(seqs.batch * k * psi.model_dim);
  for (std::size_t s = 0; s < seqs.batch; ++s) tiled.insert(tiled.end(), pe.data().begin(), pe.data().end());
  Tensor h = add(seqs.assemble(), Tensor::from({seqs.batch * k, psi.model_dim}, std::move(tiled)));
  for (std::size_t l = 0; l + 1 < psi.layers.size(); ++l) h = encoder_layer_forward(psi.layers[l], h, k);
  return {encoder_layer_first_token(psi.layers.back(), h, k)};
}

}  // namespace all4one
