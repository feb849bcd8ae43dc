#pragma once

// Transformer encoder ψ that turns a sequence of neighbour representations
// into a single centroid, plus the Shift operation that injects the online
// predictor output at the front of a neighbour sequence.

#include <cstddef>
#include <span>
#include <vector>

#include "all4one/errors.hpp"
#include "all4one/nn.hpp"
#include "all4one/tensor.hpp"

namespace all4one {

inline constexpr double kLayerNormEpsilon = 1e-5;

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;

  static LayerNormParams create(std::size_t dim);
};

// Row-wise layer normalisation of an N×D matrix.
Tensor layer_norm(const Tensor& x, const LayerNormParams& params, double eps = kLayerNormEpsilon);

struct AttentionParams {
  LinearLayer query;
  LinearLayer key;  // no bias: softmax is invariant to it
  LinearLayer value;
  LinearLayer output;
  std::size_t heads = 1;
};

struct EncoderLayerParams {
  AttentionParams attention;
  LayerNormParams norm1;
  LinearLayer ff_in;   // D -> 4D
  LinearLayer ff_out;  // 4D -> D
  LayerNormParams norm2;
};

struct TransformerEncoderParams {
  std::size_t model_dim = 0;
  std::size_t num_heads = 8;
  std::vector<EncoderLayerParams> layers;

  static TransformerEncoderParams create(std::size_t model_dim, std::size_t num_layers,
                                         std::size_t num_heads, Rng& rng);
  void collect_parameters(ParameterList& out, const std::string& prefix) const;
};

// PE(pos, 2i) = sin(pos / 10000^(2i/dim)), PE(pos, 2i+1) = cos(same).
Tensor sinusoidal_pe(std::size_t seq_len, std::size_t dim);

// x holds S sequences of `seq_len` rows each, stacked: (S·seq_len)×D.
Tensor mhsa_forward(const AttentionParams& params, const Tensor& x, std::size_t seq_len);

// Post-norm layer: LN(x + MHSA(x)), then LN(h + FF(h)).
Tensor encoder_layer_forward(const EncoderLayerParams& params, const Tensor& x, std::size_t seq_len);

// Same layer evaluated only at position 0 of every sequence: S×D. Keys and
// values still span the whole sequence.
Tensor encoder_layer_first_token(const EncoderLayerParams& params, const Tensor& x,
                                 std::size_t seq_len);

// All positions through every layer.
Tensor transformer_forward(const TransformerEncoderParams& psi, const Tensor& x,
                           std::size_t seq_len);

// Attention weights of every layer, each laid out [S][head][seq_len][seq_len].
std::vector<std::vector<double>> attention_maps(const TransformerEncoderParams& psi,
                                                const Tensor& x, std::size_t seq_len);

enum class Origin { kQueueNeighbour, kPredictorInjection };

struct SequenceElement {
  Origin origin = Origin::kQueueNeighbour;
  std::size_t row = 0;  // into NeighbourSequences::neighbours or ::injections

  friend bool operator==(const SequenceElement&, const SequenceElement&) = default;
};

// Drops the last element, puts `injected` in front; the rest keep order.
template <typename T>
std::vector<T> shift(std::span<const T> seq, T injected) {
  if (seq.empty()) throw ContractError("shift: empty sequence");
  std::vector<T> out;
  out.reserve(seq.size());
  out.push_back(std::move(injected));
  out.insert(out.end(), seq.begin(), seq.end() - 1);
  return out;
}

/// Batch of N ordered neighbour sequences of common length K.
///
/// Elements reference rows of `neighbours` (retrieved from the support set,
/// always treated as constants) or of `injections` (predictor outputs that
/// keep their gradient).
struct NeighbourSequences {
  std::size_t batch = 0;
  std::size_t length = 0;
  Tensor neighbours;
  Tensor injections;
  std::vector<SequenceElement> elements;  // batch × length, row-major

  std::size_t dim() const { return neighbours.cols(); }
  std::span<const SequenceElement> sequence(std::size_t i) const {
    return std::span<const SequenceElement>(elements).subspan(i * length, length);
  }
  // (batch·length)×D stacked sequence rows.
  Tensor assemble() const;
};

// Shift of every sequence i with injections row i (p: N×D).
NeighbourSequences shift_sequences(const NeighbourSequences& seqs, const Tensor& p);

struct CentroidBatch {
  Tensor c;  // N×D
};

// Adds positional encoding, runs ψ and keeps each sequence's position-0 output.
CentroidBatch centroids_from_sequences(const TransformerEncoderParams& psi,
                                       const NeighbourSequences& seqs);

}  // namespace all4one
