#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "all4one/attention.hpp"
#include "all4one/checkpoint.hpp"
#include "all4one/tensor.hpp"

namespace all4one {

/// Top-k neighbours of a batch of queries, best first.
struct RetrievalResult {
  std::size_t queries = 0;
  std::size_t k = 0;
  std::vector<std::size_t> indices;      // queries × k live slots
  std::vector<std::uint64_t> steps;      // insertion step of each hit
  std::vector<double> similarities;      // queries × k, non-increasing per row
  std::vector<std::optional<int>> labels;  // queries × k
  // Retrieved vectors: neighbours row q·k + j is hit j of query q.
  NeighbourSequences sequences;

  // Rank-1 neighbour of every query (queries × D, constant).
  Tensor first_neighbours() const;
};

/// Fixed-capacity FIFO of unit-norm vectors with optional class labels.
///
/// Each inserted vector gets a strictly increasing insertion step. Once full,
/// an insertion overwrites the oldest entry.
class SupportSet {
 public:
  SupportSet(std::size_t capacity, std::size_t dim);

  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  std::size_t count() const { return count_; }
  std::uint64_t next_step() const { return next_step_; }

  // Rows are L2-normalised and copied; the queue never holds tape history.
  void enqueue_batch(const Tensor& z, std::span<const int> labels = {});

  // Exact top-k by cosine similarity, ties to the earlier insertion.
  RetrievalResult knn_query(const Tensor& queries, std::size_t k) const;

  // Live slots from oldest to newest.
  std::vector<std::size_t> live_slots() const;
  std::span<const double> vector(std::size_t slot) const;
  std::optional<int> label(std::size_t slot) const;
  std::uint64_t step(std::size_t slot) const;

  // step,label,v0..v{D-1}; oldest first; empty label when unlabelled.
  void write_csv(const std::filesystem::path& path) const;

  void save(Checkpoint& ckpt, const std::string& prefix = "queue") const;
  static SupportSet load(const Checkpoint& ckpt, const std::string& prefix = "queue");

 private:
  std::size_t capacity_;
  std::size_t dim_;
  std::size_t count_ = 0;
  std::size_t head_ = 0;  // next slot to write
  std::uint64_t next_step_ = 0;
  std::vector<double> vectors_;
  std::vector<std::optional<int>> labels_;
  std::vector<std::uint64_t> steps_;
};

enum class RetrievalMode { kTop1, kAnyK };

// Fraction of queries whose rank-1 (kTop1) or any (kAnyK) neighbour has the
// query's label.
double nn_retrieval_accuracy(const RetrievalResult& result, std::span<const int> query_labels,
                             RetrievalMode mode = RetrievalMode::kTop1);

}  // namespace all4one
