#include "all4one/support_set.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "all4one/errors.hpp"

namespace all4one {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void normalise_into(const double* src, double* dst, std::size_t dim) {
  double sq = 0.0;
  for (std::size_t i = 0; i < dim; ++i) sq += src[i] * src[i];
  const double norm = std::sqrt(sq);
  for (std::size_t i = 0; i < dim; ++i) dst[i] = norm < kNormEpsilon ? src[i] : src[i] / norm;
}

}  // namespace

Tensor RetrievalResult::first_neighbours() const {
  std::vector<std::size_t> rows(queries);
  for (std::size_t q = 0; q < queries; ++q) rows[q] = q * k;
  NoGradScope no_grad;
  return gather_rows(sequences.neighbours, rows);
}

SupportSet::SupportSet(std::size_t capacity, std::size_t dim)
    : capacity_(capacity), dim_(dim), vectors_(capacity * dim), labels_(capacity), steps_(capacity) {
  if (capacity == 0 || dim == 0) throw ContractError("SupportSet: zero capacity or width");
}

void SupportSet::enqueue_batch(const Tensor& z, std::span<const int> labels) {
  if (z.rank() != 2 || z.cols() != dim_) {
    throw DimensionError("enqueue_batch: batch " + shape_to_string(z.shape()) + " vs queue width " +
                         std::to_string(dim_));
  }
  if (!labels.empty() && labels.size() != z.rows()) {
    throw DimensionError("enqueue_batch: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(z.rows()) + " rows");
  }
  const auto values = z.data();
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError("enqueue_batch: non-finite vector");
  }
  for (std::size_t r = 0; r < z.rows(); ++r) {
    normalise_into(values.data() + r * dim_, vectors_.data() + head_ * dim_, dim_);
    labels_[head_] = labels.empty() ? std::nullopt : std::optional<int>(labels[r]);
    steps_[head_] = next_step_++;
    head_ = (head_ + 1) % capacity_;
    count_ = std::min(count_ + 1, capacity_);
  }
}

std::vector<std::size_t> SupportSet::live_slots() const {
  std::vector<std::size_t> slots(count_);
  const std::size_t oldest = (head_ + capacity_ - count_) % capacity_;
  for (std::size_t i = 0; i < count_; ++i) slots[i] = (oldest + i) % capacity_;
  return slots;
}

std::span<const double> SupportSet::vector(std::size_t slot) const {
  return std::span<const double>(vectors_).subspan(slot * dim_, dim_);
}

std::optional<int> SupportSet::label(std::size_t slot) const { return labels_.at(slot); }

std::uint64_t SupportSet::step(std::size_t slot) const { return steps_.at(slot); }

RetrievalResult SupportSet::knn_query(const Tensor& queries, std::size_t k) const {
  if (queries.rank() != 2 || queries.cols() != dim_) {
    throw DimensionError("knn_query: queries " + shape_to_string(queries.shape()) +
                         " vs queue width " + std::to_string(dim_));
  }
  if (k == 0) throw ContractError("knn_query: k must be positive");
  if (count_ < k) {
    throw InsufficientQueueError("knn_query: queue holds " + std::to_string(count_) +
                                 " entries, " + std::to_string(k) + " requested");
  }
  const std::size_t n = queries.rows();
  const auto qv = queries.data();
  for (double v : qv) {
    if (!std::isfinite(v)) throw NumericError("knn_query: non-finite query");
  }
  const auto slots = live_slots();
  RowMatrix q(n, dim_);
  for (std::size_t r = 0; r < n; ++r) normalise_into(qv.data() + r * dim_, q.data() + r * dim_, dim_);
  RowMatrix bank(count_, dim_);
  for (std::size_t i = 0; i < count_; ++i) {
    std::copy_n(vectors_.data() + slots[i] * dim_, dim_, bank.data() + i * dim_);
  }
  RowMatrix sims(n, count_);
  sims.noalias() = q * bank.transpose();

  RetrievalResult res;
  res.queries = n;
  res.k = k;
  res.indices.resize(n * k);
  res.steps.resize(n * k);
  res.similarities.resize(n * k);
  res.labels.resize(n * k);
  std::vector<double> neighbours(n * k * dim_);
  std::vector<std::size_t> order(count_);
  for (std::size_t r = 0; r < n; ++r) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    const double* row = sims.data() + r * count_;
    // Positions in `slots` are already in insertion order.
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [row](std::size_t a, std::size_t b) {
                        if (row[a] != row[b]) return row[a] > row[b];
                        return a < b;
                      });
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t slot = slots[order[j]];
      res.indices[r * k + j] = slot;
      res.steps[r * k + j] = steps_[slot];
      res.similarities[r * k + j] = row[order[j]];
      res.labels[r * k + j] = labels_[slot];
      std::copy_n(vectors_.data() + slot * dim_, dim_, neighbours.data() + (r * k + j) * dim_);
    }
  }
  auto& seq = res.sequences;
  seq.batch = n;
  seq.length = k;
  seq.neighbours = Tensor::from({n * k, dim_}, std::move(neighbours));
  seq.elements.resize(n * k);
  for (std::size_t i = 0; i < n * k; ++i) seq.elements[i] = {Origin::kQueueNeighbour, i};
  return res;
}

void SupportSet::write_csv(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open queue dump for writing: " + path.string());
  os << "step,label";
  for (std::size_t d = 0; d < dim_; ++d) os << ",v" << d;
  os << '\n';
  char buf[32];
  for (std::size_t slot : live_slots()) {
    os << steps_[slot] << ',';
    if (labels_[slot]) os << *labels_[slot];
    for (double v : vector(slot)) {
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      os << ',' << buf;
    }
    os << '\n';
  }
  if (!os) throw IoError("failed writing queue dump: " + path.string());
}

void SupportSet::save(Checkpoint& ckpt, const std::string& prefix) const {
  ckpt.add(prefix + ".meta", Tensor::from({4}, {static_cast<double>(capacity_), static_cast<double>(dim_),
                                                static_cast<double>(count_),
                                                static_cast<double>(next_step_)}));
  if (count_ == 0) return;
  std::vector<double> vecs, labels, steps;
  for (std::size_t slot : live_slots()) {
    const auto v = vector(slot);
    vecs.insert(vecs.end(), v.begin(), v.end());
    labels.push_back(labels_[slot] ? static_cast<double>(*labels_[slot]) : std::nan(""));
    steps.push_back(static_cast<double>(steps_[slot]));
  }
  ckpt.add(prefix + ".vectors", Tensor::from({count_, dim_}, std::move(vecs)));
  ckpt.add(prefix + ".labels", Tensor::from({count_}, std::move(labels)));
  ckpt.add(prefix + ".steps", Tensor::from({count_}, std::move(steps)));
}

SupportSet SupportSet::load(const Checkpoint& ckpt, const std::string& prefix) {
  const auto& meta = ckpt.find(prefix + ".meta").values;
  if (meta.size() != 4) throw IoError("queue snapshot: malformed meta array");
  SupportSet q(static_cast<std::size_t>(meta[0]), static_cast<std::size_t>(meta[1]));
  const auto count = static_cast<std::size_t>(meta[2]);
  if (count > 0) {
    const auto& vecs = ckpt.find(prefix + ".vectors").values;
    const auto& labels = ckpt.find(prefix + ".labels").values;
    const auto& steps = ckpt.find(prefix + ".steps").values;
    if (vecs.size() != count * q.dim_ || labels.size() != count || steps.size() != count) {
      throw IoError("queue snapshot: array sizes disagree with meta");
    }
    for (std::size_t i = 0; i < count; ++i) {
      std::copy_n(vecs.data() + i * q.dim_, q.dim_, q.vectors_.data() + i * q.dim_);
      q.labels_[i] = std::isnan(labels[i]) ? std::nullopt : std::optional<int>(static_cast<int>(labels[i]));
      q.steps_[i] = static_cast<std::uint64_t>(steps[i]);
    }
  }
  q.count_ = count;
  q.head_ = count % q.capacity_;
  q.next_step_ = static_cast<std::uint64_t>(meta[3]);
  return q;
}

double nn_retrieval_accuracy(const RetrievalResult& result, std::span<const int> query_labels,
                             RetrievalMode mode) {
  if (query_labels.size() != result.queries) {
    throw DimensionError("nn_retrieval_accuracy: " + std::to_string(query_labels.size()) +
                         " labels for " + std::to_string(result.queries) + " queries");
  }
  if (result.queries == 0) throw ContractError("nn_retrieval_accuracy: no queries");
  std::size_t hits = 0;
  for (std::size_t q = 0; q < result.queries; ++q) {
    const std::size_t depth = mode == RetrievalMode::kTop1 ? 1 : result.k;
    bool hit = false;
    for (std::size_t j = 0; j < depth; ++j) {
      const auto& l = result.labels[q * result.k + j];
      if (!l) throw MetricUnavailableError("nn_retrieval_accuracy: retrieved entry has no label");
      hit = hit || *l == query_labels[q];
    }
    hits += hit ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(result.queries);
}

}  // namespace all4one
