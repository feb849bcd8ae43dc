#include "all4one/evaluation.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

#include "all4one/data.hpp"
#include "all4one/errors.hpp"
#include "all4one/support_set.hpp"
#include "all4one/training.hpp"
#include "json.hpp"

namespace all4one {

namespace {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Matrix to_matrix(const Tensor& t) {
  const auto v = t.data();
  return Eigen::Map<const Matrix>(v.data(), static_cast<Eigen::Index>(t.rows()),
                                  static_cast<Eigen::Index>(t.cols()));
}

void check_embeddings(const Tensor& train, std::span<const int> train_labels, const Tensor& test,
                      const char* where) {
  if (train.rank() != 2 || test.rank() != 2 || train.cols() != test.cols()) {
    throw DimensionError(std::string(where) + ": embedding shapes " + shape_to_string(train.shape()) +
                         " and " + shape_to_string(test.shape()) + " do not match");
  }
  if (train_labels.size() != train.rows()) {
    throw DimensionError(std::string(where) + ": " + std::to_string(train_labels.size()) +
                         " labels for " + std::to_string(train.rows()) + " training rows");
  }
}

double accuracy(std::span<const int> predicted, std::span<const int> truth, const char* where) {
  if (predicted.size() != truth.size()) {
    throw DimensionError(std::string(where) + ": " + std::to_string(truth.size()) + " labels for " +
                         std::to_string(predicted.size()) + " test rows");
  }
  if (truth.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += predicted[i] == truth[i];
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

void normalize_rows(Matrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double n = m.row(r).norm();
    if (n >= kNormEpsilon) m.row(r) /= n;
  }
}

}  // namespace

std::vector<int> knn_predict(const Tensor& train, std::span<const int> train_labels,
                             const Tensor& test, std::size_t k) {
  check_embeddings(train, train_labels, test, "knn_probe");
  if (k == 0 || k > train.rows()) {
    throw ContractError("knn_probe: k=" + std::to_string(k) + " outside [1, " +
                        std::to_string(train.rows()) + "]");
  }
  Matrix a = to_matrix(train), b = to_matrix(test);
  normalize_rows(a);
  normalize_rows(b);
  const Matrix sim = b * a.transpose();

  const std::size_t m = train.rows();
  std::vector<int> out(test.rows());
  std::vector<std::size_t> order(m);
  for (std::size_t q = 0; q < test.rows(); ++q) {
    const double* s = sim.data() + q * m;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [s](std::size_t i, std::size_t j) { return s[i] > s[j] || (s[i] == s[j] && i < j); });
    std::vector<std::pair<int, std::size_t>> votes;  // label, count in rank order of first appearance
    for (std::size_t j = 0; j < k; ++j) {
      const int label = train_labels[order[j]];
      auto it = std::find_if(votes.begin(), votes.end(), [label](auto& v) { return v.first == label; });
      if (it == votes.end()) {
        votes.emplace_back(label, 1);
      } else {
        ++it->second;
      }
    }
    // First maximum wins: that class has the nearest member among tied ones.
    auto best = votes.begin();
    for (auto it = votes.begin(); it != votes.end(); ++it) {
      if (it->second > best->second) best = it;
    }
    out[q] = best->first;
  }
  return out;
}

double knn_probe(const Tensor& train, std::span<const int> train_labels, const Tensor& test,
                 std::span<const int> test_labels, std::size_t k) {
  const auto predicted = knn_predict(train, train_labels, test, k);
  return accuracy(predicted, test_labels, "knn_probe");
}

double linear_probe(const Tensor& train, std::span<const int> train_labels, const Tensor& test,
                    std::span<const int> test_labels, const LinearProbeOptions& opts) {
  check_embeddings(train, train_labels, test, "linear_probe");
  const std::set<int> distinct(train_labels.begin(), train_labels.end());
  if (distinct.size() < 2) throw ContractError("linear_probe: training labels cover fewer than 2 classes");
  if (*distinct.begin() < 0) throw ContractError("linear_probe: negative class label");
  const auto classes = static_cast<Eigen::Index>(*distinct.rbegin() + 1);

  Matrix x = to_matrix(train), xt = to_matrix(test);
  const Eigen::RowVectorXd mu = x.colwise().mean();
  x.rowwise() -= mu;
  xt.rowwise() -= mu;
  const double rms = std::sqrt(x.squaredNorm() / static_cast<double>(x.rows()));
  if (rms > kNormEpsilon) {
    x /= rms;
    xt /= rms;
  }

  const auto n = x.rows();
  Matrix y = Matrix::Zero(n, classes);
  for (Eigen::Index i = 0; i < n; ++i) y(i, train_labels[static_cast<std::size_t>(i)]) = 1.0;

  Matrix w = Matrix::Zero(classes, x.cols());
  Eigen::RowVectorXd bias = Eigen::RowVectorXd::Zero(classes);
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    Matrix p = x * w.transpose();
    p.rowwise() += bias;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double mx = p.row(i).maxCoeff();
      p.row(i) = (p.row(i).array() - mx).exp();
      p.row(i) /= p.row(i).sum();
    }
    const Matrix g = (p - y) / static_cast<double>(n);
    w -= opts.lr * (g.transpose() * x);
    bias -= opts.lr * g.colwise().sum();
    if (!w.allFinite()) throw NumericError("linear_probe: weights diverged");
  }

  Matrix logits = xt * w.transpose();
  logits.rowwise() += bias;
  std::vector<int> predicted(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index arg = 0;
    logits.row(i).maxCoeff(&arg);
    predicted[static_cast<std::size_t>(i)] = static_cast<int>(arg);
  }
  return accuracy(predicted, test_labels, "linear_probe");
}

std::string ProbeReport::to_json() const {
  nlohmann::json j = {{"knn_top1", knn_top1},
                      {"linear_top1", linear_top1},
                      {"nn_retrieval_top1", nn_retrieval_top1},
                      {"encoder_knn_top1", encoder_knn_top1},
                      {"encoder_linear_top1", encoder_linear_top1},
                      {"train_size", train_size},
                      {"test_size", test_size},
                      {"k", k},
                      {"seed", seed}};
  return j.dump(2);
}

namespace {

DatasetSpec resolve_dataset(const TrainConfig& cfg, const std::optional<DatasetSpec>& dataset) {
  DatasetSpec spec = dataset.value_or(cfg.dataset);
  if (spec.input_dim != cfg.dataset.input_dim) {
    throw DimensionError("dataset input_dim " + std::to_string(spec.input_dim) +
                         " does not match the checkpoint's " + std::to_string(cfg.dataset.input_dim));
  }
  return spec;
}

}  // namespace

ProbeReport evaluate_checkpoint(const Checkpoint& ckpt, const std::optional<DatasetSpec>& dataset,
                                const EvalOptions& opts) {
  auto loaded = load_model(ckpt);
  const DatasetSpec spec = resolve_dataset(loaded.config, dataset);
  const auto splits = synthesize_splits(spec);
  const auto& train = splits.train;
  const auto& test = splits.test;

  ProbeReport r;
  r.train_size = train.size();
  r.test_size = test.size();
  r.k = opts.k;
  r.seed = spec.seed;

  const Tensor z_train = loaded.model.embed(train.inputs);
  const Tensor z_test = loaded.model.embed(test.inputs);
  r.knn_top1 = knn_probe(z_train, train.labels, z_test, test.labels, opts.k);
  r.linear_top1 = linear_probe(z_train, train.labels, z_test, test.labels, opts.linear);

  const bool use_snapshot = !dataset && ckpt.contains("queue.meta");
  std::optional<SupportSet> support;
  if (use_snapshot) {
    support.emplace(SupportSet::load(ckpt));
    if (support->count() == 0) support.reset();
  }
  if (!support) {
    support.emplace(z_train.rows(), z_train.cols());
    support->enqueue_batch(z_train, train.labels);
  }
  r.nn_retrieval_top1 = nn_retrieval_accuracy(support->knn_query(z_test, 1), test.labels);

  if (opts.encoder_probes) {
    const Tensor h_train = loaded.model.embed(train.inputs, true);
    const Tensor h_test = loaded.model.embed(test.inputs, true);
    r.encoder_knn_top1 = knn_probe(h_train, train.labels, h_test, test.labels, opts.k);
    r.encoder_linear_top1 = linear_probe(h_train, train.labels, h_test, test.labels, opts.linear);
  }
  return r;
}

std::string export_embeddings(const Checkpoint& ckpt, const std::optional<DatasetSpec>& dataset,
                              ExportSplit split, bool encoder_output) {
  auto loaded = load_model(ckpt);
  const DatasetSpec spec = resolve_dataset(loaded.config, dataset);
  const Dataset ds = synthesize_dataset(spec, split == ExportSplit::kTrain ? Split::kTrain : Split::kTest);
  const Tensor z = loaded.model.embed(ds.inputs, encoder_output);

  std::string out = "id,label";
  for (std::size_t c = 0; c < z.cols(); ++c) out += ",z" + std::to_string(c);
  out += '\n';
  char buf[32];
  for (std::size_t i = 0; i < z.rows(); ++i) {
    out += std::to_string(i) + ',' + std::to_string(ds.labels[i]);
    for (std::size_t c = 0; c < z.cols(); ++c) {
      std::snprintf(buf, sizeof(buf), ",%.17g", z.at(i, c));
      out += buf;
    }
    out += '\n';
  }
  return out;
}

void export_embeddings(const Checkpoint& ckpt, const std::filesystem::path& out,
                       const std::optional<DatasetSpec>& dataset, ExportSplit split, bool encoder_output) {
  const std::string csv = export_embeddings(ckpt, dataset, split, encoder_output);
  std::ofstream os(out, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open export file for writing: " + out.string());
  os << csv;
  if (!os) throw IoError("failed writing export file: " + out.string());
}

}  // namespace all4one
