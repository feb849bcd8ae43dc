#include "all4one/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "all4one/errors.hpp"

namespace all4one {

double lr_schedule(std::size_t step, const TrainConfig& cfg, ParamGroup group) {
  if (group == ParamGroup::kTransformer) return cfg.transformer_lr;
  if (step > cfg.steps) {
    throw ContractError("lr_schedule: step " + std::to_string(step) + " beyond " +
                        std::to_string(cfg.steps) + " total steps");
  }
  const double peak = cfg.base_lr * static_cast<double>(cfg.batch_size) / 256.0;
  if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps) {
    return peak * (static_cast<double>(step) / static_cast<double>(cfg.warmup_steps));
  }
  const double span = static_cast<double>(cfg.steps - cfg.warmup_steps);
  const double progress = span > 0.0 ? static_cast<double>(step - cfg.warmup_steps) / span : 1.0;
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------
// Model

Model Model::create(const TrainConfig& cfg, Rng& rng) {
  Model m;
  m.branches = BranchParams::create(cfg.branch_dims(), rng);
  m.psi = TransformerEncoderParams::create(cfg.model.projection_dim(), cfg.model.transformer_layers,
                                           cfg.model.transformer_heads, rng);
  return m;
}

std::vector<std::pair<NamedTensor, ParamGroup>> Model::trainable() const {
  std::vector<std::pair<NamedTensor, ParamGroup>> out;
  for (auto& p : branches.online_parameters()) out.emplace_back(p, ParamGroup::kOnline);
  for (auto& p : branches.predictor_parameters()) out.emplace_back(p, ParamGroup::kOnline);
  for (auto& p : transformer_parameters()) out.emplace_back(p, ParamGroup::kTransformer);
  return out;
}

ParameterList Model::transformer_parameters() const {
  ParameterList out;
  psi.collect_parameters(out, "psi");
  return out;
}

void Model::save(Checkpoint& ckpt) const {
  ckpt.add(branches.online_parameters());
  ckpt.add(branches.predictor_parameters());
  ckpt.add(branches.momentum_parameters());
  ckpt.add(branches.buffers());
  ckpt.add(transformer_parameters());
}

void Model::load(const Checkpoint& ckpt) {
  ckpt.restore(branches.online_parameters());
  ckpt.restore(branches.predictor_parameters());
  ckpt.restore(branches.momentum_parameters());
  ckpt.restore(branches.buffers());
  ckpt.restore(transformer_parameters());
}

Tensor Model::embed(const Tensor& x, bool encoder_output) {
  NoGradScope no_grad;
  Tensor h = branches.online.encoder.forward(x, Mode::kEval);
  return encoder_output ? h : branches.online.projector.forward(h, Mode::kEval);
}

// ---------------------------------------------------------------------------
// SGD

SgdMomentum::SgdMomentum(std::vector<std::pair<NamedTensor, ParamGroup>> params, double momentum)
    : momentum_(momentum) {
  for (auto& [p, g] : params) slots_.push_back({p, g, std::vector<double>(p.tensor.numel(), 0.0)});
}

void SgdMomentum::step(const Gradients& grads, double online_lr, double transformer_lr) {
  for (auto& slot : slots_) {
    const double lr = slot.group == ParamGroup::kTransformer ? transformer_lr : online_lr;
    const Tensor g = grads.of(slot.param.tensor);
    const auto gv = g.data();
    auto w = slot.param.tensor.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      slot.velocity[i] = momentum_ * slot.velocity[i] + gv[i];
      w[i] -= lr * slot.velocity[i];
    }
  }
}

// ---------------------------------------------------------------------------
// objective

ObjectiveEvaluation evaluate_objective(Model& model, const Tensor& view1, const Tensor& view2,
                                       const SupportSet& queue, const TrainConfig& cfg) {
  auto& b = model.branches;
  const auto& obj = cfg.objective;
  const std::size_t k = cfg.k_neighbours;

  ObjectiveEvaluation out;
  Tensor z2_momentum;
  {
    NoGradScope no_grad;
    out.z1_momentum = b.momentum.forward(view1, Mode::kTrain);
    z2_momentum = b.momentum.forward(view2, Mode::kTrain);
  }
  Tensor z1_online = b.online.forward(view1, Mode::kTrain);
  out.z2_online = b.online.forward(view2, Mode::kTrain);
  const Tensor& z2_online = out.z2_online;

  LossTerms terms;
  const bool ready = queue.count() >= k;
  // Retrieval runs whenever the queue is ready so the metric exists for
  // every objective mix.
  if (ready) out.retrieval = queue.knn_query(out.z1_momentum, k);
  if (ready && (obj.uses_neighbour() || obj.uses_centroid())) {
    std::optional<RetrievalResult> swapped;
    if (obj.symmetrize) swapped = queue.knn_query(z2_momentum, k);

    if (obj.uses_neighbour()) {
      Tensor p2 = b.predictor_nn.forward(z2_online, Mode::kTrain);
      Tensor l = neighbour_loss(out.retrieval->first_neighbours(), p2, obj.tau);
      if (obj.symmetrize) {
        Tensor p1 = b.predictor_nn.forward(z1_online, Mode::kTrain);
        l = scale(add(l, neighbour_loss(swapped->first_neighbours(), p1, obj.tau)), 0.5);
      }
      terms.neighbour = l;
    }
    if (obj.uses_centroid()) {
      const auto online2 = queue.knn_query(z2_online, k);
      Tensor pc2 = b.predictor_c.forward(z2_online, Mode::kTrain);
      Tensor c1 = centroids_from_sequences(model.psi, out.retrieval->sequences).c;
      Tensor c2 = centroids_from_sequences(model.psi, shift_sequences(online2.sequences, pc2)).c;
      Tensor l = centroid_loss(c1, c2, obj.tau);
      if (obj.symmetrize) {
        const auto online1 = queue.knn_query(z1_online, k);
        Tensor pc1 = b.predictor_c.forward(z1_online, Mode::kTrain);
        Tensor c1s = centroids_from_sequences(model.psi, swapped->sequences).c;
        Tensor c2s = centroids_from_sequences(model.psi, shift_sequences(online1.sequences, pc1)).c;
        l = scale(add(l, centroid_loss(c1s, c2s, obj.tau)), 0.5);
      }
      terms.centroid = l;
    }
  }
  // CC¹ pairs (momentum view 1, online view 2); CC² swaps the views.
  Tensor cc1 = cross_correlation(out.z1_momentum, z2_online);
  Tensor cc2 = cross_correlation(z2_momentum, z1_online);
  terms.redundancy = redundancy_loss(cc1, cc2, obj.lambda_red);

  out.loss = total_loss(terms, obj);
  return out;
}

// ---------------------------------------------------------------------------
// metrics

namespace {

std::vector<double> feature_stds(const Tensor& z) {
  NoGradScope no_grad;
  const Tensor u = l2_normalize(z.detach(), 1);
  const std::size_t n = u.rows(), d = u.cols();
  const auto v = u.data();
  std::vector<double> out(d);
  for (std::size_t c = 0; c < d; ++c) {
    double mu = 0.0;
    for (std::size_t r = 0; r < n; ++r) mu += v[r * d + c];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t r = 0; r < n; ++r) var += (v[r * d + c] - mu) * (v[r * d + c] - mu);
    out[c] = std::sqrt(var / static_cast<double>(n));
  }
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

double embedding_std(const Tensor& z) {
  const auto s = feature_stds(z);
  return std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
}

double min_feature_std(const Tensor& z) {
  const auto s = feature_stds(z);
  return *std::min_element(s.begin(), s.end());
}

std::string metrics_csv_row(const StepMetrics& m) {
  std::ostringstream os;
  os << m.step << ',' << fmt(m.l_total) << ',' << fmt(m.l_nn) << ',' << fmt(m.l_centroid) << ','
     << fmt(m.l_red) << ',' << fmt(m.nn_retrieval_top1) << ',' << fmt(m.lr) << ',' << m.queue_fill
     << ',' << fmt(m.embedding_std);
  return os.str();
}

// ---------------------------------------------------------------------------
// Trainer

namespace {

TrainConfig validated(TrainConfig cfg) {
  cfg.validate();
  return cfg;
}

Model make_model(const TrainConfig& cfg, Rng& rng) { return Model::create(cfg, rng); }

}  // namespace

Trainer::Trainer(TrainConfig cfg)
    : cfg_(validated(std::move(cfg))),
      rng_(cfg_.seed),
      data_(synthesize_splits(cfg_.dataset)),
      model_(make_model(cfg_, rng_)),
      queue_(cfg_.queue_capacity, cfg_.model.projection_dim()),
      optimizer_(model_.trainable(), cfg_.sgd_momentum) {}

StepMetrics Trainer::train_step(const Tensor& batch, std::span<const int> labels) {
  if (batch.rank() != 2 || batch.rows() < 2) {
    throw ContractError("train_step: batch must be N×d with N >= 2, got " + shape_to_string(batch.shape()));
  }
  const std::size_t grid = cfg_.dataset.grid_side();
  const Tensor view1 = augment(batch, cfg_.augmentation, rng_, grid);
  const Tensor view2 = augment(batch, cfg_.augmentation, rng_, grid);

  StepMetrics m;
  Tape tape;
  TapeScope scope(tape);
  auto eval = evaluate_objective(model_, view1, view2, queue_, cfg_);
  const auto& loss = eval.loss;
  if (!std::isfinite(loss.l_total) || !std::isfinite(loss.l_nn) ||
      !std::isfinite(loss.l_centroid) || !std::isfinite(loss.l_red)) {
    std::ostringstream os;
    os << "non-finite loss at step " << step_ << ": l_total=" << loss.l_total << " l_nn=" << loss.l_nn
       << " l_centroid=" << loss.l_centroid << " l_red=" << loss.l_red;
    throw NumericError(os.str());
  }

  Gradients grads;
  if (loss.total.on_tape()) grads = backward(loss.total);
  for (const auto& p : model_.branches.momentum_parameters()) {
    if (grads.participated(p.tensor) || p.tensor.requires_grad()) {
      throw ContractError("train_step: momentum parameter " + p.name + " entered the gradient path");
    }
  }

  const double lr = lr_schedule(step_, cfg_);
  optimizer_.step(grads, lr, lr_schedule(step_, cfg_, ParamGroup::kTransformer));
  ema_update(model_.branches.online_parameters(), model_.branches.momentum_parameters(),
             ema_coefficient(cfg_.ema, step_, cfg_.steps));
  queue_.enqueue_batch(eval.z1_momentum, labels);

  ++step_;
  m.step = step_;
  m.l_total = loss.l_total;
  m.l_nn = loss.l_nn;
  m.l_centroid = loss.l_centroid;
  m.l_red = loss.l_red;
  m.warmup = !eval.retrieval.has_value();
  if (eval.retrieval && !labels.empty()) {
    m.nn_retrieval_top1 = nn_retrieval_accuracy(*eval.retrieval, labels);
  }
  m.lr = lr;
  m.queue_fill = queue_.count();
  m.embedding_std = embedding_std(eval.z2_online);
  return m;
}

StepMetrics Trainer::step() {
  const std::size_t m = data_.train.size();
  const std::size_t n = std::min(cfg_.batch_size, m);
  if (order_.empty() || cursor_ + n > order_.size()) {
    order_.resize(m);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
  }
  std::span<const std::size_t> idx(order_.data() + cursor_, n);
  cursor_ += n;
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = data_.train.labels[idx[i]];
  Tensor batch;
  {
    NoGradScope no_grad;
    batch = gather_rows(data_.train.inputs, idx);
  }
  return train_step(batch, labels);
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ckpt;
  ckpt.metadata = config_to_json(cfg_);
  model_.save(ckpt);
  queue_.save(ckpt);
  ckpt.add("trainer.step", Tensor::from({1}, {static_cast<double>(step_)}));
  return ckpt;
}

TrainingOutputs run_training(const TrainConfig& cfg, const std::filesystem::path& out_dir,
                             const StepCallback& on_step) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + out_dir.string() + ": " + ec.message());
  TrainingOutputs out;
  out.metrics_csv = out_dir / "metrics.csv";
  out.checkpoint = out_dir / "checkpoint.bin";

  Trainer trainer(cfg);
  std::ofstream csv(out.metrics_csv, std::ios::trunc);
  if (!csv) throw IoError("cannot open metrics file for writing: " + out.metrics_csv.string());
  csv << kMetricsHeader << '\n';
  for (std::size_t s = 0; s < trainer.config().steps; ++s) {
    auto m = trainer.step();
    csv << metrics_csv_row(m) << '\n';
    if (on_step) on_step(m);
    out.metrics.push_back(m);
  }
  csv.flush();
  if (!csv) throw IoError("failed writing metrics file: " + out.metrics_csv.string());
  write_checkpoint(out.checkpoint, trainer.checkpoint());
  return out;
}

LoadedModel load_model(const Checkpoint& ckpt) {
  LoadedModel out{parse_config(ckpt.metadata), {}};
  Rng rng(out.config.seed);
  out.model = Model::create(out.config, rng);
  out.model.load(ckpt);
  return out;
}

}  // namespace all4one
