#include "all4one/gradcheck_suite.hpp"

#include <algorithm>
#include <functional>
#include <map>

#include "all4one/attention.hpp"
#include "all4one/errors.hpp"
#include "all4one/nn.hpp"
#include "all4one/objectives.hpp"
#include "all4one/support_set.hpp"
#include "all4one/training.hpp"

namespace all4one {

namespace {

constexpr std::size_t kN = 4;
constexpr std::size_t kD = 8;
constexpr std::size_t kK = 3;
constexpr double kTau = 0.2;

Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
  std::normal_distribution<double> normal(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = normal(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

void randomize(Tensor& t, Rng& rng, double stddev) {
  std::normal_distribution<double> normal(0.0, stddev);
  for (double& x : t.mutable_data()) x += normal(rng);
}

// Random linear readout, so no output entry gets a structurally zero weight.
Tensor readout(const Tensor& y, const Tensor& weights) { return sum(mul(y, weights)); }

class Collector {
 public:
  void check(const std::string& module, const ScalarFn& f, const Tensor& x) {
    auto& r = slot(module);
    r.max_rel_error = std::max(r.max_rel_error, finite_diff_check(f, x, kGradcheckStep));
    r.entries += x.numel();
  }
  // Differentiates a closure with respect to a tensor it captures.
  void check_captured(const std::string& module, const std::function<Tensor()>& f, const Tensor& x) {
    check(module, [&f](const Tensor&) { return f(); }, x);
  }
  std::vector<GradcheckResult> results() const { return results_; }

 private:
  GradcheckResult& slot(const std::string& module) {
    for (auto& r : results_) {
      if (r.module == module) return r;
    }
    results_.push_back({module, 0.0, 0});
    return results_.back();
  }
  std::vector<GradcheckResult> results_;
};

void check_neighbour(Collector& c, Rng& rng) {
  const Tensor nn1 = randn({kN, kD}, rng), nn2 = randn({kN, kD}, rng);
  const Tensor p1 = randn({kN, kD}, rng), p2 = randn({kN, kD}, rng);
  c.check("neighbour", [&](const Tensor& p) { return neighbour_loss(nn1, p, kTau); }, p2);
  c.check_captured("neighbour", [&] { return symmetric_neighbour_loss(nn1, p2, nn2, p1, kTau); }, p1);
}

void check_centroid(Collector& c, Rng& rng) {
  const Tensor c1 = randn({kN, kD}, rng), c2 = randn({kN, kD}, rng);
  c.check("centroid", [&](const Tensor& x) { return centroid_loss(x, c2, kTau); }, c1);
  c.check("centroid", [&](const Tensor& x) { return centroid_loss(c1, x, kTau); }, c2);
}

void check_redundancy(Collector& c, Rng& rng) {
  const Tensor z1 = randn({kN, kD}, rng), z2 = randn({kN, kD}, rng);
  const Tensor z3 = randn({kN, kD}, rng), z4 = randn({kN, kD}, rng);
  const auto f = [&] {
    return redundancy_loss(cross_correlation(z1, z2), cross_correlation(z3, z4), 0.5);
  };
  for (const Tensor* z : {&z1, &z2, &z3, &z4}) c.check_captured("redundancy", f, *z);
  const Tensor cc1 = randn({kD, kD}, rng, 0.5), cc2 = randn({kD, kD}, rng, 0.5);
  c.check("redundancy", [&](const Tensor& x) { return redundancy_loss(x, cc2, 0.5); }, cc1);
}

void check_total(Collector& c, Rng& rng) {
  const Tensor nn1 = randn({kN, kD}, rng), p2 = randn({kN, kD}, rng);
  const Tensor c1 = randn({kN, kD}, rng), c2 = randn({kN, kD}, rng);
  const Tensor z1 = randn({kN, kD}, rng), z2 = randn({kN, kD}, rng);
  const ObjectiveParams params;
  const auto f = [&] {
    LossTerms t;
    t.neighbour = neighbour_loss(nn1, p2, params.tau);
    t.centroid = centroid_loss(c1, c2, params.tau);
    t.redundancy = redundancy_loss(cross_correlation(z1, z2), cross_correlation(z2, z1), params.lambda_red);
    return total_loss(t, params).total;
  };
  for (const Tensor* x : {&p2, &c1, &c2, &z1, &z2}) c.check_captured("total", f, *x);
}

TransformerEncoderParams small_psi(std::size_t layers, Rng& rng) {
  auto psi = TransformerEncoderParams::create(kD, layers, 2, rng);
  // Move layer norms away from the identity so their parameters matter.
  ParameterList params;
  psi.collect_parameters(params, "psi");
  for (auto& p : params) randomize(p.tensor, rng, 0.1);
  return psi;
}

void check_mhsa(Collector& c, Rng& rng) {
  const auto psi = small_psi(1, rng);
  const auto& attn = psi.layers[0].attention;
  const Tensor x = randn({kN * kK, kD}, rng);
  const Tensor r = randn({kN * kK, kD}, rng);
  const auto f = [&] { return readout(mhsa_forward(attn, x, kK), r); };
  c.check_captured("mhsa", f, x);
  for (const LinearLayer* l : {&attn.query, &attn.key, &attn.value, &attn.output}) {
    c.check_captured("mhsa", f, l->weight);
    if (l->bias.defined()) c.check_captured("mhsa", f, l->bias);
  }
}

void check_encoder_layer(Collector& c, Rng& rng) {
  const auto psi = small_psi(1, rng);
  const auto& layer = psi.layers[0];
  const Tensor x = randn({kN * kK, kD}, rng);
  const Tensor r_full = randn({kN * kK, kD}, rng);
  const Tensor r_first = randn({kN, kD}, rng);
  const auto full = [&] { return readout(encoder_layer_forward(layer, x, kK), r_full); };
  const auto first = [&] { return readout(encoder_layer_first_token(layer, x, kK), r_first); };
  ParameterList params;
  psi.collect_parameters(params, "psi");
  for (const auto& f : {std::function<Tensor()>(full), std::function<Tensor()>(first)}) {
    c.check_captured("encoder_layer", f, x);
    for (const auto& p : params) c.check_captured("encoder_layer", f, p.tensor);
  }
}

void check_batchnorm(Collector& c, Rng& rng) {
  auto bn = BatchNormLayer::create(kD);
  randomize(bn.gamma, rng, 0.3);
  randomize(bn.beta, rng, 0.3);
  const Tensor x = randn({kN, kD}, rng, 2.0);
  const Tensor r = randn({kN, kD}, rng);
  const auto f = [&] { return readout(batchnorm_forward(bn, x, Mode::kTrain), r); };
  c.check_captured("batchnorm", f, x);
  c.check_captured("batchnorm", f, bn.gamma);
  c.check_captured("batchnorm", f, bn.beta);
}

std::string group_of(const std::string& name) {
  const auto first = name.find('.');
  if (name.rfind("online.", 0) == 0) return name.substr(0, name.find('.', first + 1));
  return name.substr(0, first);
}

void check_train_step(Collector& c, Rng& rng) {
  TrainConfig cfg;
  cfg.dataset.input_dim = 6;
  cfg.model.encoder_widths = {10, 8};
  cfg.model.projector_widths = {8, kD};
  cfg.model.predictor_widths = {8, kD};
  cfg.model.transformer_layers = 2;
  cfg.model.transformer_heads = 2;
  cfg.batch_size = kN;
  cfg.k_neighbours = kK;
  cfg.queue_capacity = 16;
  cfg.steps = 10;
  cfg.warmup_steps = 1;

  Model model = Model::create(cfg, rng);
  ParameterList psi_params = model.transformer_parameters();
  for (auto& p : psi_params) randomize(p.tensor, rng, 0.2);

  SupportSet queue(cfg.queue_capacity, kD);
  const std::vector<int> labels{0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3};
  queue.enqueue_batch(randn({labels.size(), kD}, rng), labels);

  const Tensor view1 = randn({kN, cfg.dataset.input_dim}, rng);
  const Tensor view2 = randn({kN, cfg.dataset.input_dim}, rng);
  const auto f = [&] { return evaluate_objective(model, view1, view2, queue, cfg).loss.total; };
  for (const auto& [param, group] : model.trainable()) {
    (void)group;
    c.check_captured("train_step/" + group_of(param.name), f, param.tensor);
  }
}

using ModuleFn = void (*)(Collector&, Rng&);

const std::vector<std::pair<std::string, ModuleFn>>& registry() {
  static const std::vector<std::pair<std::string, ModuleFn>> modules = {
      {"neighbour", check_neighbour},   {"centroid", check_centroid},
      {"redundancy", check_redundancy}, {"total", check_total},
      {"mhsa", check_mhsa},             {"encoder_layer", check_encoder_layer},
      {"batchnorm", check_batchnorm},   {"train_step", check_train_step},
  };
  return modules;
}

}  // namespace

std::vector<std::string> gradcheck_modules() {
  std::vector<std::string> out;
  for (const auto& [name, _] : registry()) out.push_back(name);
  return out;
}

std::vector<GradcheckResult> run_gradcheck(const std::string& module) {
  Collector collector;
  bool found = false;
  const auto& modules = registry();
  for (std::size_t i = 0; i < modules.size(); ++i) {
    if (!module.empty() && module != modules[i].first) continue;
    found = true;
    Rng rng(1000 + i);
    modules[i].second(collector, rng);
  }
  if (!found) throw ContractError("gradcheck: unknown module '" + module + "'");
  return collector.results();
}

}  // namespace all4one
