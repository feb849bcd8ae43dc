#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "all4one/checkpoint.hpp"
#include "all4one/errors.hpp"
#include "all4one/nn.hpp"
#include "doctest.h"

using namespace all4one;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = n(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

void fill(Tensor t, const std::vector<double>& v) {
  auto d = t.mutable_data();
  REQUIRE(d.size() == v.size());
  std::copy(v.begin(), v.end(), d.begin());
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("all4one_nn_" + name);
}

}  // namespace

TEST_CASE("linear_forward") {
  Rng rng(1);
  auto layer = LinearLayer::create(2, 2, true, rng);
  fill(layer.weight, {1, 0, 0, 1});
  const auto x = Tensor::from({2, 2}, {1.5, -2, 3, 4});
  CHECK(values(linear_forward(layer, x)) == values(x));

  auto scalar = LinearLayer::create(1, 1, true, rng);
  fill(scalar.weight, {2});
  fill(scalar.bias, {1});
  CHECK(linear_forward(scalar, Tensor::from({1, 1}, {3})).item() == 7.0);

  auto biased = LinearLayer::create(3, 2, true, rng);
  fill(biased.bias, {0.25, -1});
  const auto out = linear_forward(biased, Tensor::zeros({4, 3}));
  for (std::size_t r = 0; r < 4; ++r) {
    CHECK(out.at(r, 0) == 0.25);
    CHECK(out.at(r, 1) == -1.0);
  }
}

TEST_CASE("linear init is uniform within 1/sqrt(in) with zero bias") {
  Rng rng(2);
  const auto layer = LinearLayer::create(16, 32, true, rng);
  for (double w : layer.weight.data()) CHECK(std::abs(w) <= 0.25);
  for (double b : layer.bias.data()) CHECK(b == 0.0);
  CHECK_FALSE(LinearLayer::create(16, 32, false, rng).bias.defined());
}

TEST_CASE("batchnorm train mode") {
  auto bn = BatchNormLayer::create(2);
  // Column 0 has mean 0 and biased variance 1; column 1 is constant.
  const auto x = Tensor::from({4, 2}, {1, 5, -1, 5, 1, 5, -1, 5});
  const auto y = batchnorm_forward(bn, x, Mode::kTrain);
  for (std::size_t r = 0; r < 4; ++r) {
    CHECK(std::abs(y.at(r, 0) - x.at(r, 0)) <= 1e-5);
    CHECK(y.at(r, 1) == 0.0);
  }
  fill(bn.beta, {0.5, -0.5});
  const auto shifted = batchnorm_forward(bn, x, Mode::kTrain);
  for (std::size_t r = 0; r < 4; ++r) CHECK(shifted.at(r, 1) == -0.5);

  fill(bn.gamma, {0, 0});
  Rng rng(3);
  const auto flat = batchnorm_forward(bn, random_tensor({4, 2}, rng), Mode::kTrain);
  for (std::size_t r = 0; r < 4; ++r) {
    CHECK(flat.at(r, 0) == 0.5);
    CHECK(flat.at(r, 1) == -0.5);
  }
  CHECK_THROWS_AS(batchnorm_forward(bn, Tensor::zeros({1, 2}), Mode::kTrain), ContractError);
}

TEST_CASE("batchnorm running statistics use the unbiased variance") {
  auto bn = BatchNormLayer::create(1);
  batchnorm_forward(bn, Tensor::from({4, 1}, {1, 2, 3, 4}), Mode::kTrain);
  // mean 2.5, unbiased variance 5/3
  CHECK(bn.running_mean.at(0) == doctest::Approx(0.1 * 2.5).epsilon(1e-15));
  CHECK(bn.running_var.at(0) == doctest::Approx(0.9 + 0.1 * 5.0 / 3.0).epsilon(1e-15));

  const auto y = batchnorm_forward(bn, Tensor::from({1, 1}, {2.0}), Mode::kEval);
  const double expected = (2.0 - bn.running_mean.at(0)) / std::sqrt(bn.running_var.at(0) + 1e-5);
  CHECK(y.item() == doctest::Approx(expected).epsilon(1e-15));
}

TEST_CASE("mlp composition") {
  Rng rng(4);
  SUBCASE("single layer is a plain linear map") {
    auto mlp = Mlp::create({3, {2}}, rng);
    const auto x = random_tensor({5, 3}, rng);
    CHECK(values(mlp.forward(x, Mode::kTrain)) == values(linear_forward(mlp.linears()[0], x)));
  }
  SUBCASE("identity weights in eval mode give relu then identity") {
    auto mlp = Mlp::create({2, {2, 2}}, rng);
    for (auto& l : mlp.linears()) fill(l.weight, {1, 0, 0, 1});
    auto& bn = mlp.norms()[0];
    fill(bn.running_var, {1.0 - bn.eps, 1.0 - bn.eps});
    const auto y = mlp.forward(Tensor::from({2, 2}, {1.5, -2, -0.5, 3}), Mode::kEval);
    CHECK(y.at(0, 0) == doctest::Approx(1.5).epsilon(1e-15));
    CHECK(y.at(0, 1) == 0.0);
    CHECK(y.at(1, 0) == 0.0);
    CHECK(y.at(1, 1) == doctest::Approx(3).epsilon(1e-15));
  }
  SUBCASE("negative input through the relu layer leaves only the bias") {
    auto mlp = Mlp::create({2, {2, 3}}, rng);
    for (double& w : mlp.linears()[0].weight.mutable_data()) w = std::abs(w);
    fill(mlp.linears()[1].bias, {0.1, 0.2, 0.3});
    // Eval-mode BN with identity stats; negative pre-activations die in the ReLU.
    const auto y = mlp.forward(Tensor::full({3, 2}, -1.0), Mode::kEval);
    for (std::size_t r = 0; r < 3; ++r) {
      CHECK(y.at(r, 0) == 0.1);
      CHECK(y.at(r, 1) == 0.2);
      CHECK(y.at(r, 2) == 0.3);
    }
  }
  CHECK_THROWS_AS(Mlp::create({3, {}}, rng), ContractError);
  auto mlp = Mlp::create({3, {4}}, rng);
  CHECK_THROWS_AS(mlp.forward(Tensor::zeros({2, 5}), Mode::kTrain), DimensionError);
}

TEST_CASE("backbone") {
  Rng rng(5);
  SUBCASE("identity-configured backbone passes non-negative input through") {
    auto enc = Mlp::create({3, {3}, true}, rng);
    fill(enc.linears()[0].weight, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    auto& bn = enc.norms()[0];
    fill(bn.running_var, {1.0 - bn.eps, 1.0 - bn.eps, 1.0 - bn.eps});
    const auto x = Tensor::from({2, 3}, {0.5, 1, 2, 3, 0, 0.25});
    const auto y = backbone_forward(enc, x, Mode::kEval);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(std::abs(y.at(i) - x.at(i)) <= 1e-12);
  }
  SUBCASE("shape and determinism") {
    const BranchDims dims;
    for (std::size_t n : {2u, 7u, 33u}) {
      Rng a(9), b(9);
      auto e1 = BranchParams::create(dims, a);
      auto e2 = BranchParams::create(dims, b);
      Rng data(10);
      const auto x = random_tensor({n, dims.input_dim}, data);
      const auto y1 = backbone_forward(e1.online.encoder, x);
      const auto y2 = backbone_forward(e2.online.encoder, x);
      CHECK(y1.shape() == Shape{n, dims.encoder_widths.back()});
      CHECK(values(y1) == values(y2));
    }
  }
}

TEST_CASE("projector and predictor heads end affine") {
  Rng rng(6);
  auto p = BranchParams::create(BranchDims{}, rng);
  // Run a train pass so the eval statistics are not trivial.
  batchnorm_forward(p.online.projector.norms()[0], random_tensor({16, 256}, rng), Mode::kTrain);
  for (Mlp* head : {&p.online.projector, &p.predictor_nn, &p.predictor_c}) {
    const auto& last = head->linears().back();
    const auto a = random_tensor({3, last.in_dim()}, rng);
    const auto b = random_tensor({3, last.in_dim()}, rng);
    const auto fa = linear_forward(last, a), fb = linear_forward(last, b);
    const auto fab = linear_forward(last, add(scale(a, 0.3), scale(b, 0.7)));
    for (std::size_t i = 0; i < fab.numel(); ++i) {
      CHECK(std::abs(fab.at(i) - (0.3 * fa.at(i) + 0.7 * fb.at(i))) <= 1e-9);
    }
    CHECK(head->norms().size() + 1 == head->linears().size());
  }
}

TEST_CASE("momentum branch starts as a grad-free copy") {
  Rng rng(7);
  const auto p = BranchParams::create(BranchDims{}, rng);
  const auto online = p.online_parameters();
  const auto momentum = p.momentum_parameters();
  REQUIRE(online.size() == momentum.size());
  for (std::size_t i = 0; i < online.size(); ++i) {
    CHECK(values(online[i].tensor) == values(momentum[i].tensor));
    CHECK(online[i].tensor.node() != momentum[i].tensor.node());
    CHECK(online[i].tensor.requires_grad());
    CHECK_FALSE(momentum[i].tensor.requires_grad());
  }
}

TEST_CASE("momentum outputs carry no gradient to momentum parameters") {
  Rng rng(8);
  auto p = BranchParams::create({6, {8}, {8, 4}, {8, 4}}, rng);
  const auto x = random_tensor({5, 6}, rng);
  Tape tape;
  TapeScope scope(tape);
  const auto zm = p.momentum.forward(x, Mode::kTrain);
  const auto zo = p.online.forward(x, Mode::kTrain);
  const auto grads = backward(sum(mul(zm, zo)));
  for (const auto& m : p.momentum_parameters()) {
    CHECK_FALSE(grads.participated(m.tensor));
    const Tensor g = grads.of(m.tensor);
    for (double v : g.data()) CHECK(v == 0.0);
  }
  bool any_online = false;
  for (const auto& o : p.online_parameters()) any_online = any_online || grads.participated(o.tensor);
  CHECK(any_online);
}

TEST_CASE("ema_update") {
  const ParameterList online{{"w", Tensor::from({3}, {0.0, 0.1, -7.25}, true)}};
  const ParameterList momentum{{"w", Tensor::from({3}, {1.0, 0.3, 2.5})}};
  const auto before = values(momentum[0].tensor);

  ema_update(online, momentum, 1.0);
  CHECK(values(momentum[0].tensor) == before);

  ema_update(online, momentum, 0.9);
  CHECK(momentum[0].tensor.at(0) == doctest::Approx(0.9).epsilon(1e-15));

  ema_update(online, momentum, 0.0);
  CHECK(values(momentum[0].tensor) == values(online[0].tensor));

  const ParameterList bad{{"w", Tensor::zeros({2})}};
  CHECK_THROWS_AS(ema_update(online, bad, 0.5), DimensionError);
  CHECK_THROWS_AS(ema_update(online, momentum, 1.5), ContractError);
}

TEST_CASE("ema_update stays between old and online values") {
  Rng rng(12);
  std::uniform_real_distribution<double> coeff(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const ParameterList online{{"w", random_tensor({17}, rng, 1e3)}};
    const ParameterList momentum{{"w", random_tensor({17}, rng, 1e-3)}};
    const auto old = values(momentum[0].tensor);
    const double m = coeff(rng);
    ema_update(online, momentum, m);
    for (std::size_t j = 0; j < old.size(); ++j) {
      const double lo = std::min(old[j], online[0].tensor.at(j));
      const double hi = std::max(old[j], online[0].tensor.at(j));
      CHECK(momentum[0].tensor.at(j) >= lo);
      CHECK(momentum[0].tensor.at(j) <= hi);
    }
  }
}

TEST_CASE("ema coefficient schedules") {
  EmaParams fixed{0.996, EmaSchedule::kFixed};
  CHECK(ema_coefficient(fixed, 123, 1000) == 0.996);
  EmaParams cosine{0.99, EmaSchedule::kCosineToOne};
  CHECK(ema_coefficient(cosine, 0, 100) == doctest::Approx(0.99).epsilon(1e-15));
  CHECK(ema_coefficient(cosine, 50, 100) == doctest::Approx(0.995).epsilon(1e-12));
  CHECK(ema_coefficient(cosine, 100, 100) == 1.0);
}

TEST_CASE("checkpoint round trip") {
  Rng rng(13);
  auto p = BranchParams::create({6, {8}, {8, 4}, {8, 4}}, rng);
  Checkpoint ckpt;
  ckpt.metadata = R"({"note": "round trip"})";
  ckpt.add(p.online_parameters());
  ckpt.add(p.buffers());
  ckpt.add("scalar", Tensor::scalar(3.5));
  const auto path = temp_path("roundtrip.bin");
  write_checkpoint(path, ckpt);
  const auto back = read_checkpoint(path);
  CHECK(back.metadata == ckpt.metadata);
  REQUIRE(back.arrays.size() == ckpt.arrays.size());
  for (std::size_t i = 0; i < back.arrays.size(); ++i) {
    CHECK(back.arrays[i].name == ckpt.arrays[i].name);
    CHECK(back.arrays[i].shape == ckpt.arrays[i].shape);
    CHECK(back.arrays[i].values == ckpt.arrays[i].values);
  }
  CHECK(checkpoint_hash(back) == checkpoint_hash(ckpt));

  Rng other(99);
  auto q = BranchParams::create({6, {8}, {8, 4}, {8, 4}}, other);
  back.restore(q.online_parameters());
  const auto a = p.online_parameters(), b = q.online_parameters();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(values(a[i].tensor) == values(b[i].tensor));

  auto mismatched = BranchParams::create({6, {9}, {8, 4}, {8, 4}}, other);
  CHECK_THROWS_AS(back.restore(mismatched.online_parameters()), DimensionError);
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint hash changes with any value") {
  Checkpoint a;
  a.add("x", Tensor::from({2}, {1.0, 2.0}));
  Checkpoint b = a;
  CHECK(checkpoint_hash(a) == checkpoint_hash(b));
  b.arrays[0].values[1] = std::nextafter(2.0, 3.0);
  CHECK(checkpoint_hash(a) != checkpoint_hash(b));
}

TEST_CASE("checkpoint read errors name the path") {
  const auto missing = temp_path("does_not_exist.bin");
  try {
    read_checkpoint(missing);
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find(missing.string()) != std::string::npos);
  }
  const auto garbage = temp_path("garbage.bin");
  std::ofstream(garbage) << "not a checkpoint";
  CHECK_THROWS_AS(read_checkpoint(garbage), IoError);
  std::filesystem::remove(garbage);
}
