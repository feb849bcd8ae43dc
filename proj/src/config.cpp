#include "all4one/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "all4one/errors.hpp"
#include "json.hpp"

namespace all4one {

using nlohmann::json;

void DatasetSpec::validate() const {
  if (num_classes < 2) throw ConfigError("dataset: num_classes must be at least 2");
  if (samples == 0 || test_samples == 0) throw ConfigError("dataset: empty split");
  if (input_dim == 0) throw ConfigError("dataset: input_dim must be positive");
  if (cluster_std < 0.0) throw ConfigError("dataset: cluster_std must be non-negative");
  if (radius <= 0.0) throw ConfigError("dataset: radius must be positive");
  if (mode == DatasetMode::kTinyGrid && grid_side() == 0) {
    throw ConfigError("dataset: tiny-grid input_dim must be a perfect square");
  }
}

std::size_t DatasetSpec::grid_side() const {
  if (mode != DatasetMode::kTinyGrid) return 0;
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(input_dim))));
  return side * side == input_dim ? side : 0;
}

void AugmentationSpec::validate() const {
  if (gaussian_noise_std < 0.0) throw ConfigError("augmentation: negative noise std");
  if (coordinate_mask_prob < 0.0 || coordinate_mask_prob > 1.0) {
    throw ConfigError("augmentation: coordinate_mask_prob outside [0,1]");
  }
  if (random_scale_range < 0.0 || random_scale_range > 1.0) {
    throw ConfigError("augmentation: random_scale_range outside [0,1]");
  }
  if (crop_fraction < 0.0 || crop_fraction > 1.0) {
    throw ConfigError("augmentation: crop_fraction outside [0,1]");
  }
}

void TrainConfig::validate() const {
  dataset.validate();
  augmentation.validate();
  objective.validate();
  if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
  if (k_neighbours < 1) throw ConfigError("k_neighbours must be at least 1");
  if (queue_capacity < k_neighbours) throw ConfigError("queue_capacity smaller than k_neighbours");
  if (steps > 0 && warmup_steps >= steps) throw ConfigError("warmup_steps must be below steps");
  if (base_lr < 0.0 || transformer_lr < 0.0) throw ConfigError("learning rates must be non-negative");
  if (ema.m < 0.0 || ema.m > 1.0) throw ConfigError("ema.m outside [0,1]");
  if (sgd_momentum < 0.0 || sgd_momentum >= 1.0) throw ConfigError("sgd_momentum outside [0,1)");
  if (model.encoder_widths.empty() || model.projector_widths.empty() ||
      model.predictor_widths.empty()) {
    throw ConfigError("model: layer width lists must be non-empty");
  }
  if (model.predictor_widths.back() != model.projection_dim()) {
    throw ConfigError("model: predictor output width must equal projector output width");
  }
  if (model.transformer_heads == 0 || model.projection_dim() % model.transformer_heads != 0) {
    throw ConfigError("model: projection width not divisible by transformer_heads");
  }
  if (model.projection_dim() % 2 != 0) throw ConfigError("model: projection width must be even");
  if (model.transformer_layers == 0) throw ConfigError("model: transformer_layers must be positive");
  if (model.projection_dim() < 2) throw ConfigError("model: projection width must be at least 2");
}

BranchDims TrainConfig::branch_dims() const {
  return {dataset.input_dim, model.encoder_widths, model.projector_widths, model.predictor_widths};
}

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  std::set<std::string> allowed(known.begin(), known.end());
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

std::string mode_name(DatasetMode m) {
  return m == DatasetMode::kGaussianMixture ? "gaussian-mixture" : "tiny-grid";
}

DatasetSpec dataset_from(const json& j) {
  reject_unknown(j, {"mode", "num_classes", "samples", "test_samples", "input_dim", "cluster_std",
                     "radius", "seed"},
                 "dataset");
  DatasetSpec s;
  if (j.contains("mode")) {
    const auto m = j.at("mode").get<std::string>();
    if (m == "gaussian-mixture") {
      s.mode = DatasetMode::kGaussianMixture;
    } else if (m == "tiny-grid") {
      s.mode = DatasetMode::kTinyGrid;
    } else {
      throw ConfigError("dataset: unknown mode '" + m + "'");
    }
  }
  read(j, "num_classes", s.num_classes);
  read(j, "samples", s.samples);
  read(j, "test_samples", s.test_samples);
  read(j, "input_dim", s.input_dim);
  read(j, "cluster_std", s.cluster_std);
  read(j, "radius", s.radius);
  read(j, "seed", s.seed);
  return s;
}

json dataset_json(const DatasetSpec& s) {
  return {{"mode", mode_name(s.mode)},   {"num_classes", s.num_classes},
          {"samples", s.samples},        {"test_samples", s.test_samples},
          {"input_dim", s.input_dim},    {"cluster_std", s.cluster_std},
          {"radius", s.radius},          {"seed", s.seed}};
}

TrainConfig config_from(const json& j) {
  reject_unknown(j, {"dataset", "model", "augmentation", "objective", "batch_size", "steps",
                     "k_neighbours", "queue_capacity", "base_lr", "warmup_steps",
                     "transformer_lr", "ema", "sgd_momentum", "seed"},
                 "config");
  TrainConfig c;
  if (j.contains("dataset")) c.dataset = dataset_from(j.at("dataset"));
  if (j.contains("model")) {
    const auto& m = j.at("model");
    reject_unknown(m, {"encoder_widths", "projector_widths", "predictor_widths",
                       "transformer_layers", "transformer_heads"},
                   "model");
    read(m, "encoder_widths", c.model.encoder_widths);
    read(m, "projector_widths", c.model.projector_widths);
    read(m, "predictor_widths", c.model.predictor_widths);
    read(m, "transformer_layers", c.model.transformer_layers);
    read(m, "transformer_heads", c.model.transformer_heads);
  }
  if (j.contains("augmentation")) {
    const auto& a = j.at("augmentation");
    reject_unknown(a, {"gaussian_noise_std", "coordinate_mask_prob", "random_scale_range",
                       "crop_fraction"},
                   "augmentation");
    read(a, "gaussian_noise_std", c.augmentation.gaussian_noise_std);
    read(a, "coordinate_mask_prob", c.augmentation.coordinate_mask_prob);
    read(a, "random_scale_range", c.augmentation.random_scale_range);
    read(a, "crop_fraction", c.augmentation.crop_fraction);
  }
  if (j.contains("objective")) {
    const auto& o = j.at("objective");
    reject_unknown(o, {"tau", "lambda_red", "sigma", "kappa", "eta", "symmetrize"}, "objective");
    read(o, "tau", c.objective.tau);
    read(o, "lambda_red", c.objective.lambda_red);
    read(o, "sigma", c.objective.sigma);
    read(o, "kappa", c.objective.kappa);
    read(o, "eta", c.objective.eta);
    read(o, "symmetrize", c.objective.symmetrize);
  }
  if (j.contains("ema")) {
    const auto& e = j.at("ema");
    reject_unknown(e, {"m", "schedule"}, "ema");
    read(e, "m", c.ema.m);
    if (e.contains("schedule")) {
      const auto s = e.at("schedule").get<std::string>();
      if (s == "fixed") {
        c.ema.schedule = EmaSchedule::kFixed;
      } else if (s == "cosine-to-one") {
        c.ema.schedule = EmaSchedule::kCosineToOne;
      } else {
        throw ConfigError("ema: unknown schedule '" + s + "'");
      }
    }
  }
  read(j, "batch_size", c.batch_size);
  read(j, "steps", c.steps);
  read(j, "k_neighbours", c.k_neighbours);
  read(j, "queue_capacity", c.queue_capacity);
  read(j, "base_lr", c.base_lr);
  read(j, "warmup_steps", c.warmup_steps);
  read(j, "transformer_lr", c.transformer_lr);
  read(j, "sgd_momentum", c.sgd_momentum);
  read(j, "seed", c.seed);
  return c;
}

json parse_json(std::string_view text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("malformed JSON: ") + e.what());
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open file: " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TrainConfig parse_config(std::string_view json_text) {
  TrainConfig c;
  try {
    c = config_from(parse_json(json_text));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig load_config(const std::filesystem::path& path) { return parse_config(read_file(path)); }

std::string config_to_json(const TrainConfig& c) {
  json j = {
      {"dataset", dataset_json(c.dataset)},
      {"model",
       {{"encoder_widths", c.model.encoder_widths},
        {"projector_widths", c.model.projector_widths},
        {"predictor_widths", c.model.predictor_widths},
        {"transformer_layers", c.model.transformer_layers},
        {"transformer_heads", c.model.transformer_heads}}},
      {"augmentation",
       {{"gaussian_noise_std", c.augmentation.gaussian_noise_std},
        {"coordinate_mask_prob", c.augmentation.coordinate_mask_prob},
        {"random_scale_range", c.augmentation.random_scale_range},
        {"crop_fraction", c.augmentation.crop_fraction}}},
      {"objective",
       {{"tau", c.objective.tau},
        {"lambda_red", c.objective.lambda_red},
        {"sigma", c.objective.sigma},
        {"kappa", c.objective.kappa},
        {"eta", c.objective.eta},
        {"symmetrize", c.objective.symmetrize}}},
      {"ema",
       {{"m", c.ema.m},
        {"schedule", c.ema.schedule == EmaSchedule::kFixed ? "fixed" : "cosine-to-one"}}},
      {"batch_size", c.batch_size},
      {"steps", c.steps},
      {"k_neighbours", c.k_neighbours},
      {"queue_capacity", c.queue_capacity},
      {"base_lr", c.base_lr},
      {"warmup_steps", c.warmup_steps},
      {"transformer_lr", c.transformer_lr},
      {"sgd_momentum", c.sgd_momentum},
      {"seed", c.seed},
  };
  return j.dump(2);
}

DatasetSpec parse_dataset_spec(std::string_view json_text) {
  DatasetSpec s;
  try {
    s = dataset_from(parse_json(json_text));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("dataset spec: ") + e.what());
  }
  s.validate();
  return s;
}

DatasetSpec load_dataset_spec(const std::filesystem::path& path) {
  return parse_dataset_spec(read_file(path));
}

std::string dataset_spec_to_json(const DatasetSpec& spec) { return dataset_json(spec).dump(2); }

}  // namespace all4one
