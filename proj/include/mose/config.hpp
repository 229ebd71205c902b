#pragma once

#include <cstdint>
#include <string>

#include "mose/width.hpp"

#include <json.hpp>

namespace mose {

// Architecture plus routing settings; desk-scale defaults.
struct ModelConfig {
  int n_layers = 2;
  int n_heads = 4;
  int model_dim = 64;
  int vocab = 256;
  int seq_len = 128;
  int n_experts = 8;
  int top_k = 2;
  double width_min = 0.25;
  double width_max = 1.0;
  double width_step = 0.05;
  double capacity_train = 1.25;
  double capacity_eval = 2.0;
  uint64_t seed = 1234;

  int hidden_dim() const { return 4 * model_dim; }
  int head_dim() const { return model_dim / n_heads; }
  WidthGrid grid() const { return WidthGrid::make(width_min, width_max, width_step); }

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct TrainConfig {
  int64_t total_iters = 2000;
  int64_t warmup_iters = 200;
  double peak_lr = 6e-4;
  double min_lr = 6e-5;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double grad_clip = 1.0;
  double balance_coef = 0.01;
  double z_coef = 0.001;
  int batch_size = 8;
  int64_t checkpoint_interval = 500;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// Test-time training of the sharpness parameter.
struct CalibConfig {
  int n_batches = 50;
  int batch_size = 6;
  double step_size = 0.01;
  double perturbation = 0.05;  // log-space delta for two-point estimates
  int max_passes = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static CalibConfig from_json(const nlohmann::json& j);
};

// Default policy flags, overridable from the command line.
struct PolicyDefaults {
  std::string mode = "uniform";  // uniform | routercond
  double width = 1.0;
  double budget = 2.0;
  std::string gamma_variant = "shared";  // shared | layerwise
  double gamma = 1.0;
  bool discretize = true;

  void validate() const;
  nlohmann::json to_json() const;
  static PolicyDefaults from_json(const nlohmann::json& j);
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  CalibConfig calib;
  PolicyDefaults policy;
  std::string corpus_path;
  std::string checkpoint_path;
  std::string out_dir = ".";
  uint64_t seed = 1234;

  void validate(bool check_paths = true) const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::string& path);
  void save(const std::string& path) const;
};

}  // namespace mose
