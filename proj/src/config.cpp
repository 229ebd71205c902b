#include "mose/config.hpp"

#include <filesystem>
#include <fstream>
#include <set>

#include "mose/error.hpp"

namespace mose {

namespace {

using nlohmann::json;

// Fail fast on typos: every key must be known.
void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw FormatError("config: " + where + " must be a JSON object");
  for (const auto& item : j.items()) {
    if (!allowed.count(item.key())) {
      throw FormatError("config: unknown key \"" + item.key() + "\" in " + where);
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

void ModelConfig::validate() const {
  if (n_layers < 1) throw ContractError("model.n_layers must be >= 1");
  if (n_heads < 1 || model_dim < 1 || model_dim % n_heads != 0) {
    throw ContractError("model.model_dim must be a positive multiple of n_heads");
  }
  if (vocab < 2) throw ContractError("model.vocab must be >= 2");
  if (seq_len < 1) throw ContractError("model.seq_len must be >= 1");
  if (top_k < 1 || top_k > n_experts) throw ContractError("model: need 1 <= top_k <= n_experts");
  if (capacity_train <= 0.0 || capacity_eval <= 0.0) {
    throw ContractError("model: capacity factors must be positive");
  }
  grid();  // validates width bounds and step
}

nlohmann::json ModelConfig::to_json() const {
  return json{{"n_layers", n_layers},
              {"n_heads", n_heads},
              {"model_dim", model_dim},
              {"vocab", vocab},
              {"seq_len", seq_len},
              {"n_experts", n_experts},
              {"top_k", top_k},
              {"width_min", width_min},
              {"width_max", width_max},
              {"width_step", width_step},
              {"capacity_train", capacity_train},
              {"capacity_eval", capacity_eval},
              {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  check_keys(j,
             {"n_layers", "n_heads", "model_dim", "vocab", "seq_len", "n_experts", "top_k",
              "width_min", "width_max", "width_step", "capacity_train", "capacity_eval", "seed"},
             "model");
  ModelConfig c;
  read(j, "n_layers", c.n_layers);
  read(j, "n_heads", c.n_heads);
  read(j, "model_dim", c.model_dim);
  read(j, "vocab", c.vocab);
  read(j, "seq_len", c.seq_len);
  read(j, "n_experts", c.n_experts);
  read(j, "top_k", c.top_k);
  read(j, "width_min", c.width_min);
  read(j, "width_max", c.width_max);
  read(j, "width_step", c.width_step);
  read(j, "capacity_train", c.capacity_train);
  read(j, "capacity_eval", c.capacity_eval);
  read(j, "seed", c.seed);
  c.validate();
  return c;
}

void TrainConfig::validate() const {
  if (total_iters < 1) throw ContractError("train.total_iters must be >= 1");
  if (warmup_iters < 0 || warmup_iters >= total_iters) {
    throw ContractError("train.warmup_iters must be in [0, total_iters)");
  }
  if (!(min_lr < peak_lr)) throw ContractError("train.min_lr must be below peak_lr");
  if (batch_size < 1) throw ContractError("train.batch_size must be >= 1");
  if (grad_clip <= 0.0) throw ContractError("train.grad_clip must be positive");
  if (checkpoint_interval < 1) throw ContractError("train.checkpoint_interval must be >= 1");
}

nlohmann::json TrainConfig::to_json() const {
  return json{{"total_iters", total_iters},
              {"warmup_iters", warmup_iters},
              {"peak_lr", peak_lr},
              {"min_lr", min_lr},
              {"weight_decay", weight_decay},
              {"beta1", beta1},
              {"beta2", beta2},
              {"grad_clip", grad_clip},
              {"balance_coef", balance_coef},
              {"z_coef", z_coef},
              {"batch_size", batch_size},
              {"checkpoint_interval", checkpoint_interval}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  check_keys(j,
             {"total_iters", "warmup_iters", "peak_lr", "min_lr", "weight_decay", "beta1", "beta2",
              "grad_clip", "balance_coef", "z_coef", "batch_size", "checkpoint_interval"},
             "train");
  TrainConfig c;
  read(j, "total_iters", c.total_iters);
  read(j, "warmup_iters", c.warmup_iters);
  read(j, "peak_lr", c.peak_lr);
  read(j, "min_lr", c.min_lr);
  read(j, "weight_decay", c.weight_decay);
  read(j, "beta1", c.beta1);
  read(j, "beta2", c.beta2);
  read(j, "grad_clip", c.grad_clip);
  read(j, "balance_coef", c.balance_coef);
  read(j, "z_coef", c.z_coef);
  read(j, "batch_size", c.batch_size);
  read(j, "checkpoint_interval", c.checkpoint_interval);
  c.validate();
  return c;
}

void CalibConfig::validate() const {
  if (n_batches < 1 || batch_size < 1 || max_passes < 1) {
    throw ContractError("calib: n_batches, batch_size and max_passes must be positive");
  }
  if (!(step_size > 0.0) || !(perturbation > 0.0)) {
    throw ContractError("calib: step_size and perturbation must be positive");
  }
}

nlohmann::json CalibConfig::to_json() const {
  return json{{"n_batches", n_batches},
              {"batch_size", batch_size},
              {"step_size", step_size},
              {"perturbation", perturbation},
              {"max_passes", max_passes}};
}

CalibConfig CalibConfig::from_json(const json& j) {
  check_keys(j, {"n_batches", "batch_size", "step_size", "perturbation", "max_passes"}, "calib");
  CalibConfig c;
  read(j, "n_batches", c.n_batches);
  read(j, "batch_size", c.batch_size);
  read(j, "step_size", c.step_size);
  read(j, "perturbation", c.perturbation);
  read(j, "max_passes", c.max_passes);
  c.validate();
  return c;
}

void PolicyDefaults::validate() const {
  if (mode != "uniform" && mode != "routercond") {
    throw ContractError("policy.mode must be uniform or routercond");
  }
  if (gamma_variant != "shared" && gamma_variant != "layerwise") {
    throw ContractError("policy.gamma_variant must be shared or layerwise");
  }
  if (!(gamma > 0.0)) throw ContractError("policy.gamma must be positive");
}

nlohmann::json PolicyDefaults::to_json() const {
  return json{{"mode", mode},     {"width", width},           {"budget", budget},
              {"gamma", gamma},   {"gamma_variant", gamma_variant},
              {"discretize", discretize}};
}

PolicyDefaults PolicyDefaults::from_json(const json& j) {
  check_keys(j, {"mode", "width", "budget", "gamma", "gamma_variant", "discretize"}, "policy");
  PolicyDefaults p;
  read(j, "mode", p.mode);
  read(j, "width", p.width);
  read(j, "budget", p.budget);
  read(j, "gamma", p.gamma);
  read(j, "gamma_variant", p.gamma_variant);
  read(j, "discretize", p.discretize);
  p.validate();
  return p;
}

void RunConfig::validate(bool check_paths) const {
  model.validate();
  train.validate();
  calib.validate();
  policy.validate();
  if (check_paths && !corpus_path.empty() && !std::filesystem::exists(corpus_path)) {
    throw IoError("config: corpus path not found: " + corpus_path);
  }
  if (check_paths && !checkpoint_path.empty() && !std::filesystem::exists(checkpoint_path)) {
    throw IoError("config: checkpoint path not found: " + checkpoint_path);
  }
}

nlohmann::json RunConfig::to_json() const {
  return json{{"model", model.to_json()},
              {"train", train.to_json()},
              {"calib", calib.to_json()},
              {"policy", policy.to_json()},
              {"paths", json{{"corpus", corpus_path},
                             {"checkpoint", checkpoint_path},
                             {"out_dir", out_dir}}},
              {"seed", seed}};
}

RunConfig RunConfig::from_json(const json& j) {
  check_keys(j, {"model", "train", "calib", "policy", "paths", "seed"}, "run config");
  RunConfig c;
  if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
  if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
  if (j.contains("calib")) c.calib = CalibConfig::from_json(j.at("calib"));
  if (j.contains("policy")) c.policy = PolicyDefaults::from_json(j.at("policy"));
  if (j.contains("paths")) {
    const json& p = j.at("paths");
    check_keys(p, {"corpus", "checkpoint", "out_dir"}, "paths");
    read(p, "corpus", c.corpus_path);
    read(p, "checkpoint", c.checkpoint_path);
    read(p, "out_dir", c.out_dir);
  }
  read(j, "seed", c.seed);
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError("config: invalid JSON in " + path + ": " + e.what());
  }
  RunConfig c = from_json(j);
  c.validate();
  return c;
}

void RunConfig::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("config: cannot write " + path);
  out << to_json().dump(2) << "\n";
}

}  // namespace mose
