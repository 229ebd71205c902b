#pragma once

#include <string>

#include "mose/model.hpp"

namespace mose {

// Binary checkpoint: magic "MOSE1", format version, model-config JSON, named
// parameter tensors as raw little-endian 32-bit floats, the training
// iteration, and the trainer rng state. Save -> load -> save is byte
// identical.
struct Checkpoint {
  ModelConfig config;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  int64_t iteration = 0;
  std::string rng_state;

  static Checkpoint from_model(ModelParams<float>& model, int64_t iteration,
                               const std::string& rng_state);
  ModelParams<float> to_model() const;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

  // Throws MismatchError naming the first differing field.
  static void check_compatible(const ModelConfig& a, const ModelConfig& b);
};

}  // namespace mose
