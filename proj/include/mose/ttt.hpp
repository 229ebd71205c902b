#pragma once

#include <vector>

#include "mose/config.hpp"
#include "mose/corpus.hpp"
#include "mose/model.hpp"

namespace mose {

// Sharpness parameters, stored as log(gamma) so positivity holds by
// construction. One value shared across blocks, or one per block.
struct GammaParams {
  bool layerwise = false;
  std::vector<double> log_gamma;

  static GammaParams init(bool layerwise, int n_layers) {
    GammaParams g;
    g.layerwise = layerwise;
    g.log_gamma.assign(layerwise ? static_cast<size_t>(n_layers) : 1, 0.0);  // gamma = 1
    return g;
  }

  std::vector<double> gammas() const {
    std::vector<double> out(log_gamma.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(log_gamma[i]);
    return out;
  }
};

struct CalibBatch {
  std::vector<int32_t> inputs;
  std::vector<int32_t> targets;
  int batch_size = 0;
};

// Deterministic calibration stream: the tail of the training split, so it is
// training-distribution text held out from the evaluation split.
class CalibStream {
 public:
  static CalibStream from_corpus(const Corpus& corpus, int n_batches, int batch_size);
  size_t size() const { return batches_.size(); }
  const CalibBatch& batch(size_t i) const { return batches_.at(i); }
  int seq_len() const { return seq_len_; }

 private:
  std::vector<CalibBatch> batches_;
  int seq_len_ = 0;
};

// Language-model loss of a batch under the router-conditioned width policy
// with the given gamma and budget (discretized widths, eval capacity,
// no auxiliary terms). Model weights are read-only.
double ttt_loss(const ModelParams<float>& model, const CalibBatch& batch,
                const GammaParams& gamma, double budget);

struct CalibResult {
  GammaParams gamma;        // best-seen candidate
  double calib_loss = 0.0;  // full-stream loss of the returned gamma
  double init_loss = 0.0;   // full-stream loss of the gamma = 1 initialization
  int64_t batches_used = 0;
};

// Zeroth-order (simultaneous-perturbation) descent on log gamma: widths are
// discretized so the objective is piecewise constant and analytic gradients
// vanish almost everywhere. Candidate snapshots are scored on the full
// stream; the initialization is always a candidate, so the returned gamma
// never scores worse than gamma = 1.
CalibResult calibrate_gamma(const ModelParams<float>& model, const CalibStream& stream,
                            double budget, bool layerwise, const CalibConfig& cfg, uint64_t seed);

}  // namespace mose
