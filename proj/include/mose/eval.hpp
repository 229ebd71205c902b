#pragma once

#include <string>
#include <vector>

#include "mose/corpus.hpp"
#include "mose/flops.hpp"
#include "mose/model.hpp"
#include "mose/ttt.hpp"

namespace mose {

struct EvalOptions {
  int batch_size = 16;
  int k_override = 0;          // evaluate with fewer active experts
  bool reference_moe = false;  // run the standard-MoE route instead of MoSE
};

struct EvalResult {
  double nll = 0.0;          // token-weighted mean negative log-likelihood
  double perplexity = 0.0;   // exp(nll)
  double accuracy = 0.0;     // exact-match on each sequence's final prediction
  double dropped_rate = 0.0; // dropped assignments / total assignments
  FlopsReport flops;         // realized MoE cost, analytic attention/other
  int64_t loss_tokens = 0;
  int64_t sequences = 0;
};

EvalResult evaluate(const ModelParams<float>& model, const Corpus& corpus, bool held_out,
                    const WidthPolicy& policy, const EvalOptions& opts = {});

// One point of a compute-quality sweep.
struct FrontierPoint {
  std::string mode;           // uniform | normprob | ttt-shared | ttt-layerwise
  std::string gamma_variant;  // empty | shared | layerwise
  double budget = 0.0;
  std::vector<double> gamma_values;
  double mflops_per_token = 0.0;
  double ppl = 0.0;
  double acc = 0.0;
  double dropped_token_rate = 0.0;
};

// Points not dominated in (mflops, ppl); output sorted by mflops ascending.
std::vector<FrontierPoint> pareto_frontier(const std::vector<FrontierPoint>& points);

struct SweepOptions {
  std::vector<double> budgets;
  std::vector<std::string> modes{"uniform", "normprob", "ttt-shared", "ttt-layerwise"};
  int eval_batch_size = 16;
  uint64_t seed = 1234;
};

// budget x mode grid: uniform runs width clamp(budget/k); normprob fixes
// gamma = 1; the ttt modes calibrate gamma on the calibration stream first.
std::vector<FrontierPoint> sweep(const ModelParams<float>& model, const Corpus& corpus,
                                 const RunConfig& run, const SweepOptions& opts);

void write_sweep_csv(const std::string& path, const std::vector<FrontierPoint>& rows);
std::string frontier_point_csv(const FrontierPoint& p);

}  // namespace mose
