#include "mose/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace mose {

EvalResult evaluate(const ModelParams<float>& model, const Corpus& corpus, bool held_out,
                    const WidthPolicy& policy, const EvalOptions& opts) {
  const ModelConfig& cfg = model.config;
  const int64_t n_seq = held_out ? corpus.held_sequences() : corpus.train_sequences();
  if (n_seq < 1) throw ContractError("evaluate: dataset split is empty");
  if (opts.k_override > cfg.n_experts) {
    throw ContractError("evaluate: k_override exceeds the trained expert count");
  }

  ForwardOptions fopts;
  fopts.capacity_factor = cfg.capacity_eval;
  fopts.k_override = opts.k_override;
  fopts.path = opts.reference_moe ? MoePath::kReference : MoePath::kSlimmable;

  const int64_t tlen = corpus.seq_len();
  EvalResult res;
  double nll_sum = 0.0;
  double moe_flops_sum = 0.0;
  int64_t forward_tokens = 0;
  int64_t matches = 0;
  int64_t total_assign = 0;
  int64_t total_dropped = 0;

  std::vector<int64_t> indices;
  std::vector<int32_t> inputs, targets;
  for (int64_t start = 0; start < n_seq; start += opts.batch_size) {
    const int64_t bsz = std::min<int64_t>(opts.batch_size, n_seq - start);
    indices.resize(static_cast<size_t>(bsz));
    for (int64_t b = 0; b < bsz; ++b) indices[static_cast<size_t>(b)] = start + b;
    corpus.gather_batch(held_out, indices, inputs, targets);

    auto fwd = model_forward(model, inputs, bsz, tlen, policy, fopts);
    const double ce = cross_entropy_mean(fwd.logits, targets, tlen - 1).item();
    const int64_t batch_tokens = bsz * (tlen - 1);
    nll_sum += ce * static_cast<double>(batch_tokens);
    res.loss_tokens += batch_tokens;

    // Exact match of the final prediction: position T-2 predicts byte T-1.
    const float* logits = fwd.logits.data();
    const int64_t v = cfg.vocab;
    for (int64_t b = 0; b < bsz; ++b) {
      const float* row = logits + ((b * tlen) + (tlen - 2)) * v;
      int64_t best = 0;
      for (int64_t c = 1; c < v; ++c) {
        if (row[c] > row[best]) best = c;
      }
      if (static_cast<int32_t>(best) == targets[static_cast<size_t>(b * (tlen - 1) + (tlen - 2))]) ++matches;
    }
    res.sequences += bsz;

    for (const auto& layer : fwd.layers) {
      moe_flops_sum += layer_moe_flops_total(cfg, layer.stats);
      total_assign += layer.stats.tokens * layer.stats.k;
      total_dropped += layer.stats.dropped;
    }
    forward_tokens += bsz * tlen;
  }

  res.nll = nll_sum / static_cast<double>(res.loss_tokens);
  res.perplexity = std::exp(res.nll);
  res.accuracy = static_cast<double>(matches) / static_cast<double>(res.sequences);
  res.dropped_rate =
      total_assign > 0 ? static_cast<double>(total_dropped) / static_cast<double>(total_assign) : 0.0;
  res.flops = model_flops_realized(cfg, moe_flops_sum / static_cast<double>(forward_tokens));
  return res;
}

std::vector<FrontierPoint> pareto_frontier(const std::vector<FrontierPoint>& points) {
  if (points.empty()) throw ContractError("pareto_frontier: need at least one point");
  std::vector<FrontierPoint> sorted = points;
  std::stable_sort(sorted.begin(), sorted.end(), [](const FrontierPoint& a, const FrontierPoint& b) {
    if (a.mflops_per_token != b.mflops_per_token) return a.mflops_per_token < b.mflops_per_token;
    return a.ppl < b.ppl;
  });

  // Single sweep over mflops groups; a point survives unless a strictly
  // cheaper point is at least as good, or an equal-cost point is strictly
  // better. Duplicates survive together (neither dominates).
  std::vector<FrontierPoint> out;
  double best_ppl = std::numeric_limits<double>::infinity();
  size_t i = 0;
  while (i < sorted.size()) {
    size_t j = i;
    while (j < sorted.size() && sorted[j].mflops_per_token == sorted[i].mflops_per_token) ++j;
    const double group_min = sorted[i].ppl;  // group is ppl-sorted
    if (group_min < best_ppl) {
      for (size_t p = i; p < j; ++p) {
        if (sorted[p].ppl == group_min) out.push_back(sorted[p]);
      }
      best_ppl = group_min;
    }
    i = j;
  }
  return out;
}

std::vector<FrontierPoint> sweep(const ModelParams<float>& model, const Corpus& corpus,
                                 const RunConfig& run, const SweepOptions& opts) {
  const ModelConfig& cfg = model.config;
  const WidthGrid grid = cfg.grid();
  const int k = cfg.top_k;

  CalibStream calib;
  for (const std::string& mode : opts.modes) {
    if (mode == "ttt-shared" || mode == "ttt-layerwise") {
      calib = CalibStream::from_corpus(corpus, run.calib.n_batches, run.calib.batch_size);
      break;
    }
  }

  EvalOptions eopts;
  eopts.batch_size = opts.eval_batch_size;

  std::vector<FrontierPoint> rows;
  for (double budget : opts.budgets) {
    if (!(budget > 0.0) || budget > static_cast<double>(k) + 1e-12) {
      throw ContractError("sweep: budget " + std::to_string(budget) + " outside (0, k]");
    }
    for (const std::string& mode : opts.modes) {
      FrontierPoint p;
      p.mode = mode;
      p.budget = budget;
      WidthPolicy policy;
      if (mode == "uniform") {
        policy = WidthPolicy::uniform(std::clamp(budget / k, grid.w_min, grid.w_max));
      } else if (mode == "normprob") {
        policy = WidthPolicy::router_conditioned(budget, {1.0}, false, true);
        p.gamma_variant = "shared";
        p.gamma_values = {1.0};
      } else if (mode == "ttt-shared" || mode == "ttt-layerwise") {
        const bool layerwise = mode == "ttt-layerwise";
        CalibResult calibrated;
        try {
          calibrated = calibrate_gamma(model, calib, budget, layerwise, run.calib, opts.seed);
        } catch (const Error& e) {
          throw ContractError("sweep: calibration failed for (budget=" + std::to_string(budget) +
                              ", mode=" + mode + "): " + e.what());
        }
        policy = WidthPolicy::router_conditioned(budget, calibrated.gamma.gammas(), layerwise, true);
        p.gamma_variant = layerwise ? "layerwise" : "shared";
        p.gamma_values = calibrated.gamma.gammas();
      } else {
        throw ContractError("sweep: unknown mode \"" + mode + "\"");
      }
      const EvalResult r = evaluate(model, corpus, true, policy, eopts);
      p.mflops_per_token = r.flops.total_mflops;
      p.ppl = r.perplexity;
      p.acc = r.accuracy;
      p.dropped_token_rate = r.dropped_rate;
      rows.push_back(std::move(p));
    }
  }
  return rows;
}

std::string frontier_point_csv(const FrontierPoint& p) {
  std::string gammas;
  char buf[64];
  for (size_t i = 0; i < p.gamma_values.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g", p.gamma_values[i]);
    if (i) gammas += ';';
    gammas += buf;
  }
  char row[512];
  std::snprintf(row, sizeof(row), "%s,%s,%.17g,%s,%.17g,%.17g,%.17g,%.17g", p.mode.c_str(),
                p.gamma_variant.c_str(), p.budget, gammas.c_str(), p.mflops_per_token, p.ppl,
                p.acc, p.dropped_token_rate);
  return row;
}

void write_sweep_csv(const std::string& path, const std::vector<FrontierPoint>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("sweep: cannot write " + path);
  out << "mode,gamma_variant,budget,gamma_values,mflops_per_token,ppl,acc,dropped_token_rate\n";
  for (const FrontierPoint& p : rows) out << frontier_point_csv(p) << "\n";
}

}  // namespace mose
