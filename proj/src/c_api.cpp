#include "mose/mose_c.h"

#include <cstring>
#include <string>

#include "mose/checkpoint.hpp"
#include "mose/config.hpp"
#include "mose/corpus.hpp"
#include "mose/eval.hpp"
#include "mose/flops.hpp"
#include "mose/train.hpp"
#include "mose/ttt.hpp"

struct mose_run {
  mose::RunConfig cfg;
};

struct mose_model {
  mose::ModelParams<float> params;
};

struct mose_corpus {
  mose::Corpus corpus;
};

namespace {

thread_local std::string g_last_error;

void set_error(const std::string& msg) { g_last_error = msg; }

// Maps the core exception taxonomy onto status codes at the boundary.
template <typename Fn>
mose_status guarded(Fn&& fn) {
  try {
    fn();
    return MOSE_OK;
  } catch (const mose::ShapeError& e) {
    set_error(e.what());
    return MOSE_ERR_SHAPE;
  } catch (const mose::IndexError& e) {
    set_error(e.what());
    return MOSE_ERR_INDEX;
  } catch (const mose::ContractError& e) {
    set_error(e.what());
    return MOSE_ERR_CONTRACT;
  } catch (const mose::IoError& e) {
    set_error(e.what());
    return MOSE_ERR_IO;
  } catch (const mose::FormatError& e) {
    set_error(e.what());
    return MOSE_ERR_FORMAT;
  } catch (const mose::MismatchError& e) {
    set_error(e.what());
    return MOSE_ERR_MISMATCH;
  } catch (const mose::CorpusError& e) {
    set_error(e.what());
    return MOSE_ERR_CORPUS;
  } catch (const mose::NumericError& e) {
    set_error(e.what());
    return MOSE_ERR_NUMERIC;
  } catch (const std::exception& e) {
    set_error(e.what());
    return MOSE_ERR_INTERNAL;
  } catch (...) {
    set_error("unknown failure");
    return MOSE_ERR_INTERNAL;
  }
}

mose_status require(bool ok, const char* what) {
  if (ok) return MOSE_OK;
  set_error(std::string("invalid argument: ") + what);
  return MOSE_ERR_INVALID_ARG;
}

mose::WidthPolicy to_policy(const mose_policy& p, int n_layers) {
  if (p.mode == MOSE_POLICY_UNIFORM) return mose::WidthPolicy::uniform(p.width);
  std::vector<double> gamma;
  if (p.gamma == nullptr || p.gamma_count == 0) {
    gamma.assign(p.layerwise ? static_cast<size_t>(n_layers) : 1, 1.0);
  } else {
    gamma.assign(p.gamma, p.gamma + p.gamma_count);
  }
  return mose::WidthPolicy::router_conditioned(p.budget, std::move(gamma), p.layerwise != 0,
                                               p.discretize != 0);
}

}  // namespace

extern "C" {

const char* mose_status_name(mose_status status) {
  switch (status) {
    case MOSE_OK: return "ok";
    case MOSE_ERR_INVALID_ARG: return "invalid_arg";
    case MOSE_ERR_IO: return "io";
    case MOSE_ERR_FORMAT: return "format";
    case MOSE_ERR_CONTRACT: return "contract";
    case MOSE_ERR_SHAPE: return "shape";
    case MOSE_ERR_INDEX: return "index";
    case MOSE_ERR_MISMATCH: return "mismatch";
    case MOSE_ERR_CORPUS: return "corpus";
    case MOSE_ERR_NUMERIC: return "numeric";
    case MOSE_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* mose_last_error(void) { return g_last_error.c_str(); }

mose_status mose_run_load(const char* json_path, mose_run** out) {
  if (auto s = require(json_path && out, "mose_run_load needs a path and an out pointer")) return s;
  return guarded([&] { *out = new mose_run{mose::RunConfig::load(json_path)}; });
}

mose_status mose_run_default(mose_run** out) {
  if (auto s = require(out != nullptr, "mose_run_default needs an out pointer")) return s;
  return guarded([&] { *out = new mose_run{}; });
}

void mose_run_free(mose_run* run) { delete run; }

mose_status mose_run_set_seed(mose_run* run, uint64_t seed) {
  if (auto s = require(run != nullptr, "null run")) return s;
  run->cfg.seed = seed;
  run->cfg.model.seed = seed;
  return MOSE_OK;
}

mose_status mose_run_set_corpus(mose_run* run, const char* path) {
  if (auto s = require(run && path, "null run or path")) return s;
  run->cfg.corpus_path = path;
  return MOSE_OK;
}

mose_status mose_run_set_out_dir(mose_run* run, const char* path) {
  if (auto s = require(run && path, "null run or path")) return s;
  run->cfg.out_dir = path;
  return MOSE_OK;
}

int mose_run_n_layers(const mose_run* run) { return run ? run->cfg.model.n_layers : 0; }
int mose_run_top_k(const mose_run* run) { return run ? run->cfg.model.top_k : 0; }
const char* mose_run_corpus_path(const mose_run* run) {
  return run ? run->cfg.corpus_path.c_str() : "";
}
const char* mose_run_out_dir(const mose_run* run) { return run ? run->cfg.out_dir.c_str() : ""; }
const char* mose_run_checkpoint_path(const mose_run* run) {
  return run ? run->cfg.checkpoint_path.c_str() : "";
}

mose_status mose_model_init(const mose_run* run, mose_model** out) {
  if (auto s = require(run && out, "null run or out pointer")) return s;
  return guarded([&] { *out = new mose_model{mose::ModelParams<float>::init(run->cfg.model)}; });
}

mose_status mose_model_load(const char* checkpoint_path, mose_model** out) {
  if (auto s = require(checkpoint_path && out, "null path or out pointer")) return s;
  return guarded(
      [&] { *out = new mose_model{mose::Checkpoint::load(checkpoint_path).to_model()}; });
}

mose_status mose_model_save(const mose_model* model, const char* path) {
  if (auto s = require(model && path, "null model or path")) return s;
  return guarded([&] {
    auto& params = const_cast<mose_model*>(model)->params;
    mose::Checkpoint::from_model(params, 0, "").save(path);
  });
}

mose_status mose_model_check_config(const mose_model* model, const mose_run* run) {
  if (auto s = require(model && run, "null model or run")) return s;
  return guarded([&] { mose::Checkpoint::check_compatible(run->cfg.model, model->params.config); });
}

void mose_model_free(mose_model* model) { delete model; }

mose_status mose_corpus_open(const char* path, const mose_run* run, mose_corpus** out) {
  if (auto s = require(path && run && out, "null path, run or out pointer")) return s;
  return guarded(
      [&] { *out = new mose_corpus{mose::Corpus::load(path, run->cfg.model.seq_len)}; });
}

void mose_corpus_free(mose_corpus* corpus) { delete corpus; }

int64_t mose_corpus_train_sequences(const mose_corpus* corpus) {
  return corpus ? corpus->corpus.train_sequences() : 0;
}

int64_t mose_corpus_held_sequences(const mose_corpus* corpus) {
  return corpus ? corpus->corpus.held_sequences() : 0;
}

mose_status mose_train(mose_model* model, const mose_corpus* corpus, const mose_run* run,
                       const char* out_dir) {
  if (auto s = require(model && corpus && run, "null model, corpus or run")) return s;
  return guarded([&] {
    mose::Checkpoint::check_compatible(run->cfg.model, model->params.config);
    const std::string dir = out_dir ? out_dir : run->cfg.out_dir;
    mose::train_loop(model->params, corpus->corpus, run->cfg, dir);
  });
}

mose_status mose_evaluate(const mose_model* model, const mose_corpus* corpus,
                          const mose_policy* policy, mose_eval_result* out) {
  if (auto s = require(model && corpus && policy && out, "null model, corpus, policy or out")) {
    return s;
  }
  return guarded([&] {
    mose::EvalOptions opts;
    opts.k_override = policy->k_override;
    const auto res =
        mose::evaluate(model->params, corpus->corpus, true,
                       to_policy(*policy, model->params.config.n_layers), opts);
    out->perplexity = res.perplexity;
    out->accuracy = res.accuracy;
    out->nll = res.nll;
    out->mflops_per_token = res.flops.total_mflops;
    out->moe_mflops = res.flops.moe_mflops;
    out->attention_mflops = res.flops.attention_mflops;
    out->other_mflops = res.flops.other_mflops;
    out->dropped_rate = res.dropped_rate;
  });
}

mose_status mose_calibrate_gamma(const mose_model* model, const mose_corpus* corpus,
                                 const mose_run* run, double budget, int layerwise,
                                 double* gamma_out, int gamma_capacity, int* gamma_count_out,
                                 double* calib_loss_out) {
  if (auto s = require(model && corpus && run && gamma_out && gamma_count_out,
                       "null model, corpus, run or output pointers")) {
    return s;
  }
  const int needed = layerwise ? model->params.config.n_layers : 1;
  if (auto s = require(gamma_capacity >= needed, "gamma buffer too small")) return s;
  return guarded([&] {
    auto stream = mose::CalibStream::from_corpus(corpus->corpus, run->cfg.calib.n_batches,
                                                 run->cfg.calib.batch_size);
    const auto res = mose::calibrate_gamma(model->params, stream, budget, layerwise != 0,
                                           run->cfg.calib, run->cfg.seed);
    const auto gammas = res.gamma.gammas();
    for (size_t i = 0; i < gammas.size(); ++i) gamma_out[i] = gammas[i];
    *gamma_count_out = static_cast<int>(gammas.size());
    if (calib_loss_out) *calib_loss_out = res.calib_loss;
  });
}

mose_status mose_sweep(const mose_model* model, const mose_corpus* corpus, const mose_run* run,
                       const double* budgets, int budget_count, const char* csv_path) {
  if (auto s = require(model && corpus && run && budgets && budget_count > 0 && csv_path,
                       "null sweep arguments")) {
    return s;
  }
  return guarded([&] {
    mose::SweepOptions opts;
    opts.budgets.assign(budgets, budgets + budget_count);
    opts.seed = run->cfg.seed;
    const auto rows = mose::sweep(model->params, corpus->corpus, run->cfg, opts);
    mose::write_sweep_csv(csv_path, rows);
  });
}

mose_status mose_flops(const mose_run* run, const mose_policy* policy, char* json_out,
                       size_t json_capacity) {
  if (auto s = require(run && policy && json_out && json_capacity > 0, "null flops arguments")) {
    return s;
  }
  return guarded([&] {
    const auto report = mose::model_flops_policy(
        run->cfg.model, to_policy(*policy, run->cfg.model.n_layers), policy->k_override);
    const std::string json = report.to_json().dump();
    if (json.size() + 1 > json_capacity) {
      throw mose::ContractError("flops: JSON output needs " + std::to_string(json.size() + 1) +
                                " bytes, buffer has " + std::to_string(json_capacity));
    }
    std::memcpy(json_out, json.c_str(), json.size() + 1);
  });
}

}  // extern "C"
