#include "mose/train.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mose/checkpoint.hpp"

namespace mose {

double lr_at(int64_t iter, const TrainConfig& cfg) {
  if (iter < 0) throw ContractError("lr_at: iteration must be non-negative");
  if (iter <= cfg.warmup_iters) {
    if (cfg.warmup_iters == 0) return cfg.peak_lr;
    return cfg.peak_lr * static_cast<double>(iter) / static_cast<double>(cfg.warmup_iters);
  }
  if (iter >= cfg.total_iters) return cfg.min_lr;
  const double frac = static_cast<double>(iter - cfg.warmup_iters) /
                      static_cast<double>(cfg.total_iters - cfg.warmup_iters);
  return cfg.peak_lr + frac * (cfg.min_lr - cfg.peak_lr);
}

WidthPair sample_width_pair(Rng& rng, const WidthGrid& grid) {
  return {grid.w_max, rng.uniform(grid.w_min, grid.w_max)};
}

AdamwState adamw_init(std::vector<NamedParam<float>>& params) {
  AdamwState st;
  st.slots.resize(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    const size_t n = static_cast<size_t>(params[i].tensor.numel());
    st.slots[i].m.assign(n, 0.0f);
    st.slots[i].v.assign(n, 0.0f);
  }
  return st;
}

double clip_gradients(std::vector<NamedParam<float>>& params, double max_norm) {
  double sq = 0.0;
  for (auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (float g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const float scale = static_cast<float>(max_norm / norm);
    for (auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (float& g : p.tensor.grad()) g *= scale;
    }
  }
  return norm;
}

void adamw_update(std::vector<NamedParam<float>>& params, AdamwState& state, double lr,
                  const TrainConfig& cfg) {
  if (state.slots.size() != params.size()) {
    throw ContractError("adamw_update: optimizer state does not match parameter registry");
  }
  state.step_count += 1;
  const double b1 = cfg.beta1;
  const double b2 = cfg.beta2;
  const double bias1 = 1.0 - std::pow(b1, static_cast<double>(state.step_count));
  const double bias2 = 1.0 - std::pow(b2, static_cast<double>(state.step_count));
  constexpr double kEps = 1e-8;

  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.tensor.has_grad()) continue;
    float* w = p.tensor.data();
    const std::vector<float>& g = p.tensor.grad();
    auto& slot = state.slots[i];
    const double wd = p.weight_decay ? cfg.weight_decay : 0.0;
    for (size_t j = 0; j < g.size(); ++j) {
      const double gj = g[j];
      const double m = b1 * slot.m[j] + (1.0 - b1) * gj;
      const double v = b2 * slot.v[j] + (1.0 - b2) * gj * gj;
      slot.m[j] = static_cast<float>(m);
      slot.v[j] = static_cast<float>(v);
      const double mhat = m / bias1;
      const double vhat = v / bias2;
      double wj = w[j];
      wj -= lr * mhat / (std::sqrt(vhat) + kEps);
      wj -= lr * wd * wj;
      w[j] = static_cast<float>(wj);
    }
  }
}

namespace {

void check_pass_finite(const char* pass, double ce, const ForwardResult<float>& fwd) {
  if (!std::isfinite(ce)) {
    throw NumericError(std::string("non-finite language-model loss in ") + pass + " pass");
  }
  for (size_t l = 0; l < fwd.layers.size(); ++l) {
    const RoutingStats& st = fwd.layers[l].stats;
    if (!std::isfinite(st.balance_loss) || !std::isfinite(st.z_loss)) {
      throw NumericError(std::string("non-finite auxiliary loss in ") + pass + " pass at layer " +
                         std::to_string(l));
    }
  }
}

// Mean of the per-layer scalar aux tensors.
Tensor<float> layer_mean(const std::vector<LayerRecord<float>>& layers, bool balance) {
  Tensor<float> acc = balance ? layers[0].balance : layers[0].zloss;
  for (size_t l = 1; l < layers.size(); ++l) {
    acc = add(acc, balance ? layers[l].balance : layers[l].zloss);
  }
  return scale(acc, 1.0 / static_cast<double>(layers.size()));
}

}  // namespace

StepReport train_step(ModelParams<float>& model, const Corpus& corpus, const TrainConfig& cfg,
                      Rng& rng, AdamwState& optim, int64_t iter) {
  const WidthPair widths = sample_width_pair(rng, model.config.grid());
  std::vector<int32_t> inputs, targets;
  corpus.sample_train_batch(rng, cfg.batch_size, inputs, targets);
  return sandwich_step(model, inputs, targets, cfg.batch_size, corpus.seq_len(), cfg, widths,
                       optim, iter);
}

StepReport sandwich_step(ModelParams<float>& model, const std::vector<int32_t>& inputs,
                         const std::vector<int32_t>& targets, int64_t bsz, int64_t tlen,
                         const TrainConfig& cfg, const WidthPair& widths, AdamwState& optim,
                         int64_t iter) {
  const ModelConfig& mc = model.config;
  auto params = model.named_params();
  for (auto& p : params) p.tensor.drop_grad();

  Tape<float> tape;
  StepReport rep;
  rep.iter = iter;
  rep.lr = lr_at(iter, cfg);
  rep.sampled_width = widths.sampled;
  {
    Tape<float>::Scope scope(tape);
    ForwardOptions opts;
    opts.capacity_factor = mc.capacity_train;

    auto full = model_forward(model, inputs, bsz, tlen, WidthPolicy::uniform(widths.full), opts);
    auto ce_full = cross_entropy_mean(full.logits, targets, tlen - 1);
    check_pass_finite("full-width", ce_full.item(), full);

    auto sampled =
        model_forward(model, inputs, bsz, tlen, WidthPolicy::uniform(widths.sampled), opts);
    auto ce_sampled = cross_entropy_mean(sampled.logits, targets, tlen - 1);
    check_pass_finite("sampled-width", ce_sampled.item(), sampled);

    auto balance = scale(add(layer_mean(full.layers, true), layer_mean(sampled.layers, true)), 0.5);
    auto zloss = scale(add(layer_mean(full.layers, false), layer_mean(sampled.layers, false)), 0.5);
    auto lm = scale(add(ce_full, ce_sampled), 0.5);
    auto total =
        add(lm, add(scale(balance, cfg.balance_coef), scale(zloss, cfg.z_coef)));

    rep.loss_full = ce_full.item();
    rep.loss_sampled = ce_sampled.item();
    rep.balance_loss = balance.item();
    rep.z_loss = zloss.item();
    rep.total_loss = total.item();
    if (!std::isfinite(rep.total_loss)) {
      throw NumericError("non-finite combined training loss");
    }

    tape.backward(total);
  }

  rep.grad_norm = clip_gradients(params, cfg.grad_clip);
  adamw_update(params, optim, rep.lr, cfg);
  return rep;
}

TrainSummary train_loop(ModelParams<float>& model, const Corpus& corpus, const RunConfig& run,
                        const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const std::string log_path = out_dir + "/train_log.csv";
  std::ofstream log(log_path);
  if (!log) throw IoError("train: cannot write " + log_path);
  log << "iter,lr,loss_full,loss_sampled,balance_loss,z_loss,grad_norm\n";

  Rng rng(run.seed);
  auto params = model.named_params();
  AdamwState optim = adamw_init(params);

  TrainSummary summary;
  char row[512];
  for (int64_t iter = 0; iter < run.train.total_iters; ++iter) {
    StepReport rep = train_step(model, corpus, run.train, rng, optim, iter);
    std::snprintf(row, sizeof(row), "%" PRId64 ",%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", rep.iter,
                  rep.lr, rep.loss_full, rep.loss_sampled, rep.balance_loss, rep.z_loss,
                  rep.grad_norm);
    log << row;
    summary.final_loss_full = rep.loss_full;

    if ((iter + 1) % run.train.checkpoint_interval == 0 && iter + 1 < run.train.total_iters) {
      char name[64];
      std::snprintf(name, sizeof(name), "/checkpoint_%06" PRId64 ".mose", iter + 1);
      Checkpoint::from_model(model, iter + 1, rng.serialize()).save(out_dir + name);
    }
    if (iter % 100 == 0 || iter + 1 == run.train.total_iters) {
      std::fprintf(stderr, "iter %" PRId64 "/%" PRId64 "  loss_full %.4f  loss_w %.4f\n", iter,
                   run.train.total_iters, rep.loss_full, rep.loss_sampled);
    }
  }

  summary.iters = run.train.total_iters;
  summary.checkpoint_path = out_dir + "/checkpoint_final.mose";
  Checkpoint::from_model(model, run.train.total_iters, rng.serialize())
      .save(summary.checkpoint_path);
  summary.log_path = log_path;
  return summary;
}

}  // namespace mose
