#pragma once

#include <string>
#include <vector>

#include "mose/config.hpp"
#include "mose/corpus.hpp"
#include "mose/model.hpp"

namespace mose {

// Linear warmup 0 -> peak over warmup_iters, then linear decay to min_lr at
// total_iters, constant afterwards.
double lr_at(int64_t iter, const TrainConfig& cfg);

// Two-width sandwich draw: (w_max = 1.0, w ~ Uniform(w_min, w_max)).
struct WidthPair {
  double full;
  double sampled;
};
WidthPair sample_width_pair(Rng& rng, const WidthGrid& grid);

struct AdamwState {
  struct Slot {
    std::vector<float> m;
    std::vector<float> v;
  };
  std::vector<Slot> slots;  // aligned with the parameter registry
  int64_t step_count = 0;
};

AdamwState adamw_init(std::vector<NamedParam<float>>& params);

// Decoupled weight decay with bias correction; decay only applies where the
// registry says so. Parameters without a gradient this step are skipped.
void adamw_update(std::vector<NamedParam<float>>& params, AdamwState& state, double lr,
                  const TrainConfig& cfg);

// Scales all gradients so the global norm is at most max_norm; returns the
// pre-clip norm.
double clip_gradients(std::vector<NamedParam<float>>& params, double max_norm);

struct StepReport {
  int64_t iter = 0;
  double lr = 0.0;
  double loss_full = 0.0;
  double loss_sampled = 0.0;
  double balance_loss = 0.0;  // mean over layers and both passes
  double z_loss = 0.0;
  double grad_norm = 0.0;     // pre-clip
  double total_loss = 0.0;
  double sampled_width = 0.0;
};

// One sandwich step: L = (L_LM(1) + L_LM(w))/2 + coef-weighted aux means,
// single backward, clip, AdamW update.
StepReport train_step(ModelParams<float>& model, const Corpus& corpus, const TrainConfig& cfg,
                      Rng& rng, AdamwState& optim, int64_t iter);

// The same step on an explicit batch and width pair.
StepReport sandwich_step(ModelParams<float>& model, const std::vector<int32_t>& inputs,
                         const std::vector<int32_t>& targets, int64_t batch_size, int64_t seq_len,
                         const TrainConfig& cfg, const WidthPair& widths, AdamwState& optim,
                         int64_t iter);

struct TrainSummary {
  int64_t iters = 0;
  double final_loss_full = 0.0;
  std::string log_path;
  std::string checkpoint_path;
};

// Full run: training-log CSV plus periodic and final checkpoints under
// out_dir. Progress lines go to stderr.
TrainSummary train_loop(ModelParams<float>& model, const Corpus& corpus, const RunConfig& run,
                        const std::string& out_dir);

}  // namespace mose
