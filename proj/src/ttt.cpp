#include "mose/ttt.hpp"

#include <cmath>

namespace mose {

CalibStream CalibStream::from_corpus(const Corpus& corpus, int n_batches, int batch_size) {
  CalibStream stream;
  stream.seq_len_ = corpus.seq_len();
  const int64_t want = static_cast<int64_t>(n_batches) * batch_size;
  const int64_t have = std::min(want, corpus.train_sequences());
  const int64_t first = corpus.train_sequences() - have;  // tail of the train split
  std::vector<int64_t> indices;
  for (int64_t s = 0; s + batch_size <= have; s += batch_size) {
    indices.assign(static_cast<size_t>(batch_size), 0);
    for (int b = 0; b < batch_size; ++b) indices[static_cast<size_t>(b)] = first + s + b;
    CalibBatch batch;
    batch.batch_size = batch_size;
    corpus.gather_batch(false, indices, batch.inputs, batch.targets);
    stream.batches_.push_back(std::move(batch));
  }
  return stream;
}

double ttt_loss(const ModelParams<float>& model, const CalibBatch& batch,
                const GammaParams& gamma, double budget) {
  const ModelConfig& cfg = model.config;
  const WidthPolicy policy =
      WidthPolicy::router_conditioned(budget, gamma.gammas(), gamma.layerwise, true);
  ForwardOptions opts;
  opts.capacity_factor = cfg.capacity_eval;
  const int64_t tlen = cfg.seq_len;
  auto fwd = model_forward(model, batch.inputs, batch.batch_size, tlen, policy, opts);
  return static_cast<double>(cross_entropy_mean(fwd.logits, batch.targets, tlen - 1).item());
}

namespace {
double stream_loss(const ModelParams<float>& model, const CalibStream& stream,
                   const GammaParams& gamma, double budget) {
  double acc = 0.0;
  for (size_t i = 0; i < stream.size(); ++i) {
    acc += ttt_loss(model, stream.batch(i), gamma, budget);
  }
  return acc / static_cast<double>(stream.size());
}
}  // namespace

CalibResult calibrate_gamma(const ModelParams<float>& model, const CalibStream& stream,
                            double budget, bool layerwise, const CalibConfig& cfg, uint64_t seed) {
  if (stream.size() == 0) throw ContractError("calibrate_gamma: empty calibration stream");
  cfg.validate();

  GammaParams g = GammaParams::init(layerwise, model.config.n_layers);
  std::vector<GammaParams> candidates{g};
  const int64_t budget_batches =
      std::min<int64_t>(cfg.n_batches, static_cast<int64_t>(stream.size()) * cfg.max_passes);
  const int64_t snapshot_every = std::max<int64_t>(1, cfg.n_batches / 5);

  Rng rng(seed);
  const size_t dim = g.log_gamma.size();
  std::vector<double> delta(dim);
  for (int64_t t = 0; t < budget_batches; ++t) {
    const CalibBatch& batch = stream.batch(static_cast<size_t>(t) % stream.size());
    for (double& d : delta) d = rng.uniform() < 0.5 ? -1.0 : 1.0;

    GammaParams plus = g, minus = g;
    for (size_t i = 0; i < dim; ++i) {
      plus.log_gamma[i] += cfg.perturbation * delta[i];
      minus.log_gamma[i] -= cfg.perturbation * delta[i];
    }
    const double loss_plus = ttt_loss(model, batch, plus, budget);
    const double loss_minus = ttt_loss(model, batch, minus, budget);
    const double slope = (loss_plus - loss_minus) / (2.0 * cfg.perturbation);
    for (size_t i = 0; i < dim; ++i) g.log_gamma[i] -= cfg.step_size * slope * delta[i];

    if ((t + 1) % snapshot_every == 0) candidates.push_back(g);
  }
  candidates.push_back(g);

  CalibResult result;
  result.batches_used = budget_batches;
  double best = 0.0;
  for (size_t c = 0; c < candidates.size(); ++c) {
    // Skip exact duplicates of an already-scored candidate.
    bool dup = false;
    for (size_t p = 0; p < c && !dup; ++p) dup = candidates[p].log_gamma == candidates[c].log_gamma;
    if (dup) continue;
    const double loss = stream_loss(model, stream, candidates[c], budget);
    if (c == 0) result.init_loss = loss;
    if (c == 0 || loss < best) {
      best = loss;
      result.gamma = candidates[c];
      result.calib_loss = loss;
    }
  }
  return result;
}

}  // namespace mose
