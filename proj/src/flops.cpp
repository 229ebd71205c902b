#include "mose/flops.hpp"

namespace mose {

nlohmann::json FlopsReport::to_json() const {
  return nlohmann::json{{"moe_mflops", moe_mflops},
                        {"attention_mflops", attention_mflops},
                        {"other_mflops", other_mflops},
                        {"total_mflops", total_mflops}};
}

double expert_flops(int model_dim, double width) {
  if (!(width > 0.0) || width > 1.0 + 1e-12) {
    throw ContractError("expert_flops: width must lie in (0, 1]");
  }
  const double m = static_cast<double>(active_hidden_size(width, model_dim));
  return 4.0 * static_cast<double>(model_dim) * m;
}

double router_flops(const ModelConfig& cfg) {
  return 2.0 * static_cast<double>(cfg.model_dim) * static_cast<double>(cfg.n_experts);
}

double attention_flops_per_layer(const ModelConfig& cfg) {
  const double d = cfg.model_dim;
  const double proj = 16.0 * d * d;
  // mean causal context length over positions 0..T-1 is (T+1)/2
  const double avg_ctx = (static_cast<double>(cfg.seq_len) + 1.0) / 2.0;
  return proj + 4.0 * d * avg_ctx;
}

double head_flops(const ModelConfig& cfg) {
  return 2.0 * static_cast<double>(cfg.model_dim) * static_cast<double>(cfg.vocab);
}

namespace {
FlopsReport assemble(const ModelConfig& cfg, double moe_per_token) {
  FlopsReport r;
  r.moe_mflops = moe_per_token / 1e6;
  r.attention_mflops = static_cast<double>(cfg.n_layers) * attention_flops_per_layer(cfg) / 1e6;
  r.other_mflops = head_flops(cfg) / 1e6;
  r.total_mflops = r.moe_mflops + r.attention_mflops + r.other_mflops;
  return r;
}
}  // namespace

FlopsReport model_flops_uniform(const ModelConfig& cfg, double width, int k_override) {
  const int k = k_override > 0 ? k_override : cfg.top_k;
  const double per_layer = static_cast<double>(k) * expert_flops(cfg.model_dim, width) + router_flops(cfg);
  return assemble(cfg, static_cast<double>(cfg.n_layers) * per_layer);
}

FlopsReport model_flops_policy(const ModelConfig& cfg, const WidthPolicy& policy, int k_override) {
  const int k = k_override > 0 ? k_override : cfg.top_k;
  double width = policy.width;
  if (policy.mode == WidthPolicy::Mode::kRouterConditioned) {
    // Balanced routing: q_i = 1/k regardless of gamma, so every selected
    // expert runs at the projected budget/k.
    width = cfg.grid().project(policy.budget / static_cast<double>(k), policy.discretize);
  }
  return model_flops_uniform(cfg, width, k);
}

FlopsReport model_flops_realized(const ModelConfig& cfg, double moe_flops_per_token) {
  return assemble(cfg, moe_flops_per_token);
}

double layer_moe_flops_total(const ModelConfig& cfg, const RoutingStats& stats) {
  double total = static_cast<double>(stats.tokens) * router_flops(cfg);
  for (size_t slot = 0; slot < stats.widths.size(); ++slot) {
    if (!stats.kept[slot]) continue;  // dropped assignments are not charged
    total += expert_flops(cfg.model_dim, stats.widths[slot]);
  }
  return total;
}

}  // namespace mose
