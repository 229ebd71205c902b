#pragma once

#include "mose/config.hpp"
#include "mose/routing.hpp"
#include "mose/width.hpp"

#include <json.hpp>

namespace mose {

// Analytic per-token forward cost. Convention: 2 FLOPs per multiply-accumulate
// of the matmuls; bias adds, nonlinearities, layer norms and embedding lookups
// count zero. Ratios and frontier shapes do not depend on the convention.
struct FlopsReport {
  double moe_mflops = 0.0;
  double attention_mflops = 0.0;
  double other_mflops = 0.0;
  double total_mflops = 0.0;

  nlohmann::json to_json() const;
};

// One expert at width w: 4 * d * m(w) FLOPs per token (up and down slices).
double expert_flops(int model_dim, double width);

// Router score cost per token per layer: 2 * d * n.
double router_flops(const ModelConfig& cfg);

// Attention cost per token per layer: QKV/out projections (16 d^2) plus
// score/value products 4 * d * ctx averaged over the causal context lengths.
double attention_flops_per_layer(const ModelConfig& cfg);

// LM head: 2 * d * V per token.
double head_flops(const ModelConfig& cfg);

// All active experts at the same width.
FlopsReport model_flops_uniform(const ModelConfig& cfg, double width, int k_override = 0);

// Policy expectation without data: assumes balanced router probabilities, so
// router-conditioned budgets reduce to the projected per-expert width
// budget/k.
FlopsReport model_flops_policy(const ModelConfig& cfg, const WidthPolicy& policy,
                               int k_override = 0);

// Report from measured per-token MoE FLOPs (dropped assignments not charged).
FlopsReport model_flops_realized(const ModelConfig& cfg, double moe_flops_per_token);

// Kept-slot expert cost of one routed layer, totalled over the batch.
double layer_moe_flops_total(const ModelConfig& cfg, const RoutingStats& stats);

}  // namespace mose
