#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "mose/error.hpp"

namespace mose {

// Active hidden size m(w) = ceil(w * 4d): how many intermediate units of an
// expert run at width multiplier w.
inline int64_t active_hidden_size(double w, int model_dim) {
  if (w <= 0.0) throw ContractError("active_hidden_size: width must be positive");
  if (model_dim <= 0) throw ContractError("active_hidden_size: model_dim must be positive");
  return static_cast<int64_t>(std::ceil(w * 4.0 * static_cast<double>(model_dim)));
}

// Per-expert token quota: ceil(capacity_factor * tokens * k / n).
inline int64_t expert_capacity(int64_t tokens, int n_experts, int k, double capacity_factor) {
  if (tokens <= 0 || n_experts <= 0 || k <= 0 || capacity_factor <= 0.0) {
    throw ContractError("expert_capacity: all arguments must be positive");
  }
  const double slots = capacity_factor * static_cast<double>(tokens) * static_cast<double>(k) /
                       static_cast<double>(n_experts);
  return static_cast<int64_t>(std::ceil(slots));
}

// Top-k routing outcome for a batch of tokens, slot-major: slot s of token t
// lives at index t*k + s, slots ordered by descending gate value (ties to the
// lower expert index).
struct GateDecision {
  int64_t tokens = 0;
  int n_experts = 0;
  int k = 0;
  std::vector<int32_t> expert;  // [tokens * k] selected expert ids
  std::vector<double> gate;     // [tokens * k] softmax-over-all-experts values
  std::vector<double> renorm;   // [tokens * k] p_i renormalized over the selected set

  // G(x) as a dense [tokens x n] matrix, zero outside the selected set.
  std::vector<double> dense_gates() const {
    std::vector<double> g(static_cast<size_t>(tokens) * static_cast<size_t>(n_experts), 0.0);
    for (int64_t t = 0; t < tokens; ++t) {
      for (int s = 0; s < k; ++s) {
        g[static_cast<size_t>(t * n_experts + expert[static_cast<size_t>(t * k + s)])] =
            gate[static_cast<size_t>(t * k + s)];
      }
    }
    return g;
  }
};

// Per-layer routing bookkeeping filled during a forward pass. Assignment
// counts are pre-drop (every token contributes k), so sum(f_i) == k.
struct RoutingStats {
  int64_t tokens = 0;
  int n_experts = 0;
  int k = 0;
  int64_t capacity = 0;
  std::vector<int64_t> assignments;  // per expert, before capacity drops
  std::vector<double> mean_gate_prob;  // P_i: batch mean of the full softmax
  int64_t dropped = 0;               // assignments beyond capacity
  std::vector<double> widths;        // [tokens * k] realized width per slot
  std::vector<uint8_t> kept;         // [tokens * k] 0 when dropped
  std::vector<int32_t> slot_expert;  // [tokens * k]
  double balance_loss = 0.0;         // numeric copies for reporting
  double z_loss = 0.0;

  double dropped_fraction() const {
    const int64_t total = tokens * k;
    return total > 0 ? static_cast<double>(dropped) / static_cast<double>(total) : 0.0;
  }
};

}  // namespace mose
