#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <span>
#include <vector>

#include "mose/ops.hpp"
#include "mose/routing.hpp"
#include "mose/width.hpp"

namespace mose {

template <typename S>
struct RouterParams {
  Tensor<S> w_gate;  // [d x n]
};

// Two-layer FFN expert with a 4x expansion; widths slice the hidden prefix.
template <typename S>
struct ExpertParams {
  Tensor<S> w_up;    // [d x 4d]
  Tensor<S> b_up;    // [4d]
  Tensor<S> w_down;  // [4d x d]
  Tensor<S> b_down;  // [d]
};

template <typename S>
struct RouteResult {
  GateDecision decision;
  Tensor<S> gate_probs;     // [N x n] softmax over all experts (on tape)
  Tensor<S> router_logits;  // [N x n]
};

// Gate scores over all experts plus top-k selection. Ties break toward the
// lower expert index; renormalized probabilities cover the selected set.
template <typename S>
RouteResult<S> route(const Tensor<S>& x, const RouterParams<S>& router, int k) {
  const int64_t n_tokens = x.dim(0);
  const int n = static_cast<int>(router.w_gate.dim(1));
  if (k < 1 || k > n) throw ContractError("route: need 1 <= k <= n_experts");

  RouteResult<S> out;
  out.router_logits = matmul(x, router.w_gate);
  out.gate_probs = softmax_lastdim(out.router_logits);

  GateDecision& dec = out.decision;
  dec.tokens = n_tokens;
  dec.n_experts = n;
  dec.k = k;
  dec.expert.resize(static_cast<size_t>(n_tokens) * k);
  dec.gate.resize(static_cast<size_t>(n_tokens) * k);
  dec.renorm.resize(static_cast<size_t>(n_tokens) * k);

  const S* probs = out.gate_probs.data();
  std::vector<int32_t> order(static_cast<size_t>(n));
  for (int64_t t = 0; t < n_tokens; ++t) {
    const S* row = probs + t * n;
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [row](int32_t a, int32_t b) { return row[a] > row[b]; });
    double denom = 0.0;
    for (int s = 0; s < k; ++s) denom += static_cast<double>(row[order[static_cast<size_t>(s)]]);
    for (int s = 0; s < k; ++s) {
      const int32_t e = order[static_cast<size_t>(s)];
      dec.expert[static_cast<size_t>(t * k + s)] = e;
      dec.gate[static_cast<size_t>(t * k + s)] = static_cast<double>(row[e]);
      dec.renorm[static_cast<size_t>(t * k + s)] = static_cast<double>(row[e]) / denom;
    }
  }
  return out;
}

namespace detail {
// Shared arithmetic of the sliced expert: phi(x W_up[:, :m] + b_up[:m]) W_down[:m, :] + b_down.
template <typename S>
Tensor<S> expert_apply(const ExpertParams<S>& e, const Tensor<S>& rows, int64_t m) {
  auto up = slice_cols(e.w_up, m);
  auto bu = slice_prefix(e.b_up, m);
  auto h = gelu(bias_add(matmul(rows, up), bu));
  auto down = slice_rows(e.w_down, m);
  return bias_add(matmul(h, down), e.b_down);
}

// Full-width expert written against the unsliced parameters; the standard-MoE
// execution route.
template <typename S>
Tensor<S> expert_apply_full(const ExpertParams<S>& e, const Tensor<S>& rows) {
  auto h = gelu(bias_add(matmul(rows, e.w_up), e.b_up));
  return bias_add(matmul(h, e.w_down), e.b_down);
}
}  // namespace detail

// Width-w forward of one expert over x [N x d].
template <typename S>
Tensor<S> expert_forward(const ExpertParams<S>& e, const Tensor<S>& x, double w, double w_min) {
  if (w < w_min - 1e-12 || w > 1.0 + 1e-12) {
    throw ContractError("expert_forward: width " + std::to_string(w) + " outside [" +
                        std::to_string(w_min) + ", 1]");
  }
  const int d = static_cast<int>(e.w_up.dim(0));
  return detail::expert_apply(e, x, active_hidden_size(w, d));
}

template <typename S>
struct MoeLayerOutput {
  Tensor<S> y;              // [N x d]
  Tensor<S> gate_probs;     // [N x n]
  Tensor<S> router_logits;  // [N x n]
  RoutingStats stats;
};

namespace detail {
// Capacity filter: assignments are honored in token order, first-come within
// each expert; overflow slots are dropped and contribute zero.
inline std::vector<uint8_t> apply_capacity(const GateDecision& dec, int64_t capacity,
                                           int64_t* dropped) {
  std::vector<uint8_t> kept(dec.expert.size(), 1);
  std::vector<int64_t> used(static_cast<size_t>(dec.n_experts), 0);
  *dropped = 0;
  for (size_t slot = 0; slot < dec.expert.size(); ++slot) {
    const int32_t e = dec.expert[slot];
    if (used[static_cast<size_t>(e)] < capacity) {
      ++used[static_cast<size_t>(e)];
    } else {
      kept[slot] = 0;
      ++*dropped;
    }
  }
  return kept;
}

inline void fill_stats(RoutingStats& st, const GateDecision& dec,
                       const std::vector<double>& mean_prob, const std::vector<double>& widths,
                       const std::vector<uint8_t>& kept, int64_t capacity, int64_t dropped) {
  st.tokens = dec.tokens;
  st.n_experts = dec.n_experts;
  st.k = dec.k;
  st.capacity = capacity;
  st.assignments.assign(static_cast<size_t>(dec.n_experts), 0);
  for (int32_t e : dec.expert) ++st.assignments[static_cast<size_t>(e)];
  st.mean_gate_prob = mean_prob;
  st.dropped = dropped;
  st.widths = widths;
  st.kept = kept;
  st.slot_expert = dec.expert;
}

template <typename S>
std::vector<double> column_means(const Tensor<S>& probs) {
  const int64_t rows = probs.dim(0);
  const int64_t cols = probs.dim(1);
  std::vector<double> m(static_cast<size_t>(cols), 0.0);
  const S* p = probs.data();
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t c = 0; c < cols; ++c) m[static_cast<size_t>(c)] += static_cast<double>(p[r * cols + c]);
  }
  for (double& v : m) v /= static_cast<double>(rows);
  return m;
}
}  // namespace detail

// Combine step shared by the slimmable and the reference routes. Execution
// groups kept slots into (expert, active hidden size) buckets; bucket order
// is expert-ascending then width-ascending, and tokens keep batch order
// inside a bucket, so the accumulation order is pinned.
template <typename S>
MoeLayerOutput<S> moe_dispatch_and_combine(const std::vector<ExpertParams<S>>& experts,
                                           const Tensor<S>& x, RouteResult<S> routed,
                                           const std::vector<double>& widths, double w_min,
                                           int64_t capacity, bool reference_full_width) {
  const int64_t n_tokens = x.dim(0);
  const int64_t d = x.dim(1);
  const GateDecision& dec = routed.decision;
  if (static_cast<int64_t>(widths.size()) != n_tokens * dec.k) {
    throw ContractError("moe layer: need one width per (token, selected expert) pair");
  }
  for (double w : widths) {
    if (w < w_min - 1e-12 || w > 1.0 + 1e-12) {
      throw ContractError("moe layer: width " + std::to_string(w) + " outside [" +
                          std::to_string(w_min) + ", 1]");
    }
  }

  int64_t dropped = 0;
  std::vector<uint8_t> kept = detail::apply_capacity(dec, capacity, &dropped);

  // (expert, m) buckets; slot indices stay in token order.
  std::map<std::pair<int32_t, int64_t>, std::vector<int64_t>> buckets;
  for (int64_t slot = 0; slot < static_cast<int64_t>(dec.expert.size()); ++slot) {
    if (!kept[static_cast<size_t>(slot)]) continue;
    const int64_t m = reference_full_width
                          ? 4 * d
                          : active_hidden_size(widths[static_cast<size_t>(slot)], static_cast<int>(d));
    buckets[{dec.expert[static_cast<size_t>(slot)], m}].push_back(slot);
  }

  std::vector<ScatterGroup<S>> groups;
  groups.reserve(buckets.size());
  for (const auto& [key, slots] : buckets) {
    const auto& [expert_id, m] = key;
    std::vector<int32_t> token_rows(slots.size());
    std::vector<int32_t> expert_cols(slots.size(), expert_id);
    for (size_t i = 0; i < slots.size(); ++i) token_rows[i] = static_cast<int32_t>(slots[i] / dec.k);

    auto rows = gather_rows(x, token_rows);
    auto y_e = reference_full_width
                   ? detail::expert_apply_full(experts[static_cast<size_t>(expert_id)], rows)
                   : detail::expert_apply(experts[static_cast<size_t>(expert_id)], rows, m);
    auto gates = gather_entries(routed.gate_probs, token_rows, expert_cols);
    groups.push_back({std::move(token_rows), rowwise_mul(y_e, gates)});
  }

  MoeLayerOutput<S> out;
  out.y = scatter_add_groups(n_tokens, d, groups);
  out.gate_probs = routed.gate_probs;
  out.router_logits = routed.router_logits;
  detail::fill_stats(out.stats, dec, detail::column_means(routed.gate_probs), widths, kept,
                     capacity, dropped);
  return out;
}

// MoSE layer: y = sum_{i in S(x)} G(x)_i * E_i^{w_i(x)}(x), capacity-limited.
template <typename S>
MoeLayerOutput<S> mose_layer_forward(const RouterParams<S>& router,
                                     const std::vector<ExpertParams<S>>& experts,
                                     const Tensor<S>& x, const std::vector<double>& widths,
                                     double w_min, double capacity_factor, int k) {
  RouteResult<S> routed = route(x, router, k);
  const int64_t cap = expert_capacity(x.dim(0), static_cast<int>(experts.size()), k, capacity_factor);
  return moe_dispatch_and_combine(experts, x, std::move(routed), widths, w_min, cap, false);
}

// Standard-MoE execution route: identical routing and capacity handling, but
// experts run unsliced at full width.
template <typename S>
MoeLayerOutput<S> moe_layer_forward_reference(const RouterParams<S>& router,
                                              const std::vector<ExpertParams<S>>& experts,
                                              const Tensor<S>& x, double capacity_factor, int k) {
  RouteResult<S> routed = route(x, router, k);
  const int64_t cap = expert_capacity(x.dim(0), static_cast<int>(experts.size()), k, capacity_factor);
  const std::vector<double> widths(static_cast<size_t>(x.dim(0)) * static_cast<size_t>(k), 1.0);
  return moe_dispatch_and_combine(experts, x, std::move(routed), widths, 1.0, cap, true);
}

// Switch-style load balance loss: n * sum_i (f_i / k) * P_i. f_i counts
// pre-drop token assignments (constant), P_i is the differentiable batch mean
// of the full softmax. Equals 1 under perfect balance.
template <typename S>
Tensor<S> load_balance_loss(const Tensor<S>& gate_probs, const std::vector<int64_t>& assignments,
                            int k) {
  const int64_t n_tokens = gate_probs.dim(0);
  const int64_t n = gate_probs.dim(1);
  if (n_tokens < 1) throw ContractError("load_balance_loss: empty batch");
  if (static_cast<int64_t>(assignments.size()) != n) {
    throw ContractError("load_balance_loss: assignment counts do not match expert count");
  }
  std::vector<S> frac(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    frac[static_cast<size_t>(i)] = static_cast<S>(static_cast<double>(assignments[static_cast<size_t>(i)]) /
                                                  static_cast<double>(n_tokens));
  }
  auto f = Tensor<S>::from_vector({n}, std::move(frac));
  auto p_mean = mean_over_rows(gate_probs);
  return scale(sum_all(mul(p_mean, f)), static_cast<double>(n) / static_cast<double>(k));
}

// Router z-loss: mean over tokens of (logsumexp over experts)^2.
template <typename S>
Tensor<S> router_z_loss(const Tensor<S>& router_logits) {
  const int64_t n_tokens = router_logits.dim(0);
  auto lse = logsumexp_lastdim(router_logits);
  return scale(sum_all(mul(lse, lse)), 1.0 / static_cast<double>(n_tokens));
}

}  // namespace mose
