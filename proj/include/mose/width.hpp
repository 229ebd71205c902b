#pragma once

#include <span>
#include <string>
#include <vector>

#include "mose/routing.hpp"

namespace mose {

// Discrete width multipliers {w_min, w_min+step, ..., w_max}. Grid values are
// built from integer ticks (1/10000ths) so repeated construction is exact.
struct WidthGrid {
  double w_min = 0.25;
  double w_max = 1.0;
  double step = 0.05;
  std::vector<double> values;

  static WidthGrid make(double w_min, double w_max, double step);

  // Clamp to [w_min, w_max]; when discretize, round to the nearest grid
  // value with ties toward the larger width.
  double project(double w, bool discretize) const;

  bool contains(double w) const { return w >= w_min - 1e-12 && w <= w_max + 1e-12; }
};

// Inference-time width assignment strategy.
struct WidthPolicy {
  enum class Mode { kUniform, kRouterConditioned };

  Mode mode = Mode::kUniform;
  double width = 1.0;          // uniform mode
  double budget = 1.0;         // Gamma, in full-expert widths
  bool discretize = true;
  bool layerwise = false;      // gamma per transformer block vs shared scalar
  std::vector<double> gamma{1.0};

  static WidthPolicy uniform(double w);
  static WidthPolicy router_conditioned(double budget, std::vector<double> gamma, bool layerwise,
                                        bool discretize);

  double gamma_for_layer(int layer) const;
  void validate(const WidthGrid& grid, int top_k, int n_layers) const;
  std::string mode_name() const;
};

// q_i = p_i^gamma / sum_j p_j^gamma. Probabilities are floored at 1e-12
// before powering so gamma < 1 cannot hit 0^gamma.
std::vector<double> sharpen(std::span<const double> p, double gamma);

// w~_i = budget * q_i (sums to the budget before projection).
std::vector<double> budgeted_widths(std::span<const double> q, double budget);

double project_width(double w_tilde, const WidthGrid& grid, bool discretize);

// Realized widths for every (token, slot) of a routed batch under a policy.
std::vector<double> assign_widths(const GateDecision& decision, const WidthPolicy& policy,
                                  int layer, const WidthGrid& grid);

}  // namespace mose
