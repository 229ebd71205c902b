#include "mose/width.hpp"

#include <algorithm>
#include <cmath>

namespace mose {

namespace {
constexpr double kTickScale = 10000.0;

int64_t to_ticks(double v) { return std::llround(v * kTickScale); }
}  // namespace

WidthGrid WidthGrid::make(double w_min, double w_max, double step) {
  if (!(w_min > 0.0) || !(w_min < w_max)) {
    throw ContractError("WidthGrid: need 0 < w_min < w_max");
  }
  if (w_max != 1.0) throw ContractError("WidthGrid: w_max must be 1.0");
  if (!(step > 0.0)) throw ContractError("WidthGrid: step must be positive");

  const int64_t lo = to_ticks(w_min);
  const int64_t hi = to_ticks(w_max);
  const int64_t st = to_ticks(step);
  if (st <= 0 || (hi - lo) % st != 0) {
    throw ContractError("WidthGrid: step must divide the [w_min, w_max] range");
  }
  WidthGrid g;
  g.w_min = static_cast<double>(lo) / kTickScale;
  g.w_max = static_cast<double>(hi) / kTickScale;
  g.step = static_cast<double>(st) / kTickScale;
  for (int64_t t = lo; t <= hi; t += st) g.values.push_back(static_cast<double>(t) / kTickScale);
  return g;
}

double WidthGrid::project(double w, bool discretize) const {
  double v = std::clamp(w, w_min, w_max);
  if (!discretize) return v;
  // Nearest grid value; ties round toward the larger width.
  const double pos = (v - w_min) / step;
  auto lo = static_cast<size_t>(std::floor(pos));
  lo = std::min(lo, values.size() - 1);
  if (lo + 1 >= values.size()) return values[lo];
  const double d_lo = v - values[lo];
  const double d_hi = values[lo + 1] - v;
  return (d_hi <= d_lo + 1e-12) ? values[lo + 1] : values[lo];
}

WidthPolicy WidthPolicy::uniform(double w) {
  WidthPolicy p;
  p.mode = Mode::kUniform;
  p.width = w;
  return p;
}

WidthPolicy WidthPolicy::router_conditioned(double budget, std::vector<double> gamma,
                                            bool layerwise, bool discretize) {
  WidthPolicy p;
  p.mode = Mode::kRouterConditioned;
  p.budget = budget;
  p.gamma = std::move(gamma);
  p.layerwise = layerwise;
  p.discretize = discretize;
  return p;
}

double WidthPolicy::gamma_for_layer(int layer) const {
  if (!layerwise) return gamma.at(0);
  return gamma.at(static_cast<size_t>(layer));
}

void WidthPolicy::validate(const WidthGrid& grid, int top_k, int n_layers) const {
  if (mode == Mode::kUniform) {
    if (!grid.contains(width)) {
      throw ContractError("WidthPolicy: uniform width " + std::to_string(width) +
                          " outside [" + std::to_string(grid.w_min) + ", " +
                          std::to_string(grid.w_max) + "]");
    }
    return;
  }
  if (!(budget > 0.0) || budget > static_cast<double>(top_k) + 1e-12) {
    throw ContractError("WidthPolicy: budget " + std::to_string(budget) +
                        " outside (0, k=" + std::to_string(top_k) + "]");
  }
  const size_t expected = layerwise ? static_cast<size_t>(n_layers) : 1;
  if (gamma.size() != expected) {
    throw ContractError("WidthPolicy: expected " + std::to_string(expected) +
                        " gamma value(s), got " + std::to_string(gamma.size()));
  }
  for (double g : gamma) {
    if (!(g > 0.0)) throw ContractError("WidthPolicy: gamma must be positive");
  }
}

std::string WidthPolicy::mode_name() const {
  return mode == Mode::kUniform ? "uniform" : "routercond";
}

std::vector<double> sharpen(std::span<const double> p, double gamma) {
  if (!(gamma > 0.0)) throw ContractError("sharpen: gamma must be positive");
  if (p.empty()) throw ContractError("sharpen: empty probability vector");
  std::vector<double> q(p.size());
  double total = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    const double pi = std::max(p[i], 1e-12);
    q[i] = std::pow(pi, gamma);
    total += q[i];
  }
  for (double& v : q) v /= total;
  return q;
}

std::vector<double> budgeted_widths(std::span<const double> q, double budget) {
  if (!(budget > 0.0)) throw ContractError("budgeted_widths: budget must be positive");
  std::vector<double> w(q.size());
  for (size_t i = 0; i < q.size(); ++i) w[i] = budget * q[i];
  return w;
}

double project_width(double w_tilde, const WidthGrid& grid, bool discretize) {
  return grid.project(w_tilde, discretize);
}

std::vector<double> assign_widths(const GateDecision& decision, const WidthPolicy& policy,
                                  int layer, const WidthGrid& grid) {
  const int64_t slots = decision.tokens * decision.k;
  std::vector<double> out(static_cast<size_t>(slots));
  if (policy.mode == WidthPolicy::Mode::kUniform) {
    std::fill(out.begin(), out.end(), policy.width);
    return out;
  }
  const double gamma = policy.gamma_for_layer(layer);
  std::vector<double> p(static_cast<size_t>(decision.k));
  for (int64_t t = 0; t < decision.tokens; ++t) {
    for (int s = 0; s < decision.k; ++s) p[static_cast<size_t>(s)] = decision.renorm[static_cast<size_t>(t * decision.k + s)];
    const std::vector<double> q = sharpen(p, gamma);
    const std::vector<double> wt = budgeted_widths(q, policy.budget);
    for (int s = 0; s < decision.k; ++s) {
      out[static_cast<size_t>(t * decision.k + s)] = grid.project(wt[static_cast<size_t>(s)], policy.discretize);
    }
  }
  return out;
}

}  // namespace mose
