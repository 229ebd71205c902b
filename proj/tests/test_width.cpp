#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mose/rng.hpp"
#include "mose/width.hpp"

using mose::WidthGrid;
using mose::WidthPolicy;

TEST_CASE("width grid construction") {
  auto g = WidthGrid::make(0.25, 1.0, 0.05);
  CHECK(g.values.size() == 16);
  CHECK(g.values.front() == 0.25);
  CHECK(g.values.back() == 1.0);
  for (size_t i = 1; i < g.values.size(); ++i) CHECK(g.values[i] > g.values[i - 1]);

  CHECK_THROWS_AS(WidthGrid::make(0.0, 1.0, 0.05), mose::ContractError);
  CHECK_THROWS_AS(WidthGrid::make(0.25, 0.9, 0.05), mose::ContractError);   // w_max must be 1
  CHECK_THROWS_AS(WidthGrid::make(0.25, 1.0, 0.07), mose::ContractError);   // step must divide
  CHECK_THROWS_AS(WidthGrid::make(1.0, 1.0, 0.05), mose::ContractError);
}

TEST_CASE("sharpen") {
  SUBCASE("gamma = 1 is the identity") {
    std::vector<double> p{0.4, 0.35, 0.25};
    auto q = mose::sharpen(p, 1.0);
    for (size_t i = 0; i < p.size(); ++i) CHECK(q[i] == doctest::Approx(p[i]).epsilon(1e-12));
  }

  SUBCASE("gamma -> 0 is uniform") {
    std::vector<double> p{0.9, 0.08, 0.02};
    auto q = mose::sharpen(p, 1e-6);
    for (double v : q) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-4));
  }

  SUBCASE("worked example") {
    std::vector<double> p{0.75, 0.25};
    auto q = mose::sharpen(p, 2.0);
    CHECK(q[0] == doctest::Approx(0.9).epsilon(1e-12));
    CHECK(q[1] == doctest::Approx(0.1).epsilon(1e-12));
  }

  SUBCASE("zero probability entries are floored") {
    std::vector<double> p{1.0, 0.0};
    auto q = mose::sharpen(p, 0.5);
    CHECK(std::isfinite(q[0]));
    CHECK(std::isfinite(q[1]));
    CHECK(q[0] + q[1] == doctest::Approx(1.0));
  }

  SUBCASE("order preservation and gamma monotonicity over random draws") {
    mose::Rng rng(77);
    for (int rep = 0; rep < 10000; ++rep) {
      const int k = 2 + static_cast<int>(rng.below(3));
      std::vector<double> p(static_cast<size_t>(k));
      double total = 0.0;
      for (double& v : p) {
        v = rng.uniform(1e-6, 1.0);
        total += v;
      }
      for (double& v : p) v /= total;
      const double gamma = std::exp(rng.uniform(-3.0, 3.0));
      auto q = mose::sharpen(p, gamma);
      double qsum = 0.0;
      for (double v : q) qsum += v;
      CHECK(std::fabs(qsum - 1.0) <= 1e-9);
      for (size_t i = 0; i < p.size(); ++i) {
        for (size_t j = 0; j < p.size(); ++j) {
          if (p[i] > p[j]) CHECK(q[i] > q[j]);
        }
      }
      // larger gamma concentrates mass on the argmax
      auto q2 = mose::sharpen(p, gamma * 1.5);
      size_t arg = 0;
      for (size_t i = 1; i < p.size(); ++i) {
        if (p[i] > p[arg]) arg = i;
      }
      CHECK(q2[arg] >= q[arg] - 1e-12);
    }
  }
}

TEST_CASE("budgeted widths") {
  std::vector<double> uniform{0.5, 0.5};
  auto w = mose::budgeted_widths(uniform, 2.0);
  CHECK(w[0] == 1.0);
  CHECK(w[1] == 1.0);

  std::vector<double> q{0.9, 0.1};
  auto w2 = mose::budgeted_widths(q, 1.5);
  CHECK(w2[0] == doctest::Approx(1.35).epsilon(1e-12));
  CHECK(w2[1] == doctest::Approx(0.15).epsilon(1e-12));

  std::vector<double> q3{0.7, 0.3};
  auto w3 = mose::budgeted_widths(q3, 2.0);
  CHECK(w3[0] == doctest::Approx(1.4).epsilon(1e-12));
  CHECK(w3[1] == doctest::Approx(0.6).epsilon(1e-12));

  mose::Rng rng(5);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<double> p(3);
    double t = 0.0;
    for (double& v : p) {
      v = rng.uniform(0.01, 1.0);
      t += v;
    }
    for (double& v : p) v /= t;
    const double budget = rng.uniform(0.1, 3.0);
    auto ws = mose::budgeted_widths(p, budget);
    double sum = 0.0;
    for (double v : ws) sum += v;
    CHECK(sum == doctest::Approx(budget).epsilon(1e-9));
  }
}

TEST_CASE("project width") {
  auto g = WidthGrid::make(0.25, 1.0, 0.05);
  CHECK(mose::project_width(1.4, g, true) == 1.0);
  CHECK(mose::project_width(0.15, g, true) == 0.25);
  CHECK(mose::project_width(0.62, g, true) == doctest::Approx(0.60).epsilon(1e-12));
  CHECK(mose::project_width(0.625, g, true) == doctest::Approx(0.65).epsilon(1e-12));  // tie up
  CHECK(mose::project_width(0.62, g, false) == 0.62);  // clamp only
  CHECK(mose::project_width(1.4, g, false) == 1.0);
  CHECK(mose::project_width(0.1, g, false) == 0.25);
}

TEST_CASE("assign widths") {
  auto g = WidthGrid::make(0.25, 1.0, 0.05);
  mose::GateDecision dec;
  dec.tokens = 2;
  dec.n_experts = 4;
  dec.k = 2;
  dec.expert = {0, 1, 2, 3};
  dec.gate = {0.4, 0.4, 0.6, 0.2};
  dec.renorm = {0.5, 0.5, 0.75, 0.25};

  SUBCASE("uniform") {
    auto w = mose::assign_widths(dec, WidthPolicy::uniform(1.0), 0, g);
    for (double v : w) CHECK(v == 1.0);
  }

  SUBCASE("router conditioned, gamma 1, full budget, uniform p") {
    auto policy = WidthPolicy::router_conditioned(2.0, {1.0}, false, false);
    auto w = mose::assign_widths(dec, policy, 0, g);
    CHECK(w[0] == doctest::Approx(1.0));  // token 0 has p = (0.5, 0.5)
    CHECK(w[1] == doctest::Approx(1.0));
  }

  SUBCASE("worked example: budget 1, p = (0.75, 0.25)") {
    auto policy = WidthPolicy::router_conditioned(1.0, {1.0}, false, true);
    auto w = mose::assign_widths(dec, policy, 0, g);
    CHECK(w[2] == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(w[3] == doctest::Approx(0.25).epsilon(1e-12));
  }

  SUBCASE("projection keeps widths inside the grid bounds") {
    mose::Rng rng(13);
    auto policy = WidthPolicy::router_conditioned(1.2, {3.0}, false, true);
    for (int rep = 0; rep < 200; ++rep) {
      mose::GateDecision d2;
      d2.tokens = 1;
      d2.n_experts = 4;
      d2.k = 3;
      d2.expert = {0, 1, 2};
      d2.gate = {0, 0, 0};
      double t = 0.0;
      d2.renorm.resize(3);
      for (double& v : d2.renorm) {
        v = rng.uniform(1e-4, 1.0);
        t += v;
      }
      for (double& v : d2.renorm) v /= t;
      auto w = mose::assign_widths(d2, policy, 0, g);
      for (double v : w) {
        CHECK(v >= g.w_min);
        CHECK(v <= g.w_max);
        // discretized: must be a grid member
        bool on_grid = false;
        for (double gv : g.values) on_grid = on_grid || gv == v;
        CHECK(on_grid);
      }
    }
  }

  SUBCASE("layerwise gamma selects by layer index") {
    auto policy = WidthPolicy::router_conditioned(1.0, {1.0, 4.0}, true, false);
    auto w0 = mose::assign_widths(dec, policy, 0, g);
    auto w1 = mose::assign_widths(dec, policy, 1, g);
    CHECK(w0[2] == doctest::Approx(0.75));
    // gamma = 4: q = 0.75^4 / (0.75^4 + 0.25^4) then scaled by budget, clamped
    const double s0 = std::pow(0.75, 4.0), s1 = std::pow(0.25, 4.0);
    CHECK(w1[2] == doctest::Approx(std::clamp(s0 / (s0 + s1), 0.25, 1.0)));
  }
}

TEST_CASE("policy validation") {
  auto g = WidthGrid::make(0.25, 1.0, 0.05);
  CHECK_THROWS_AS(WidthPolicy::uniform(0.1).validate(g, 2, 2), mose::ContractError);
  CHECK_THROWS_AS(WidthPolicy::uniform(1.2).validate(g, 2, 2), mose::ContractError);
  WidthPolicy::uniform(0.37).validate(g, 2, 2);  // continuous widths allowed

  CHECK_THROWS_AS(WidthPolicy::router_conditioned(2.5, {1.0}, false, true).validate(g, 2, 2),
                  mose::ContractError);
  CHECK_THROWS_AS(WidthPolicy::router_conditioned(0.0, {1.0}, false, true).validate(g, 2, 2),
                  mose::ContractError);
  CHECK_THROWS_AS(WidthPolicy::router_conditioned(1.0, {1.0}, true, true).validate(g, 2, 2),
                  mose::ContractError);  // layerwise needs 2 gammas
  CHECK_THROWS_AS(WidthPolicy::router_conditioned(1.0, {-1.0}, false, true).validate(g, 2, 2),
                  mose::ContractError);
  WidthPolicy::router_conditioned(1.0, {0.5, 2.0}, true, true).validate(g, 2, 2);
}
