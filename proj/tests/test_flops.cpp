#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mose/flops.hpp"

using mose::ModelConfig;

namespace {

// Hand count for the desk config at width 1.0, written out term by term and
// kept independent of the implementation's helper functions.
double desk_hand_count_flops() {
  const double L = 2, d = 64, n = 8, k = 2, T = 128, V = 256;
  const double m_full = 4 * d;                      // ceil(1.0 * 4d)
  const double expert = 2 * d * m_full + 2 * m_full * d;  // up + down projections
  const double router = 2 * d * n;
  const double moe = L * (k * expert + router);
  const double proj = 2.0 * (4 * d * d) * 2.0;      // q,k,v,o projections as MACs * 2
  const double avg_ctx = (T + 1) / 2.0;
  const double scores = 4 * d * avg_ctx;
  const double attn = L * (proj + scores);
  const double head = 2 * d * V;
  return moe + attn + head;
}

}  // namespace

TEST_CASE("expert flops") {
  CHECK(mose::expert_flops(64, 1.0) == 65536.0);   // 4 * 64 * 256
  CHECK(mose::expert_flops(64, 0.5) == 32768.0);   // exactly half
  CHECK(mose::expert_flops(384, 0.25) == 589824.0);  // 4 * 384 * 384
  CHECK_THROWS_AS(mose::expert_flops(64, 0.0), mose::ContractError);
  CHECK_THROWS_AS(mose::expert_flops(64, 1.5), mose::ContractError);

  // strictly increasing in m(w)
  double prev = 0.0;
  int64_t prev_m = 0;
  for (double w = 0.05; w <= 1.0; w += 0.05) {
    const int64_t m = mose::active_hidden_size(w, 64);
    const double f = mose::expert_flops(64, w);
    if (m > prev_m) CHECK(f > prev);
    prev = f;
    prev_m = m;
  }
}

TEST_CASE("desk model flops match the hand count exactly") {
  ModelConfig cfg;  // desk defaults: L=2 H=4 d=64 V=256 T=128 n=8 k=2
  auto report = mose::model_flops_uniform(cfg, 1.0);
  CHECK(report.total_mflops * 1e6 == desk_hand_count_flops());
  CHECK(report.total_mflops ==
        doctest::Approx(report.moe_mflops + report.attention_mflops + report.other_mflops)
            .epsilon(1e-12));
}

TEST_CASE("half width halves the MoE component only") {
  ModelConfig cfg;
  auto full = mose::model_flops_uniform(cfg, 1.0);
  auto half = mose::model_flops_uniform(cfg, 0.5);
  const double router_share = 2.0 * (2.0 * cfg.model_dim * cfg.n_experts) / 1e6;
  const double full_experts = full.moe_mflops - router_share;
  const double half_experts = half.moe_mflops - router_share;
  CHECK(half_experts == doctest::Approx(full_experts / 2.0).epsilon(1e-12));
  CHECK(half.attention_mflops == full.attention_mflops);
  CHECK(half.other_mflops == full.other_mflops);
}

TEST_CASE("moe share grows with model dim") {
  double prev_share = 0.0;
  for (int d : {64, 128, 256}) {
    ModelConfig cfg;
    cfg.model_dim = d;
    cfg.n_heads = 4;
    auto r = mose::model_flops_uniform(cfg, 1.0);
    const double share = r.moe_mflops / r.total_mflops;
    CHECK(share > prev_share);
    prev_share = share;
  }
}

TEST_CASE("policy expectation equivalences") {
  ModelConfig cfg;
  auto uniform_full = mose::model_flops_uniform(cfg, 1.0);

  // gamma -> 0 at full budget recovers the uniform full-width cost
  auto policy = mose::WidthPolicy::router_conditioned(2.0, {1e-6}, false, true);
  auto rc = mose::model_flops_policy(cfg, policy);
  CHECK(rc.total_mflops == uniform_full.total_mflops);

  // uniform width is monotone in w
  double prev = 0.0;
  for (double w : {0.25, 0.5, 0.75, 1.0}) {
    auto r = mose::model_flops_policy(cfg, mose::WidthPolicy::uniform(w));
    CHECK(r.total_mflops >= prev);
    prev = r.total_mflops;
  }

  // any policy stays at or below the full-width total
  for (double budget : {0.5, 1.0, 1.5, 2.0}) {
    auto p = mose::WidthPolicy::router_conditioned(budget, {1.3}, false, true);
    CHECK(mose::model_flops_policy(cfg, p).total_mflops <= uniform_full.total_mflops);
  }
}

TEST_CASE("realized accounting drops uncharged slots") {
  ModelConfig cfg;
  mose::RoutingStats st;
  st.tokens = 4;
  st.n_experts = cfg.n_experts;
  st.k = 2;
  st.widths = {1.0, 0.5, 1.0, 0.5, 1.0, 0.5, 1.0, 0.5};
  st.kept = {1, 1, 1, 1, 1, 0, 1, 0};  // two dropped half-width slots
  const double got = mose::layer_moe_flops_total(cfg, st);
  const double expect = 4 * mose::router_flops(cfg) + 4 * mose::expert_flops(cfg.model_dim, 1.0) +
                        2 * mose::expert_flops(cfg.model_dim, 0.5);
  CHECK(got == expect);
}

TEST_CASE("report serializes") {
  ModelConfig cfg;
  auto j = mose::model_flops_uniform(cfg, 1.0).to_json();
  CHECK(j.contains("moe_mflops"));
  CHECK(j.contains("attention_mflops"));
  CHECK(j.contains("other_mflops"));
  CHECK(j.contains("total_mflops"));
}
