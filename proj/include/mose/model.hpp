#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "mose/config.hpp"
#include "mose/moe.hpp"
#include "mose/ops.hpp"
#include "mose/rng.hpp"

namespace mose {

template <typename S>
struct AttentionParams {
  Tensor<S> w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
};

template <typename S>
struct BlockParams {
  Tensor<S> ln1_gain, ln1_bias;
  AttentionParams<S> attn;
  Tensor<S> ln2_gain, ln2_bias;
  RouterParams<S> router;
  std::vector<ExpertParams<S>> experts;
};

template <typename S>
struct NamedParam {
  std::string name;
  Tensor<S> tensor;
  bool weight_decay;  // matrices decay; biases, gains and embeddings do not
};

// Decoder-only transformer: learned positional embeddings, pre-norm blocks,
// causal attention, MoSE feed-forward, tied LM head.
template <typename S>
struct ModelParams {
  ModelConfig config;
  Tensor<S> tok_emb;  // [V x d], also the LM head
  Tensor<S> pos_emb;  // [T x d]
  std::vector<BlockParams<S>> blocks;
  Tensor<S> lnf_gain, lnf_bias;

  static ModelParams init(const ModelConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    const int d = cfg.model_dim;
    const int h = cfg.hidden_dim();

    auto normal = [&rng](std::vector<int64_t> shape, double std_dev) {
      int64_t n = 1;
      for (int64_t v : shape) n *= v;
      std::vector<S> data(static_cast<size_t>(n));
      for (S& v : data) v = static_cast<S>(rng.normal() * std_dev);
      return Tensor<S>::from_vector(std::move(shape), std::move(data), true);
    };
    auto zeros = [](std::vector<int64_t> shape) { return Tensor<S>::zeros(std::move(shape), true); };
    auto ones = [](std::vector<int64_t> shape) {
      return Tensor<S>::filled(std::move(shape), S(1), true);
    };

    ModelParams p;
    p.config = cfg;
    p.tok_emb = normal({cfg.vocab, d}, 0.02);
    p.pos_emb = normal({cfg.seq_len, d}, 0.02);
    for (int l = 0; l < cfg.n_layers; ++l) {
      BlockParams<S> b;
      b.ln1_gain = ones({d});
      b.ln1_bias = zeros({d});
      b.attn.w_q = normal({d, d}, 0.02);
      b.attn.b_q = zeros({d});
      b.attn.w_k = normal({d, d}, 0.02);
      b.attn.b_k = zeros({d});
      b.attn.w_v = normal({d, d}, 0.02);
      b.attn.b_v = zeros({d});
      b.attn.w_o = normal({d, d}, 0.02);
      b.attn.b_o = zeros({d});
      b.ln2_gain = ones({d});
      b.ln2_bias = zeros({d});
      b.router.w_gate = normal({d, cfg.n_experts}, 0.02);
      for (int e = 0; e < cfg.n_experts; ++e) {
        ExpertParams<S> ex;
        ex.w_up = normal({d, h}, 0.02);
        ex.b_up = zeros({h});
        ex.w_down = normal({h, d}, 0.02);
        ex.b_down = zeros({d});
        b.experts.push_back(std::move(ex));
      }
      p.blocks.push_back(std::move(b));
    }
    p.lnf_gain = ones({d});
    p.lnf_bias = zeros({d});
    return p;
  }

  // Fixed registry order; checkpoints and the optimizer both follow it.
  std::vector<NamedParam<S>> named_params() {
    std::vector<NamedParam<S>> out;
    out.push_back({"tok_emb", tok_emb, false});
    out.push_back({"pos_emb", pos_emb, false});
    for (size_t l = 0; l < blocks.size(); ++l) {
      const std::string pre = "block" + std::to_string(l) + ".";
      BlockParams<S>& b = blocks[l];
      out.push_back({pre + "ln1.gain", b.ln1_gain, false});
      out.push_back({pre + "ln1.bias", b.ln1_bias, false});
      out.push_back({pre + "attn.w_q", b.attn.w_q, true});
      out.push_back({pre + "attn.b_q", b.attn.b_q, false});
      out.push_back({pre + "attn.w_k", b.attn.w_k, true});
      out.push_back({pre + "attn.b_k", b.attn.b_k, false});
      out.push_back({pre + "attn.w_v", b.attn.w_v, true});
      out.push_back({pre + "attn.b_v", b.attn.b_v, false});
      out.push_back({pre + "attn.w_o", b.attn.w_o, true});
      out.push_back({pre + "attn.b_o", b.attn.b_o, false});
      out.push_back({pre + "ln2.gain", b.ln2_gain, false});
      out.push_back({pre + "ln2.bias", b.ln2_bias, false});
      out.push_back({pre + "router.w_gate", b.router.w_gate, true});
      for (size_t e = 0; e < b.experts.size(); ++e) {
        const std::string ep = pre + "expert" + std::to_string(e) + ".";
        out.push_back({ep + "w_up", b.experts[e].w_up, true});
        out.push_back({ep + "b_up", b.experts[e].b_up, false});
        out.push_back({ep + "w_down", b.experts[e].w_down, true});
        out.push_back({ep + "b_down", b.experts[e].b_down, false});
      }
    }
    out.push_back({"lnf.gain", lnf_gain, false});
    out.push_back({"lnf.bias", lnf_bias, false});
    return out;
  }
};

enum class MoePath {
  kSlimmable,  // width-sliced execution (MoSE)
  kReference,  // standard full-width MoE route
};

struct ForwardOptions {
  double capacity_factor = 2.0;
  int k_override = 0;  // 0 keeps the trained top_k
  MoePath path = MoePath::kSlimmable;
};

template <typename S>
struct LayerRecord {
  Tensor<S> gate_probs;
  Tensor<S> router_logits;
  Tensor<S> balance;  // scalar tensors, usable as training regularizers
  Tensor<S> zloss;
  RoutingStats stats;
};

template <typename S>
struct ForwardResult {
  Tensor<S> logits;  // [B x T x V]
  std::vector<LayerRecord<S>> layers;
};

namespace detail {
template <typename S>
Tensor<S> attention(const AttentionParams<S>& a, const Tensor<S>& x2d, int64_t bsz, int64_t tlen,
                    int n_heads) {
  const int64_t d = x2d.dim(1);
  const int64_t hd = d / n_heads;
  auto heads = [&](const Tensor<S>& w, const Tensor<S>& b) {
    auto proj = bias_add(matmul(x2d, w), b);
    return permute(reshape(proj, {bsz, tlen, n_heads, hd}), {0, 2, 1, 3});
  };
  auto q = heads(a.w_q, a.b_q);
  auto k = heads(a.w_k, a.b_k);
  auto v = heads(a.w_v, a.b_v);
  auto scores = scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(hd)));
  auto att = softmax_lastdim(causal_mask(scores));
  auto ctx = reshape(permute(matmul(att, v), {0, 2, 1, 3}), {bsz * tlen, d});
  return bias_add(matmul(ctx, a.w_o), a.b_o);
}
}  // namespace detail

// Attention sublayer with pre-norm and residual, exposed for the causality
// and gradient tests.
template <typename S>
Tensor<S> attention_forward(const BlockParams<S>& block, const Tensor<S>& x2d, int64_t bsz,
                            int64_t tlen, int n_heads) {
  auto h = layer_norm(x2d, block.ln1_gain, block.ln1_bias);
  return add(x2d, detail::attention(block.attn, h, bsz, tlen, n_heads));
}

template <typename S>
ForwardResult<S> model_forward(const ModelParams<S>& model, std::span<const int32_t> tokens,
                               int64_t bsz, int64_t tlen, const WidthPolicy& policy,
                               const ForwardOptions& opts) {
  const ModelConfig& cfg = model.config;
  if (tlen > cfg.seq_len) {
    throw ContractError("model_forward: sequence length " + std::to_string(tlen) +
                        " exceeds configured " + std::to_string(cfg.seq_len));
  }
  if (static_cast<int64_t>(tokens.size()) != bsz * tlen) {
    throw ShapeError("model_forward: token count does not match batch shape");
  }
  const int k = opts.k_override > 0 ? opts.k_override : cfg.top_k;
  if (k > cfg.n_experts) {
    throw ContractError("model_forward: k_override exceeds the trained expert count");
  }
  const WidthGrid grid = cfg.grid();
  policy.validate(grid, cfg.top_k, cfg.n_layers);

  std::vector<int32_t> positions(tokens.size());
  for (int64_t b = 0; b < bsz; ++b) {
    for (int64_t t = 0; t < tlen; ++t) positions[static_cast<size_t>(b * tlen + t)] = static_cast<int32_t>(t);
  }

  auto x = add(embedding_rows(model.tok_emb, tokens), embedding_rows(model.pos_emb, positions));

  ForwardResult<S> result;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const BlockParams<S>& block = model.blocks[static_cast<size_t>(l)];
    x = attention_forward(block, x, bsz, tlen, cfg.n_heads);

    auto h = layer_norm(x, block.ln2_gain, block.ln2_bias);
    RouteResult<S> routed = route(h, block.router, k);
    std::vector<double> widths = assign_widths(routed.decision, policy, l, grid);
    const int64_t cap = expert_capacity(h.dim(0), cfg.n_experts, k, opts.capacity_factor);
    MoeLayerOutput<S> moe = moe_dispatch_and_combine(
        block.experts, h, std::move(routed), widths, grid.w_min, cap,
        opts.path == MoePath::kReference);
    x = add(x, moe.y);

    LayerRecord<S> rec;
    rec.balance = load_balance_loss(moe.gate_probs, moe.stats.assignments, k);
    rec.zloss = router_z_loss(moe.router_logits);
    moe.stats.balance_loss = static_cast<double>(rec.balance.item());
    moe.stats.z_loss = static_cast<double>(rec.zloss.item());
    rec.gate_probs = moe.gate_probs;
    rec.router_logits = moe.router_logits;
    rec.stats = std::move(moe.stats);
    result.layers.push_back(std::move(rec));
  }

  x = layer_norm(x, model.lnf_gain, model.lnf_bias);
  result.logits = reshape(matmul_nt(x, model.tok_emb), {bsz, tlen, cfg.vocab});
  return result;
}

}  // namespace mose
