#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mmre/ad.hpp"
#include "mmre/config.hpp"
#include "mmre/params.hpp"
#include "mmre/rng.hpp"

namespace mmre {

// Shared context for one forward pass. Dropout is off (rate 0) outside
// training, which also makes forward passes deterministic.
struct ForwardCtx {
  ad::Tape& tape;
  double dropout_rate = 0.0;
  Rng* rng = nullptr;
};

struct AttentionWeights {
  Parameter *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
};

struct LayerWeights {
  Parameter *ln1_g, *ln1_b;
  AttentionWeights attn;
  Parameter *ln2_g, *ln2_b;
  Parameter *ffn_w1, *ffn_b1, *ffn_w2, *ffn_b2;
};

namespace detail {

inline void init_normal(Parameter& p, Rng& rng, double scale) {
  for (Eigen::Index i = 0; i < p.value.rows(); ++i)
    for (Eigen::Index j = 0; j < p.value.cols(); ++j) p.value(i, j) = scale * rng.normal();
}

inline LayerWeights make_layer(ParamStore& store, const std::string& group,
                               const std::string& name, int n, int ffn, bool trainable,
                               Rng& rng) {
  auto w = [&](const std::string& suffix, Eigen::Index r, Eigen::Index c, bool random) {
    Parameter& p = store.add(group, name + "." + suffix, r, c, trainable);
    if (random) init_normal(p, rng, 0.02);
    return &p;
  };
  LayerWeights lw;
  lw.ln1_g = w("ln1.g", 1, n, false);
  lw.ln1_g->value.setOnes();
  lw.ln1_b = w("ln1.b", 1, n, false);
  lw.attn = {w("attn.wq", n, n, true), w("attn.bq", 1, n, false),
             w("attn.wk", n, n, true), w("attn.bk", 1, n, false),
             w("attn.wv", n, n, true), w("attn.bv", 1, n, false),
             w("attn.wo", n, n, true), w("attn.bo", 1, n, false)};
  lw.ln2_g = w("ln2.g", 1, n, false);
  lw.ln2_g->value.setOnes();
  lw.ln2_b = w("ln2.b", 1, n, false);
  lw.ffn_w1 = w("ffn.w1", ffn, n, true);
  lw.ffn_b1 = w("ffn.b1", 1, ffn, false);
  lw.ffn_w2 = w("ffn.w2", n, ffn, true);
  lw.ffn_b2 = w("ffn.b2", 1, n, false);
  return lw;
}

}  // namespace detail

// Trainable per-layer key/value additions for a segment's prefix rows.
struct KvAddend {
  ad::NodeRef k = nullptr;
  ad::NodeRef v = nullptr;
};

// One pre-LN causal block. `past_k`/`past_v` hold keys/values of all earlier
// positions at this layer (null for none); rows of the current segment attend
// to all past rows and to current rows at or before their own position.
struct LayerForward {
  ad::NodeRef x;       // segment output, S x N
  ad::NodeRef k_full;  // keys including this segment, (past+S) x N
  ad::NodeRef v_full;
};

inline LayerForward causal_layer(ForwardCtx& ctx, const LayerWeights& lw, int n_heads,
                                 ad::NodeRef x, ad::NodeRef past_k, ad::NodeRef past_v,
                                 const KvAddend& addend) {
  ad::Tape& t = ctx.tape;
  const Eigen::Index S = x->value.rows();
  const Eigen::Index N = x->value.cols();
  const Eigen::Index past = past_k ? past_k->value.rows() : 0;
  const Eigen::Index dh = N / n_heads;

  ad::NodeRef xn = ad::layer_norm(t, x, t.leaf(*lw.ln1_g), t.leaf(*lw.ln1_b));
  ad::NodeRef q = ad::linear(t, xn, t.leaf(*lw.attn.wq), t.leaf(*lw.attn.bq));
  ad::NodeRef k = ad::linear(t, xn, t.leaf(*lw.attn.wk), t.leaf(*lw.attn.bk));
  ad::NodeRef v = ad::linear(t, xn, t.leaf(*lw.attn.wv), t.leaf(*lw.attn.bv));
  if (addend.k) k = ad::add(t, k, addend.k);
  if (addend.v) v = ad::add(t, v, addend.v);
  ad::NodeRef k_full = past_k ? ad::concat_rows(t, {past_k, k}) : k;
  ad::NodeRef v_full = past_v ? ad::concat_rows(t, {past_v, v}) : v;

  // Row i may attend to absolute positions <= past + i.
  Mat mask = Mat::Zero(S, past + S);
  for (Eigen::Index i = 0; i < S; ++i)
    for (Eigen::Index j = past + i + 1; j < past + S; ++j) mask(i, j) = -1e30;

  std::vector<ad::NodeRef> heads;
  for (int h = 0; h < n_heads; ++h) {
    ad::NodeRef qh = ad::slice_cols(t, q, h * dh, dh);
    ad::NodeRef kh = ad::slice_cols(t, k_full, h * dh, dh);
    ad::NodeRef vh = ad::slice_cols(t, v_full, h * dh, dh);
    ad::NodeRef scores = ad::scale(t, ad::matmul_nt(t, qh, kh), 1.0 / std::sqrt(double(dh)));
    ad::NodeRef probs = ad::softmax_rows(t, scores, mask);
    heads.push_back(ad::matmul(t, probs, vh));
  }
  ad::NodeRef attn = n_heads == 1 ? heads[0] : ad::concat_cols(t, heads);
  ad::NodeRef attn_out = ad::linear(t, attn, t.leaf(*lw.attn.wo), t.leaf(*lw.attn.bo));
  if (ctx.dropout_rate > 0.0)
    attn_out = ad::dropout(t, attn_out, ctx.dropout_rate, *ctx.rng);
  x = ad::add(t, x, attn_out);

  ad::NodeRef xn2 = ad::layer_norm(t, x, t.leaf(*lw.ln2_g), t.leaf(*lw.ln2_b));
  ad::NodeRef ff = ad::linear(t, ad::gelu(t, ad::linear(t, xn2, t.leaf(*lw.ffn_w1), t.leaf(*lw.ffn_b1))),
                              t.leaf(*lw.ffn_w2), t.leaf(*lw.ffn_b2));
  if (ctx.dropout_rate > 0.0) ff = ad::dropout(t, ff, ctx.dropout_rate, *ctx.rng);
  x = ad::add(t, x, ff);
  return {x, k_full, v_full};
}

// The frozen stack. Weights are created non-trainable unless unfrozen; the
// optimizer never touches non-trainable parameters.
struct BackboneParams {
  BackboneConfig cfg;
  Parameter* pos_emb = nullptr;  // max_positions x N
  std::vector<LayerWeights> layers;
  Parameter *lnf_g = nullptr, *lnf_b = nullptr;

  static BackboneParams create(ParamStore& store, const BackboneConfig& cfg, Rng& rng,
                               bool trainable) {
    cfg.validate();
    BackboneParams bp;
    bp.cfg = cfg;
    bp.pos_emb = &store.add("backbone", "backbone.pos_emb", cfg.max_positions, cfg.model_dim,
                            trainable);
    detail::init_normal(*bp.pos_emb, rng, 0.02);
    for (int l = 0; l < cfg.n_layers; ++l)
      bp.layers.push_back(detail::make_layer(store, "backbone",
                                             "backbone.layer" + std::to_string(l),
                                             cfg.model_dim, cfg.ffn_dim, trainable, rng));
    bp.lnf_g = &store.add("backbone", "backbone.lnf.g", 1, cfg.model_dim, trainable);
    bp.lnf_g->value.setOnes();
    bp.lnf_b = &store.add("backbone", "backbone.lnf.b", 1, cfg.model_dim, trainable);
    return bp;
  }
};

// Incremental multi-segment encoding. Each run_segment call appends one input
// segment; its rows see every previously encoded position but nothing later,
// which is exactly the staged-causality contract.
class StagedEncoder {
 public:
  explicit StagedEncoder(const BackboneParams& bp)
      : bp_(bp), k_cache_(bp.layers.size(), nullptr), v_cache_(bp.layers.size(), nullptr) {}

  // x: S x N segment embeddings (prefix rows included by the caller).
  // addends: per-layer K/V additions aligned with the segment rows, or empty.
  ad::NodeRef run_segment(ForwardCtx& ctx, ad::NodeRef x,
                          const std::vector<KvAddend>& addends = {}) {
    ad::Tape& t = ctx.tape;
    const Eigen::Index S = x->value.rows();
    MMRE_CHECK(S >= 1, "encoder: empty segment");
    MMRE_CHECK(past_ + S <= bp_.cfg.max_positions,
               "encoder: sequence exceeds max_positions (" +
                   std::to_string(past_ + S) + " > " +
                   std::to_string(bp_.cfg.max_positions) + ")");
    MMRE_CHECK(addends.empty() || addends.size() == bp_.layers.size(),
               "encoder: addends must cover every layer");
    x = ad::add(t, x, ad::slice_rows(t, t.leaf(*bp_.pos_emb), past_, S));
    for (size_t l = 0; l < bp_.layers.size(); ++l) {
      const KvAddend addend = addends.empty() ? KvAddend{} : addends[l];
      LayerForward lf = causal_layer(ctx, bp_.layers[l], bp_.cfg.n_heads, x, k_cache_[l],
                                     v_cache_[l], addend);
      x = lf.x;
      k_cache_[l] = lf.k_full;
      v_cache_[l] = lf.v_full;
    }
    past_ += static_cast<int>(S);
    return ad::layer_norm(t, x, t.leaf(*bp_.lnf_g), t.leaf(*bp_.lnf_b));
  }

  int positions_consumed() const { return past_; }

 private:
  const BackboneParams& bp_;
  std::vector<ad::NodeRef> k_cache_, v_cache_;
  int past_ = 0;
};

}  // namespace mmre
