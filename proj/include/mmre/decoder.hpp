#pragma once

#include <string>
#include <vector>

#include "mmre/ad.hpp"
#include "mmre/backbone.hpp"
#include "mmre/config.hpp"
#include "mmre/schema.hpp"

namespace mmre {

// One trainable causal layer continuing the frozen stack, a type-token
// embedding table, and a zero-initialized relation head (so the untrained
// model is uniform over compatible relations).
struct DecoderParams {
  Parameter* type_emb = nullptr;  // n_types x N
  LayerWeights layer;
  Parameter *lnf_g = nullptr, *lnf_b = nullptr;
  Parameter *head_w = nullptr, *head_b = nullptr;  // (C+1) x N, zero

  static DecoderParams create(ParamStore& store, const ModelConfig& cfg, Rng& rng) {
    const int n = cfg.backbone.model_dim;
    DecoderParams dp;
    dp.type_emb = &store.add("decoder", "decoder.type_emb", cfg.n_types, n, true);
    detail::init_normal(*dp.type_emb, rng, 0.02);
    dp.layer = detail::make_layer(store, "decoder", "decoder.layer", n, cfg.backbone.ffn_dim,
                                  true, rng);
    dp.lnf_g = &store.add("decoder", "decoder.lnf.g", 1, n, true);
    dp.lnf_g->value.setOnes();
    dp.lnf_b = &store.add("decoder", "decoder.lnf.b", 1, n, true);
    dp.head_w = &store.add("decoder", "decoder.head.w", cfg.n_relations, n, true);
    dp.head_b = &store.add("decoder", "decoder.head.b", 1, cfg.n_relations, true);
    return dp;
  }
};

struct DecodeOut {
  ad::NodeRef h_e1 = nullptr;   // output state at the head-type position
  ad::NodeRef h_e2 = nullptr;   // output state at the tail-type position
  ad::NodeRef r_rep = nullptr;  // relation representation: final position state
};

// Appends the head- and tail-type embeddings after the encoded sequence
// ("one by one") and runs the trainable causal layer over everything. When a
// fused vector is given it replaces the pooled text position's state first.
inline DecodeOut decode(ForwardCtx& ctx, const DecoderParams& dp, int n_heads,
                        ad::NodeRef all_states, int pooled_row, ad::NodeRef fused,
                        int head_type, int tail_type) {
  ad::Tape& t = ctx.tape;
  const Eigen::Index P = all_states->value.rows();
  const Eigen::Index n_types = dp.type_emb->value.rows();
  MMRE_CHECK(head_type >= 0 && head_type < n_types && tail_type >= 0 && tail_type < n_types,
             "decoder: unknown type id");
  MMRE_CHECK(pooled_row >= 0 && pooled_row < P, "decoder: pooled row out of range");

  ad::NodeRef states = all_states;
  if (fused != nullptr) {
    std::vector<ad::NodeRef> parts;
    if (pooled_row > 0) parts.push_back(ad::slice_rows(t, all_states, 0, pooled_row));
    parts.push_back(fused);
    if (pooled_row + 1 < P)
      parts.push_back(ad::slice_rows(t, all_states, pooled_row + 1, P - pooled_row - 1));
    states = parts.size() == 1 ? parts[0] : ad::concat_rows(t, parts);
  }

  ad::NodeRef types = ad::gather_rows(t, t.leaf(*dp.type_emb), {head_type, tail_type});
  ad::NodeRef x = ad::concat_rows(t, {states, types});
  LayerForward lf = causal_layer(ctx, dp.layer, n_heads, x, nullptr, nullptr, KvAddend{});
  ad::NodeRef out = ad::layer_norm(t, lf.x, t.leaf(*dp.lnf_g), t.leaf(*dp.lnf_b));

  DecodeOut d;
  d.h_e1 = ad::slice_rows(t, out, P, 1);
  d.h_e2 = ad::slice_rows(t, out, P + 1, 1);
  d.r_rep = d.h_e2;  // the final position
  return d;
}

struct RelationPrediction {
  ad::NodeRef logits = nullptr;        // 1 x (C+1)
  ad::NodeRef masked_probs = nullptr;  // 1 x (C+1); incompatible entries exactly 0
  int predicted = -1;
};

// Additive mask of 0 / -1e30: after softmax the incompatible entries underflow
// to exactly 0 and the compatible ones renormalize among themselves.
inline Mat type_mask_row(const RelationSchema& schema, int head_type, int tail_type) {
  Mat mask(1, schema.num_relations());
  for (int r = 0; r < schema.num_relations(); ++r)
    mask(0, r) = schema.compatible(head_type, tail_type, r) ? 0.0 : -1e30;
  return mask;
}

inline RelationPrediction predict_relation(ForwardCtx& ctx, const DecoderParams& dp,
                                           ad::NodeRef r_rep, int head_type, int tail_type,
                                           const RelationSchema& schema) {
  ad::Tape& t = ctx.tape;
  RelationPrediction pred;
  pred.logits = ad::linear(t, r_rep, t.leaf(*dp.head_w), t.leaf(*dp.head_b));
  pred.masked_probs =
      ad::softmax_rows(t, pred.logits, type_mask_row(schema, head_type, tail_type));
  // Deterministic argmax: first maximum wins.
  const Mat& p = pred.masked_probs->value;
  pred.predicted = 0;
  for (Eigen::Index r = 1; r < p.cols(); ++r)
    if (p(0, r) > p(0, pred.predicted)) pred.predicted = static_cast<int>(r);
  return pred;
}

}  // namespace mmre
