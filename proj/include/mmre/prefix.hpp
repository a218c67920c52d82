#pragma once

#include <string>
#include <vector>

#include "mmre/ad.hpp"
#include "mmre/backbone.hpp"
#include "mmre/config.hpp"

namespace mmre {

// Two task prefixes. Each owns a template of prefix_len token embeddings
// whose slots (rows 1 and 2) are filled per sample, plus per-layer key/value
// vectors added to the computed K/V at the prefix positions — the deep,
// layer-wise part of prefix tuning. All of it trains while the backbone is
// frozen.
struct PrefixParams {
  int prefix_len = 0;
  Parameter* op_template = nullptr;  // prefix_len x N
  Parameter* ep_template = nullptr;
  std::vector<Parameter*> op_k, op_v, ep_k, ep_v;  // per layer, prefix_len x N

  static PrefixParams create(ParamStore& store, const ModelConfig& cfg, Rng& rng) {
    const int n = cfg.backbone.model_dim;
    PrefixParams px;
    px.prefix_len = cfg.prefix_len;
    auto w = [&](const std::string& name, bool random) {
      Parameter& p = store.add("prefix", "prefix." + name, cfg.prefix_len, n, true);
      if (random) detail::init_normal(p, rng, 0.02);
      return &p;
    };
    px.op_template = w("op.template", true);
    px.ep_template = w("ep.template", true);
    // Zero-initialized deltas: at init the prefixes act as plain template
    // tokens and the layer-wise adjustment grows from zero.
    for (int l = 0; l < cfg.backbone.n_layers; ++l) {
      const std::string ln = std::to_string(l);
      px.op_k.push_back(w("op.k" + ln, false));
      px.op_v.push_back(w("op.v" + ln, false));
      px.ep_k.push_back(w("ep.k" + ln, false));
      px.ep_v.push_back(w("ep.v" + ln, false));
    }
    return px;
  }
};

namespace detail {

// Template with rows 1 and 2 replaced by the two slot vectors.
inline ad::NodeRef fill_slots(ForwardCtx& ctx, Parameter& tmpl, ad::NodeRef slot1,
                              ad::NodeRef slot2, int prefix_len) {
  ad::Tape& t = ctx.tape;
  ad::NodeRef base = t.leaf(tmpl);
  std::vector<ad::NodeRef> parts{ad::slice_rows(t, base, 0, 1), slot1, slot2};
  if (prefix_len > 3) parts.push_back(ad::slice_rows(t, base, 3, prefix_len - 3));
  return ad::concat_rows(t, parts);
}

}  // namespace detail

// "Consider <objects>, predict relation" — the slot carries the two
// entity-relevant object embeddings.
inline ad::NodeRef build_object_prefix(ForwardCtx& ctx, const PrefixParams& px,
                                       ad::NodeRef o_e1, ad::NodeRef o_e2) {
  return detail::fill_slots(ctx, *px.op_template, o_e1, o_e2, px.prefix_len);
}

// "Consider <e1, e2>, predict relation" — the slot carries the two entity
// embeddings (mean of span token embeddings).
inline ad::NodeRef build_entity_prefix(ForwardCtx& ctx, const PrefixParams& px,
                                       ad::NodeRef t_e1, ad::NodeRef t_e2) {
  return detail::fill_slots(ctx, *px.ep_template, t_e1, t_e2, px.prefix_len);
}

}  // namespace mmre
