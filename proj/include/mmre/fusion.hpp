#pragma once

#include <string>
#include <vector>

#include "mmre/ad.hpp"
#include "mmre/backbone.hpp"
#include "mmre/config.hpp"

namespace mmre {

// Gates and maps of the fusion block. The MLP and i2t output layers start at
// zero so the whole block is the identity on h_t at initialization.
struct FusionParams {
  Parameter *beta_w = nullptr, *beta_b = nullptr;
  Parameter *gamma_w = nullptr, *gamma_b = nullptr;
  Parameter *mlp_w1 = nullptr, *mlp_b1 = nullptr, *mlp_w2 = nullptr, *mlp_b2 = nullptr;
  Parameter *i2t_w1 = nullptr, *i2t_b1 = nullptr, *i2t_w2 = nullptr, *i2t_b2 = nullptr;

  static FusionParams create(ParamStore& store, const ModelConfig& cfg, Rng& rng) {
    const int n = cfg.backbone.model_dim;
    FusionParams fp;
    auto w = [&](const char* name, Eigen::Index r, Eigen::Index c, bool random) {
      Parameter& p = store.add("fusion", std::string("fusion.") + name, r, c, true);
      if (random) detail::init_normal(p, rng, 0.02);
      return &p;
    };
    fp.beta_w = w("beta.w", n, n, true);
    fp.beta_b = w("beta.b", 1, n, false);
    fp.gamma_w = w("gamma.w", n, n, true);
    fp.gamma_b = w("gamma.b", 1, n, false);
    fp.mlp_w1 = w("mlp.w1", n, n, true);
    fp.mlp_b1 = w("mlp.b1", 1, n, false);
    fp.mlp_w2 = w("mlp.w2", n, n, false);  // zero: identity fusion at init
    fp.mlp_b2 = w("mlp.b2", 1, n, false);
    fp.i2t_w1 = w("i2t.w1", n, n, true);
    fp.i2t_b1 = w("i2t.b1", 1, n, false);
    fp.i2t_w2 = w("i2t.w2", n, n, false);  // zero: no semantic channel at init
    fp.i2t_b2 = w("i2t.b2", 1, n, false);
    return fp;
  }
};

struct FusionState {
  ad::NodeRef alpha = nullptr;      // 1 x K object weights
  ad::NodeRef beta = nullptr;       // 1 x N local gate
  ad::NodeRef gamma = nullptr;      // 1 x N global gate
  ad::NodeRef h_i2t = nullptr;      // 1 x N semantic image-to-text vector
  ad::NodeRef fused_pre = nullptr;  // 1 x N gated residual output
  ad::NodeRef fused = nullptr;      // 1 x N final fused representation
  bool alpha_uniform_fallback = false;
};

// alpha_k = cos(h_t, h_o[k]) / sum_j cos(h_t, h_o[j]); when the denominator
// is within 1e-6 of zero the weights fall back to the uniform constant 1/K.
// The softmax option normalizes the cosines with softmax instead.
inline ad::NodeRef object_attention(ForwardCtx& ctx, ad::NodeRef h_t, ad::NodeRef h_o,
                                    const std::string& alpha_mode, bool* used_fallback) {
  ad::Tape& t = ctx.tape;
  const Eigen::Index K = h_o->value.rows();
  std::vector<ad::NodeRef> cos_parts;
  for (Eigen::Index k = 0; k < K; ++k)
    cos_parts.push_back(ad::cosine(t, h_t, ad::slice_rows(t, h_o, k, 1)));
  ad::NodeRef cos = cos_parts.size() == 1 ? cos_parts[0] : ad::concat_cols(t, cos_parts);
  if (used_fallback) *used_fallback = false;
  if (alpha_mode == "softmax") return ad::softmax_rows(t, cos);
  ad::NodeRef total = ad::sum_all(t, cos);
  if (std::abs(total->value(0, 0)) < 1e-6) {
    if (used_fallback) *used_fallback = true;
    return t.constant(Mat::Constant(1, K, 1.0 / static_cast<double>(K)));
  }
  return ad::div_by(t, cos, total);
}

inline ad::NodeRef local_gate(ForwardCtx& ctx, const FusionParams& fp, ad::NodeRef alpha,
                              ad::NodeRef h_o) {
  ad::Tape& t = ctx.tape;
  return ad::linear(t, ad::matmul(t, alpha, h_o), t.leaf(*fp.beta_w), t.leaf(*fp.beta_b));
}

inline ad::NodeRef global_gate(ForwardCtx& ctx, const FusionParams& fp, ad::NodeRef h_i_pooled) {
  ad::Tape& t = ctx.tape;
  return ad::tanh(t, ad::linear(t, h_i_pooled, t.leaf(*fp.gamma_w), t.leaf(*fp.gamma_b)));
}

inline ad::NodeRef fuse_gates(ForwardCtx& ctx, const FusionParams& fp, ad::NodeRef h_t,
                              ad::NodeRef beta, ad::NodeRef gamma) {
  ad::Tape& t = ctx.tape;
  ad::NodeRef gated = ad::add(t, ad::hadamard(t, h_t, gamma), beta);
  ad::NodeRef hidden = ad::gelu(t, ad::linear(t, gated, t.leaf(*fp.mlp_w1), t.leaf(*fp.mlp_b1)));
  ad::NodeRef mlp = ad::linear(t, hidden, t.leaf(*fp.mlp_w2), t.leaf(*fp.mlp_b2));
  return ad::add(t, mlp, h_t);
}

// Semantic image representation in text space. The learned provider is a
// two-layer projection of the pooled image state; the precomputed provider
// injects a stored vector verbatim.
inline ad::NodeRef image_to_text(ForwardCtx& ctx, const FusionParams& fp,
                                 ad::NodeRef h_i_pooled, const Mat* precomputed) {
  ad::Tape& t = ctx.tape;
  if (precomputed != nullptr) {
    MMRE_CHECK(precomputed->rows() == 1 && precomputed->cols() == h_i_pooled->value.cols(),
               "fusion: precomputed i2t vector has wrong shape");
    return t.constant(*precomputed);
  }
  ad::NodeRef hidden =
      ad::gelu(t, ad::linear(t, h_i_pooled, t.leaf(*fp.i2t_w1), t.leaf(*fp.i2t_b1)));
  return ad::linear(t, hidden, t.leaf(*fp.i2t_w2), t.leaf(*fp.i2t_b2));
}

inline ad::NodeRef integrate_semantic(ForwardCtx& ctx, const ModelConfig& cfg,
                                      ad::NodeRef fused_pre, ad::NodeRef h_i2t) {
  ad::Tape& t = ctx.tape;
  MMRE_CHECK(cfg.delta >= 0.0 && cfg.delta <= 1.0, "fusion: delta out of [0,1]");
  ad::NodeRef channel;
  if (cfg.delta_vector.empty()) {
    channel = ad::scale(t, h_i2t, cfg.delta);
  } else {
    Mat dv(1, static_cast<Eigen::Index>(cfg.delta_vector.size()));
    for (Eigen::Index i = 0; i < dv.cols(); ++i)
      dv(0, i) = cfg.delta_vector[static_cast<size_t>(i)];
    channel = ad::hadamard(t, h_i2t, t.constant(dv));
  }
  return ad::add(t, fused_pre, channel);
}

// Full chain: attention over objects -> local gate -> global gate ->
// gated residual -> delta-weighted semantic channel.
inline FusionState fuse_forward(ForwardCtx& ctx, const FusionParams& fp, const ModelConfig& cfg,
                                ad::NodeRef h_t, ad::NodeRef h_o, ad::NodeRef h_i_pooled,
                                const Mat* precomputed_i2t = nullptr) {
  FusionState st;
  st.alpha = object_attention(ctx, h_t, h_o, cfg.alpha_mode, &st.alpha_uniform_fallback);
  st.beta = local_gate(ctx, fp, st.alpha, h_o);
  st.gamma = global_gate(ctx, fp, h_i_pooled);
  st.fused_pre = fuse_gates(ctx, fp, h_t, st.beta, st.gamma);
  st.h_i2t = image_to_text(ctx, fp, h_i_pooled, precomputed_i2t);
  st.fused = integrate_semantic(ctx, cfg, st.fused_pre, st.h_i2t);
  return st;
}

}  // namespace mmre
