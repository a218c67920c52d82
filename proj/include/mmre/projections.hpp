#pragma once

#include <string>
#include <vector>

#include "mmre/ad.hpp"
#include "mmre/backbone.hpp"
#include "mmre/config.hpp"

namespace mmre {

// Trainable input maps: word embeddings with a text projection, and linear
// projections taking raw image blocks / object features to model_dim.
struct ProjectionParams {
  Parameter* word_emb = nullptr;  // vocab x N
  Parameter *text_w = nullptr, *text_b = nullptr;
  Parameter *img_w = nullptr, *img_b = nullptr;
  Parameter *obj_w = nullptr, *obj_b = nullptr;

  static ProjectionParams create(ParamStore& store, const ModelConfig& cfg, Rng& rng) {
    const int n = cfg.backbone.model_dim;
    ProjectionParams pp;
    auto w = [&](const char* name, Eigen::Index r, Eigen::Index c, bool random) {
      Parameter& p = store.add("projections", std::string("proj.") + name, r, c, true);
      if (random) detail::init_normal(p, rng, 0.02);
      return &p;
    };
    pp.word_emb = w("word_emb", cfg.vocab_size, n, true);
    pp.text_w = w("text.w", n, n, true);
    pp.text_b = w("text.b", 1, n, false);
    pp.img_w = w("image.w", n, cfg.raw_image_dim, true);
    pp.img_b = w("image.b", 1, n, false);
    pp.obj_w = w("object.w", n, cfg.raw_object_dim, true);
    pp.obj_b = w("object.b", 1, n, false);
    return pp;
  }
};

// L x N text embeddings: lookup then affine map.
inline ad::NodeRef embed_text(ForwardCtx& ctx, const ProjectionParams& pp,
                              const std::vector<int>& tokens) {
  MMRE_CHECK(!tokens.empty(), "projections: empty token sequence");
  ad::NodeRef e = ad::gather_rows(ctx.tape, ctx.tape.leaf(*pp.word_emb), tokens);
  return ad::linear(ctx.tape, e, ctx.tape.leaf(*pp.text_w), ctx.tape.leaf(*pp.text_b));
}

inline ad::NodeRef embed_image(ForwardCtx& ctx, const ProjectionParams& pp, const Mat& blocks) {
  MMRE_CHECK(blocks.rows() >= 1, "projections: empty image feature");
  return ad::linear(ctx.tape, ctx.tape.constant(blocks), ctx.tape.leaf(*pp.img_w),
                    ctx.tape.leaf(*pp.img_b));
}

inline ad::NodeRef embed_objects(ForwardCtx& ctx, const ProjectionParams& pp, const Mat& objects) {
  MMRE_CHECK(objects.rows() >= 1, "projections: no objects in sample");
  return ad::linear(ctx.tape, ctx.tape.constant(objects), ctx.tape.leaf(*pp.obj_w),
                    ctx.tape.leaf(*pp.obj_b));
}

}  // namespace mmre
