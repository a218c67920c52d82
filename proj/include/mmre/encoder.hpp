#pragma once

#include <string>
#include <vector>

#include "mmre/ad.hpp"
#include "mmre/backbone.hpp"
#include "mmre/config.hpp"
#include "mmre/prefix.hpp"
#include "mmre/projections.hpp"
#include "mmre/sample.hpp"

namespace mmre {

struct EncoderOutputs {
  ad::NodeRef all_states = nullptr;  // P x N, all positions in processing order
  ad::NodeRef h_o = nullptr;         // K x N object states
  ad::NodeRef h_i = nullptr;         // M x N image states
  ad::NodeRef h_i_pooled = nullptr;  // 1 x N mean over image states
  ad::NodeRef h_t_tokens = nullptr;  // L x N per-token text states
  ad::NodeRef h_t = nullptr;         // 1 x N pooled: final text position
  int pooled_row = -1;               // row of the pooled position in all_states
  // Slot vectors (useful for inspection) and the chosen object indices.
  ad::NodeRef o_e1 = nullptr, o_e2 = nullptr, t_e1 = nullptr, t_e2 = nullptr;
  int o_e1_index = -1, o_e2_index = -1;
};

namespace detail {

// Plain-value cosine argmax used to resolve the <objects> slot; zero-norm
// rows score 0, ties go to the smallest index. Selection is discrete, so it
// carries no gradient; the selected rows do.
inline int nearest_object(const Mat& objects, const Mat& query_row) {
  int best = 0;
  double best_cos = -2.0;
  const double qn = query_row.norm();
  for (Eigen::Index k = 0; k < objects.rows(); ++k) {
    const double on = objects.row(k).norm();
    const double c =
        (qn < 1e-12 || on < 1e-12) ? 0.0 : objects.row(k).dot(query_row.row(0)) / (on * qn);
    if (c > best_cos) {
      best_cos = c;
      best = static_cast<int>(k);
    }
  }
  return best;
}

inline ad::NodeRef span_mean(ForwardCtx& ctx, ad::NodeRef seq, const Span& span) {
  MMRE_CHECK(span.length() >= 1 && span.begin >= 0 && span.end <= seq->value.rows(),
             "encoder: empty or out-of-range entity span");
  return ad::mean_rows(ctx.tape, ad::slice_rows(ctx.tape, seq, span.begin, span.length()));
}

}  // namespace detail

// Three-stage unidirectional encoding. Segments are processed in cfg.order;
// the prefix blocks are prepended to the segment at their configured stage
// and their rows additionally receive the trainable per-layer K/V deltas.
inline EncoderOutputs encode(ForwardCtx& ctx, const BackboneParams& bp,
                             const ProjectionParams& pp, const PrefixParams& px,
                             const ModelConfig& cfg, const Sample& sample) {
  ad::Tape& t = ctx.tape;
  const int n = cfg.backbone.model_dim;

  std::vector<int> tokens = sample.tokens;
  if (static_cast<int>(tokens.size()) > cfg.max_len) tokens.resize(cfg.max_len);
  MMRE_CHECK(!tokens.empty(), "encoder: empty text");
  MMRE_CHECK(sample.head_span.end <= static_cast<int>(tokens.size()) &&
                 sample.tail_span.end <= static_cast<int>(tokens.size()),
             "encoder: text truncation would cut an entity span");

  Mat objects = sample.object_features;
  MMRE_CHECK(objects.rows() >= 1, "encoder: no objects in sample");
  if (objects.rows() > cfg.max_objects) objects = objects.topRows(cfg.max_objects);

  EncoderOutputs out;
  ad::NodeRef T = embed_text(ctx, pp, tokens);
  ad::NodeRef O = embed_objects(ctx, pp, objects);
  ad::NodeRef I = embed_image(ctx, pp, sample.image_feature);

  out.t_e1 = detail::span_mean(ctx, T, sample.head_span);
  out.t_e2 = detail::span_mean(ctx, T, sample.tail_span);
  out.o_e1_index = detail::nearest_object(O->value, out.t_e1->value);
  out.o_e2_index = detail::nearest_object(O->value, out.t_e2->value);
  out.o_e1 = ad::slice_rows(t, O, out.o_e1_index, 1);
  out.o_e2 = ad::slice_rows(t, O, out.o_e2_index, 1);

  ad::NodeRef op_block =
      cfg.use_op ? build_object_prefix(ctx, px, out.o_e1, out.o_e2) : nullptr;
  ad::NodeRef ep_block =
      cfg.use_ep ? build_entity_prefix(ctx, px, out.t_e1, out.t_e2) : nullptr;

  StagedEncoder enc(bp);
  std::vector<ad::NodeRef> segments;
  int row_offset = 0;
  for (int stage = 1; stage <= 3; ++stage) {
    const char which = cfg.order[static_cast<size_t>(stage - 1)];
    ad::NodeRef content = which == 'o' ? O : which == 'i' ? I : T;
    const int content_rows = static_cast<int>(content->value.rows());
    const bool op_here = cfg.use_op && cfg.op_stage == stage;
    const bool ep_here = cfg.use_ep && cfg.ep_stage == stage;

    std::vector<ad::NodeRef> blocks;
    if (op_here) blocks.push_back(op_block);
    if (ep_here) blocks.push_back(ep_block);
    blocks.push_back(content);
    ad::NodeRef x = blocks.size() == 1 ? content : ad::concat_rows(t, blocks);

    std::vector<KvAddend> addends;
    if (op_here || ep_here) {
      ad::NodeRef content_zeros = t.constant(Mat::Zero(content_rows, n));
      for (int l = 0; l < cfg.backbone.n_layers; ++l) {
        std::vector<ad::NodeRef> ks, vs;
        if (op_here) {
          ks.push_back(t.leaf(*px.op_k[static_cast<size_t>(l)]));
          vs.push_back(t.leaf(*px.op_v[static_cast<size_t>(l)]));
        }
        if (ep_here) {
          ks.push_back(t.leaf(*px.ep_k[static_cast<size_t>(l)]));
          vs.push_back(t.leaf(*px.ep_v[static_cast<size_t>(l)]));
        }
        ks.push_back(content_zeros);
        vs.push_back(content_zeros);
        addends.push_back({ad::concat_rows(t, ks), ad::concat_rows(t, vs)});
      }
    }

    ad::NodeRef seg_out = enc.run_segment(ctx, x, addends);
    const int prefix_rows = (op_here ? px.prefix_len : 0) + (ep_here ? px.prefix_len : 0);
    ad::NodeRef content_out =
        prefix_rows > 0 ? ad::slice_rows(t, seg_out, prefix_rows, content_rows) : seg_out;
    if (which == 'o') {
      out.h_o = content_out;
    } else if (which == 'i') {
      out.h_i = content_out;
    } else {
      out.h_t_tokens = content_out;
      out.pooled_row = row_offset + prefix_rows + content_rows - 1;
    }
    segments.push_back(seg_out);
    row_offset += static_cast<int>(seg_out->value.rows());
  }

  out.all_states = segments.size() == 1 ? segments[0] : ad::concat_rows(t, segments);
  out.h_t = ad::slice_rows(t, out.h_t_tokens, out.h_t_tokens->value.rows() - 1, 1);
  out.h_i_pooled = ad::mean_rows(t, out.h_i);
  MMRE_CHECK(all_finite(out.all_states->value), "encoder: non-finite states");
  return out;
}

}  // namespace mmre
