#include <gtest/gtest.h>

#include <vector>

#include "mmre/decoder.hpp"
#include "mmre/model.hpp"
#include "test_util.hpp"

namespace mmre {
namespace {

using testutil::random_mat;
using testutil::Rig;

bool bitwise_equal(const Mat& a, const Mat& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
}

std::vector<int> compatible_set(const RelationSchema& schema, int th, int tt) {
  std::vector<int> out;
  for (int r = 0; r < schema.num_relations(); ++r) {
    if (schema.compatible(th, tt, r)) out.push_back(r);
  }
  return out;
}

TEST(TypeMask, IncompatibleRelationsHaveExactlyZeroProbability) {
  Rig rig;
  Model& m = *rig.model;
  Rng rng(51);
  // Give the head real weights so the probabilities are non-trivial.
  m.decoder.head_w->value = random_mat(rng, m.decoder.head_w->value.rows(),
                                       m.decoder.head_w->value.cols(), 0.5);
  for (int th = 0; th < m.schema.num_types(); ++th) {
    for (int tt = 0; tt < m.schema.num_types(); ++tt) {
      ad::Tape tape;
      ForwardCtx ctx{tape};
      ad::NodeRef r_rep = tape.constant(random_mat(rng, 1, m.cfg.model.backbone.model_dim));
      RelationPrediction pred = predict_relation(ctx, m.decoder, r_rep, th, tt, m.schema);
      const Mat& p = pred.masked_probs->value;
      double sum = 0.0;
      for (int r = 0; r < m.schema.num_relations(); ++r) {
        if (m.schema.compatible(th, tt, r)) {
          EXPECT_GT(p(0, r), 0.0);
          sum += p(0, r);
        } else {
          EXPECT_EQ(p(0, r), 0.0) << "pair (" << th << "," << tt << ") relation " << r;
        }
      }
      EXPECT_NEAR(sum, 1.0, 1e-12);
      EXPECT_TRUE(m.schema.compatible(th, tt, pred.predicted));
    }
  }
}

TEST(TypeMask, PairWithOnlyNoneAlwaysPredictsNoneWithCertainty) {
  Rig rig;
  Model& m = *rig.model;
  int th = -1, tt = -1;
  for (int a = 0; a < m.schema.num_types() && th < 0; ++a) {
    for (int b = 0; b < m.schema.num_types() && th < 0; ++b) {
      if (compatible_set(m.schema, a, b).size() == 1) {
        th = a;
        tt = b;
      }
    }
  }
  ASSERT_GE(th, 0) << "tiny schema should leave some type pair with only None";
  Rng rng(52);
  m.decoder.head_w->value = random_mat(rng, m.decoder.head_w->value.rows(),
                                       m.decoder.head_w->value.cols(), 0.5);
  ad::Tape tape;
  ForwardCtx ctx{tape};
  ad::NodeRef r_rep = tape.constant(random_mat(rng, 1, m.cfg.model.backbone.model_dim));
  RelationPrediction pred = predict_relation(ctx, m.decoder, r_rep, th, tt, m.schema);
  EXPECT_EQ(pred.predicted, 0);
  EXPECT_EQ(pred.masked_probs->value(0, 0), 1.0);
}

TEST(RelationHead, ZeroInitializationIsUniformOverCompatibleRelations) {
  Rig rig;
  Model& m = *rig.model;
  const Sample& s = rig.train.samples[0];
  Mat p = m.score_all(s);
  const std::vector<int> comp = compatible_set(m.schema, s.head_type, s.tail_type);
  ASSERT_GE(comp.size(), 2u);
  for (int r = 0; r < m.schema.num_relations(); ++r) {
    const bool ok = m.schema.compatible(s.head_type, s.tail_type, r);
    if (ok) {
      EXPECT_NEAR(p(0, r), 1.0 / static_cast<double>(comp.size()), 1e-15);
    } else {
      EXPECT_EQ(p(0, r), 0.0);
    }
  }
}

TEST(RelationHead, ArgmaxIsInvariantToAConstantLogitShift) {
  Rig rig;
  Model& m = *rig.model;
  Rng rng(53);
  m.decoder.head_w->value = random_mat(rng, m.decoder.head_w->value.rows(),
                                       m.decoder.head_w->value.cols(), 0.5);
  Mat r_rep_v = random_mat(rng, 1, m.cfg.model.backbone.model_dim);

  ad::Tape t1;
  ForwardCtx c1{t1};
  RelationPrediction a = predict_relation(c1, m.decoder, t1.constant(r_rep_v), 0, 1, m.schema);

  m.decoder.head_b->value.array() += 3.7;
  ad::Tape t2;
  ForwardCtx c2{t2};
  RelationPrediction b = predict_relation(c2, m.decoder, t2.constant(r_rep_v), 0, 1, m.schema);

  EXPECT_EQ(a.predicted, b.predicted);
  EXPECT_LT((a.masked_probs->value - b.masked_probs->value).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Decode, AppendedTypeTokensShapeTheRelationRepresentation) {
  Rig rig;
  Model& m = *rig.model;
  const Sample& s = rig.train.samples[0];
  ad::Tape tape;
  ForwardCtx ctx{tape};
  EncoderOutputs enc = encode(ctx, m.backbone, m.proj, m.prefix, m.cfg.model, s);
  const int heads = m.cfg.model.backbone.n_heads;

  DecodeOut fwd = decode(ctx, m.decoder, heads, enc.all_states, enc.pooled_row, nullptr, 0, 1);
  DecodeOut rev = decode(ctx, m.decoder, heads, enc.all_states, enc.pooled_row, nullptr, 1, 0);
  EXPECT_FALSE(bitwise_equal(fwd.r_rep->value, rev.r_rep->value));
  // The relation representation is the final-position state.
  EXPECT_TRUE(bitwise_equal(fwd.r_rep->value, fwd.h_e2->value));
  // The head-type position is blind to the later tail token (causal mask),
  // so changing only the tail type cannot move it.
  DecodeOut other_tail =
      decode(ctx, m.decoder, heads, enc.all_states, enc.pooled_row, nullptr, 0, 2);
  EXPECT_TRUE(bitwise_equal(fwd.h_e1->value, other_tail.h_e1->value));
  EXPECT_FALSE(bitwise_equal(fwd.h_e2->value, other_tail.h_e2->value));
}

TEST(Decode, FusedVectorReplacesThePooledPositionState) {
  Rig rig;
  Model& m = *rig.model;
  const Sample& s = rig.train.samples[1];
  ad::Tape tape;
  ForwardCtx ctx{tape};
  EncoderOutputs enc = encode(ctx, m.backbone, m.proj, m.prefix, m.cfg.model, s);
  const int heads = m.cfg.model.backbone.n_heads;

  // Replacing the pooled state with its own value is a no-op.
  ad::NodeRef same = ad::slice_rows(ctx.tape, enc.all_states, enc.pooled_row, 1);
  DecodeOut plain = decode(ctx, m.decoder, heads, enc.all_states, enc.pooled_row, nullptr,
                           s.head_type, s.tail_type);
  DecodeOut noop = decode(ctx, m.decoder, heads, enc.all_states, enc.pooled_row, same,
                          s.head_type, s.tail_type);
  EXPECT_TRUE(bitwise_equal(plain.r_rep->value, noop.r_rep->value));

  // A genuinely different vector changes the outcome.
  Rng rng(54);
  ad::NodeRef other =
      ctx.tape.constant(random_mat(rng, 1, m.cfg.model.backbone.model_dim));
  DecodeOut changed = decode(ctx, m.decoder, heads, enc.all_states, enc.pooled_row, other,
                             s.head_type, s.tail_type);
  EXPECT_FALSE(bitwise_equal(plain.r_rep->value, changed.r_rep->value));
}

TEST(Decode, RejectsUnknownTypeIdsAndBadPooledRows) {
  Rig rig;
  Model& m = *rig.model;
  const Sample& s = rig.train.samples[0];
  ad::Tape tape;
  ForwardCtx ctx{tape};
  EncoderOutputs enc = encode(ctx, m.backbone, m.proj, m.prefix, m.cfg.model, s);
  const int heads = m.cfg.model.backbone.n_heads;
  EXPECT_THROW(decode(ctx, m.decoder, heads, enc.all_states, enc.pooled_row, nullptr, -1, 0),
               std::runtime_error);
  EXPECT_THROW(decode(ctx, m.decoder, heads, enc.all_states, enc.pooled_row, nullptr, 0,
                      m.schema.num_types()),
               std::runtime_error);
  EXPECT_THROW(decode(ctx, m.decoder, heads, enc.all_states,
                      static_cast<int>(enc.all_states->value.rows()), nullptr, 0, 1),
               std::runtime_error);
}

TEST(DecoderGradients, MatchFiniteDifferencesThroughLayerAndHead) {
  Rig rig;
  Model& m = *rig.model;
  Rng rng(55);
  m.decoder.head_w->value = random_mat(rng, m.decoder.head_w->value.rows(),
                                       m.decoder.head_w->value.cols(), 0.3);
  m.decoder.head_b->value = random_mat(rng, 1, m.decoder.head_b->value.cols(), 0.1);

  const int n = m.cfg.model.backbone.model_dim;
  Mat states = random_mat(rng, 5, n);
  const int pooled_row = 4;
  const int th = 0, tt = 1;
  const std::vector<int> comp = compatible_set(m.schema, th, tt);
  ASSERT_GE(comp.size(), 2u);
  const int gold = comp.back();

  auto probe = [&](ad::Tape& tape) {
    ForwardCtx ctx{tape};
    DecodeOut d = decode(ctx, m.decoder, m.cfg.model.backbone.n_heads, tape.constant(states),
                         pooled_row, nullptr, th, tt);
    RelationPrediction pred = predict_relation(ctx, m.decoder, d.r_rep, th, tt, m.schema);
    return ad::scale(
        tape, ad::log_guard(tape, ad::pick(tape, pred.masked_probs, 0, gold), 1e-12), -1.0);
  };
  std::vector<Parameter*> checked;
  for (auto* p : m.store.trainable()) {
    if (p->group == "decoder") checked.push_back(p);
  }
  ASSERT_FALSE(checked.empty());
  EXPECT_LT(testutil::fd_max_rel_err(checked, probe), 1e-5);
}

TEST(ModelScores, DistributionMatchesPredictAndSumsToOne) {
  Rig rig;
  Model& m = *rig.model;
  Rng rng(56);
  m.decoder.head_w->value = random_mat(rng, m.decoder.head_w->value.rows(),
                                       m.decoder.head_w->value.cols(), 0.4);
  for (int i = 0; i < 4; ++i) {
    const Sample& s = rig.train.samples[static_cast<size_t>(i)];
    Mat p = m.score_all(s);
    EXPECT_NEAR(p.sum(), 1.0, 1e-12);
    int arg = 0;
    for (Eigen::Index r = 1; r < p.cols(); ++r)
      if (p(0, r) > p(0, arg)) arg = static_cast<int>(r);
    EXPECT_EQ(m.predict(s), arg);
  }
}

}  // namespace
}  // namespace mmre
