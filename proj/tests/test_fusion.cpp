#include <gtest/gtest.h>

#include <cmath>
#include <string>
#include <vector>

#include "mmre/fusion.hpp"
#include "mmre/model.hpp"
#include "test_util.hpp"

namespace mmre {
namespace {

using testutil::random_mat;
using testutil::Rig;

bool bitwise_equal(const Mat& a, const Mat& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
}

// ---------------------------------------------------------------------------
// Straight-line re-implementation of the fusion block in plain Eigen. This is
// the oracle the tape-built graph is held against; it shares no code with the
// library beyond Eigen itself.
// ---------------------------------------------------------------------------

double gelu_exact(double x) { return x * 0.5 * (1.0 + std::erf(x * M_SQRT1_2)); }

Mat gelu_rowwise(const Mat& m) {
  return m.unaryExpr([](double x) { return gelu_exact(x); });
}

struct OracleOut {
  Mat alpha, beta, gamma, h_i2t, fused_pre, fused;
  bool fallback = false;
};

OracleOut fusion_oracle(const FusionParams& fp, const std::string& alpha_mode, double delta,
                        const Mat& h_t, const Mat& h_o, const Mat& h_i_pooled,
                        const Mat* precomputed) {
  OracleOut o;
  const Eigen::Index K = h_o.rows();
  Mat cos(1, K);
  for (Eigen::Index k = 0; k < K; ++k) {
    cos(0, k) = h_t.row(0).dot(h_o.row(k)) / (h_t.row(0).norm() * h_o.row(k).norm());
  }
  if (alpha_mode == "softmax") {
    Mat e = (cos.array() - cos.maxCoeff()).exp();
    o.alpha = e / e.sum();
  } else {
    const double total = cos.sum();
    if (std::abs(total) < 1e-6) {
      o.fallback = true;
      o.alpha = Mat::Constant(1, K, 1.0 / static_cast<double>(K));
    } else {
      o.alpha = cos / total;
    }
  }
  o.beta = (o.alpha * h_o) * fp.beta_w->value.transpose() + fp.beta_b->value;
  o.gamma = (h_i_pooled * fp.gamma_w->value.transpose() + fp.gamma_b->value)
                .unaryExpr([](double x) { return std::tanh(x); });
  Mat gated = h_t.cwiseProduct(o.gamma) + o.beta;
  Mat hidden = gelu_rowwise(gated * fp.mlp_w1->value.transpose() + fp.mlp_b1->value);
  o.fused_pre = hidden * fp.mlp_w2->value.transpose() + fp.mlp_b2->value + h_t;
  if (precomputed != nullptr) {
    o.h_i2t = *precomputed;
  } else {
    Mat h2 = gelu_rowwise(h_i_pooled * fp.i2t_w1->value.transpose() + fp.i2t_b1->value);
    o.h_i2t = h2 * fp.i2t_w2->value.transpose() + fp.i2t_b2->value;
  }
  o.fused = o.fused_pre + delta * o.h_i2t;
  return o;
}

// Fusion parameters with every weight randomized (the library zero-inits the
// output layers; the oracle comparison wants them live).
struct FusionBench {
  ParamStore store;
  ModelConfig cfg;
  FusionParams fp;

  FusionBench(int n, Rng& rng) {
    cfg.backbone.model_dim = n;
    fp = FusionParams::create(store, cfg, rng);
    for (auto* p : store.all()) p->value = random_mat(rng, p->value.rows(), p->value.cols(), 0.3);
  }
};

double max_abs_diff(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return 1e300;
  return (a - b).cwiseAbs().maxCoeff();
}

TEST(FusionOracle, TapeGraphMatchesStraightLineEigenOnRandomInstances) {
  Rng rng(991);
  int fallbacks_seen = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 4 << rng.uniform_int(0, 2);  // 4, 8 or 16
    const std::string mode = trial % 3 == 2 ? "softmax" : "cosine_ratio";
    // Every tenth instance cancels its cosines exactly to cover the fallback.
    const bool force_fallback = trial % 10 == 9 && mode == "cosine_ratio";
    const int k = force_fallback ? 2 : rng.uniform_int(1, 6);
    FusionBench bench(n, rng);
    const double delta = rng.uniform(0.0, 1.0);
    bench.cfg.alpha_mode = mode;
    bench.cfg.delta = delta;

    Mat h_t = random_mat(rng, 1, n);
    Mat h_o = random_mat(rng, k, n);
    Mat h_i = random_mat(rng, 1, n);
    if (force_fallback) h_o.row(1) = -h_o.row(0);

    ad::Tape tape;
    ForwardCtx ctx{tape};
    FusionState st = fuse_forward(ctx, bench.fp, bench.cfg, tape.constant(h_t),
                                  tape.constant(h_o), tape.constant(h_i));
    OracleOut want = fusion_oracle(bench.fp, mode, delta, h_t, h_o, h_i, nullptr);

    EXPECT_EQ(st.alpha_uniform_fallback, want.fallback) << "trial " << trial;
    if (want.fallback) ++fallbacks_seen;
    EXPECT_LT(max_abs_diff(st.alpha->value, want.alpha), 1e-10) << "trial " << trial;
    EXPECT_LT(max_abs_diff(st.beta->value, want.beta), 1e-10) << "trial " << trial;
    EXPECT_LT(max_abs_diff(st.gamma->value, want.gamma), 1e-10) << "trial " << trial;
    EXPECT_LT(max_abs_diff(st.h_i2t->value, want.h_i2t), 1e-10) << "trial " << trial;
    EXPECT_LT(max_abs_diff(st.fused_pre->value, want.fused_pre), 1e-10) << "trial " << trial;
    EXPECT_LT(max_abs_diff(st.fused->value, want.fused), 1e-10) << "trial " << trial;
  }
  EXPECT_GE(fallbacks_seen, 2);
}

TEST(FusionInvariants, AlphaSumsToOneAndGammaStaysInsideTanhRange) {
  Rng rng(4177);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 4 << rng.uniform_int(0, 2);
    const int k = rng.uniform_int(1, 8);
    FusionBench bench(n, rng);
    bench.cfg.alpha_mode = trial % 2 ? "softmax" : "cosine_ratio";
    Mat h_t = random_mat(rng, 1, n);
    Mat h_o = random_mat(rng, k, n);
    Mat h_i = random_mat(rng, 1, n, 2.0);
    ad::Tape tape;
    ForwardCtx ctx{tape};
    FusionState st = fuse_forward(ctx, bench.fp, bench.cfg, tape.constant(h_t),
                                  tape.constant(h_o), tape.constant(h_i));
    EXPECT_NEAR(st.alpha->value.sum(), 1.0, 1e-6) << "trial " << trial;
    EXPECT_LE(st.gamma->value.cwiseAbs().maxCoeff(), 1.0) << "trial " << trial;
    if (bench.cfg.alpha_mode == "softmax") {
      EXPECT_GT(st.alpha->value.minCoeff(), 0.0) << "softmax weights must be positive";
    }
  }
}

TEST(FusionHandCases, SingleObjectGetsWeightOne) {
  Rng rng(11);
  FusionBench bench(8, rng);
  ad::Tape tape;
  ForwardCtx ctx{tape};
  FusionState st = fuse_forward(ctx, bench.fp, bench.cfg, tape.constant(random_mat(rng, 1, 8)),
                                tape.constant(random_mat(rng, 1, 8)),
                                tape.constant(random_mat(rng, 1, 8)));
  ASSERT_EQ(st.alpha->value.cols(), 1);
  EXPECT_EQ(st.alpha->value(0, 0), 1.0);  // c / c is exactly one
}

TEST(FusionHandCases, IdenticalObjectsShareWeightEqually) {
  Rng rng(12);
  FusionBench bench(8, rng);
  Mat h_t = random_mat(rng, 1, 8);
  Mat row = random_mat(rng, 1, 8);
  Mat h_o(2, 8);
  h_o.row(0) = row.row(0);
  h_o.row(1) = row.row(0);
  ad::Tape tape;
  ForwardCtx ctx{tape};
  FusionState st = fuse_forward(ctx, bench.fp, bench.cfg, tape.constant(h_t),
                                tape.constant(h_o), tape.constant(random_mat(rng, 1, 8)));
  EXPECT_EQ(st.alpha->value(0, 0), 0.5);
  EXPECT_EQ(st.alpha->value(0, 1), 0.5);
}

TEST(FusionHandCases, RatioWeightsCanLeaveTheSimplex) {
  // cos = (1, 0) when one object is h_t itself and the other is orthogonal:
  // alpha = (1, 0). With cos = (c, -c/2) the ratio produces (2, -1).
  Rng rng(13);
  FusionBench bench(4, rng);
  Mat h_t(1, 4);
  h_t << 1, 0, 0, 0;
  Mat h_o(2, 4);
  h_o << 2, 0, 0, 0,  // parallel: cos 1
      0, 3, 0, 0;     // orthogonal: cos 0
  ad::Tape tape;
  ForwardCtx ctx{tape};
  FusionState st = fuse_forward(ctx, bench.fp, bench.cfg, tape.constant(h_t),
                                tape.constant(h_o), tape.constant(random_mat(rng, 1, 4)));
  EXPECT_EQ(st.alpha->value(0, 0), 1.0);
  EXPECT_EQ(st.alpha->value(0, 1), 0.0);

  // cos(h_t, (5,0,0,0)) = 1 and cos(h_t, (-1,1,1,1)) = -1/2, so the ratio
  // weights are (1, -1/2) / (1/2) = (2, -1): negative but still summing to 1.
  Mat h_o3(2, 4);
  h_o3 << 5, 0, 0, 0, -1, 1, 1, 1;
  ad::Tape tape2;
  ForwardCtx ctx2{tape2};
  FusionState st3 = fuse_forward(ctx2, bench.fp, bench.cfg, tape2.constant(h_t),
                                 tape2.constant(h_o3), tape2.constant(random_mat(rng, 1, 4)));
  EXPECT_NEAR(st3.alpha->value(0, 0), 2.0, 1e-12);
  EXPECT_NEAR(st3.alpha->value(0, 1), -1.0, 1e-12);
  EXPECT_NEAR(st3.alpha->value.sum(), 1.0, 1e-12);
}

TEST(FusionHandCases, CancellingCosinesFallBackToUniform) {
  Rng rng(14);
  FusionBench bench(8, rng);
  Mat h_t = random_mat(rng, 1, 8);
  Mat row = random_mat(rng, 1, 8);
  Mat h_o(2, 8);
  h_o.row(0) = row.row(0);
  h_o.row(1) = -row.row(0);  // exact cancellation -> |sum| = 0 < 1e-6
  ad::Tape tape;
  ForwardCtx ctx{tape};
  FusionState st = fuse_forward(ctx, bench.fp, bench.cfg, tape.constant(h_t),
                                tape.constant(h_o), tape.constant(random_mat(rng, 1, 8)));
  EXPECT_TRUE(st.alpha_uniform_fallback);
  EXPECT_EQ(st.alpha->value(0, 0), 0.5);
  EXPECT_EQ(st.alpha->value(0, 1), 0.5);
}

TEST(FusionIdentity, ZeroInitializedBlockPassesTextStateThroughUnchanged) {
  Rig rig;
  ad::Tape tape;
  ForwardCtx ctx{tape};
  const Sample& s = rig.train.samples[0];
  Model::SampleForward f = rig.model->forward_sample(ctx, s, false);
  ASSERT_TRUE(rig.cfg.model.use_fusion);
  EXPECT_TRUE(bitwise_equal(f.fused->value, f.enc.h_t->value));
  EXPECT_TRUE((f.fus.h_i2t->value.array() == 0.0).all());
}

TEST(FusionIdentity, DeltaZeroRemovesTheSemanticChannel) {
  Rng rng(15);
  FusionBench bench(8, rng);
  bench.cfg.delta = 0.0;
  Mat h_t = random_mat(rng, 1, 8);
  Mat h_o = random_mat(rng, 3, 8);
  Mat h_i = random_mat(rng, 1, 8);
  ad::Tape tape;
  ForwardCtx ctx{tape};
  FusionState st = fuse_forward(ctx, bench.fp, bench.cfg, tape.constant(h_t),
                                tape.constant(h_o), tape.constant(h_i));
  EXPECT_TRUE(bitwise_equal(st.fused->value, st.fused_pre->value));
  EXPECT_FALSE((st.h_i2t->value.array() == 0.0).all());
}

TEST(FusionIdentity, UniformDeltaVectorMatchesTheScalar) {
  Rng rng(16);
  Mat h_t = random_mat(rng, 1, 8);
  Mat h_o = random_mat(rng, 3, 8);
  Mat h_i = random_mat(rng, 1, 8);

  FusionBench scalar_bench(8, rng);
  scalar_bench.cfg.delta = 0.4;
  ad::Tape t1;
  ForwardCtx c1{t1};
  FusionState a = fuse_forward(c1, scalar_bench.fp, scalar_bench.cfg, t1.constant(h_t),
                               t1.constant(h_o), t1.constant(h_i));

  scalar_bench.cfg.delta_vector.assign(8, 0.4);
  ad::Tape t2;
  ForwardCtx c2{t2};
  FusionState b = fuse_forward(c2, scalar_bench.fp, scalar_bench.cfg, t2.constant(h_t),
                               t2.constant(h_o), t2.constant(h_i));
  EXPECT_TRUE(bitwise_equal(a.fused->value, b.fused->value));
}

TEST(FusionProviders, PrecomputedVectorIsInjectedVerbatim) {
  Rng rng(17);
  FusionBench bench(8, rng);
  bench.cfg.delta = 0.4;
  Mat h_t = random_mat(rng, 1, 8);
  Mat h_o = random_mat(rng, 3, 8);
  Mat h_i = random_mat(rng, 1, 8);
  Mat pre = random_mat(rng, 1, 8);

  ad::Tape t1;
  ForwardCtx c1{t1};
  FusionState with_pre = fuse_forward(c1, bench.fp, bench.cfg, t1.constant(h_t),
                                      t1.constant(h_o), t1.constant(h_i), &pre);
  EXPECT_TRUE(bitwise_equal(with_pre.h_i2t->value, pre));
  EXPECT_LT(max_abs_diff(with_pre.fused->value,
                         with_pre.fused_pre->value + 0.4 * pre),
            1e-15);

  ad::Tape t2;
  ForwardCtx c2{t2};
  FusionState learned = fuse_forward(c2, bench.fp, bench.cfg, t2.constant(h_t),
                                     t2.constant(h_o), t2.constant(h_i));
  EXPECT_FALSE(bitwise_equal(learned.fused->value, with_pre.fused->value));

  Mat wrong = random_mat(rng, 1, 4);
  ad::Tape t3;
  ForwardCtx c3{t3};
  EXPECT_THROW(fuse_forward(c3, bench.fp, bench.cfg, t3.constant(h_t), t3.constant(h_o),
                            t3.constant(h_i), &wrong),
               std::runtime_error);
}

TEST(FusionGradients, MatchFiniteDifferencesThroughEveryGate) {
  Rng rng(18);
  const int n = 6;
  FusionBench bench(n, rng);
  bench.cfg.delta = 0.7;
  // Inputs as trainable leaves so cosine/ratio backward paths are checked too.
  Parameter& h_t = bench.store.add("inputs", "in.h_t", 1, n, true);
  Parameter& h_o = bench.store.add("inputs", "in.h_o", 3, n, true);
  Parameter& h_i = bench.store.add("inputs", "in.h_i", 1, n, true);
  h_t.value = random_mat(rng, 1, n);
  h_o.value = random_mat(rng, 3, n);
  h_i.value = random_mat(rng, 1, n);

  auto probe = [&](ad::Tape& tape) {
    ForwardCtx ctx{tape};
    FusionState st = fuse_forward(ctx, bench.fp, bench.cfg, tape.leaf(h_t), tape.leaf(h_o),
                                  tape.leaf(h_i));
    return ad::mean_all(tape, ad::tanh(tape, st.fused));
  };
  EXPECT_LT(testutil::fd_max_rel_err(bench.store.all(), probe), 1e-5);
}

}  // namespace
}  // namespace mmre
