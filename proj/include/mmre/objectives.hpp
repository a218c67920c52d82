#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mmre/ad.hpp"
#include "mmre/backbone.hpp"
#include "mmre/config.hpp"

namespace mmre {

// Consistency between the relation distributions of the fused and plain
// decoding paths. KL mode: sum p_f * log(p_f / p_p); cross-entropy mode:
// -sum p_f * log p_p. Logs carry a 1e-12 additive guard, so entries that are
// exactly zero (masked relations) contribute zero in KL mode.
inline ad::NodeRef distribution_consistency(ForwardCtx& ctx, ad::NodeRef p_fused,
                                            ad::NodeRef p_plain, const std::string& mode) {
  ad::Tape& t = ctx.tape;
  for (ad::NodeRef p : {p_fused, p_plain}) {
    MMRE_CHECK(p->value.rows() == 1, "consistency: expected row distributions");
    MMRE_CHECK(p->value.minCoeff() >= 0.0 && std::abs(p->value.sum() - 1.0) < 1e-6,
               "consistency: input is not a distribution");
  }
  ad::NodeRef log_p = ad::log_guard(t, p_plain, 1e-12);
  if (mode == "cross_entropy")
    return ad::scale(t, ad::sum_all(t, ad::hadamard(t, p_fused, log_p)), -1.0);
  MMRE_CHECK(mode == "kl", "consistency: unknown mode " + mode);
  ad::NodeRef log_f = ad::log_guard(t, p_fused, 1e-12);
  return ad::sum_all(t, ad::hadamard(t, p_fused, ad::sub(t, log_f, log_p)));
}

struct NegativePair {
  int x_n = -1;   // hardest other text representation for this sample's fused
  int xt_n = -1;  // hardest other fused representation for this sample's text
};

namespace detail {

inline double row_cosine(const Mat& a, Eigen::Index i, const Mat& b, Eigen::Index j) {
  const double na = a.row(i).norm();
  const double nb = b.row(j).norm();
  MMRE_CHECK(na > 1e-12 && nb > 1e-12, "hardest_negatives: zero-norm representation");
  return a.row(i).dot(b.row(j)) / (na * nb);
}

}  // namespace detail

// In-batch hardest negatives under cosine similarity; ties break to the
// smallest index. h_t and fused are B x N value matrices.
inline std::vector<NegativePair> hardest_negatives(const Mat& h_t, const Mat& fused) {
  const Eigen::Index B = h_t.rows();
  MMRE_CHECK(B >= 2, "hardest_negatives: batch of 1");
  MMRE_CHECK(fused.rows() == B && fused.cols() == h_t.cols(),
             "hardest_negatives: shape mismatch");
  std::vector<NegativePair> out(static_cast<size_t>(B));
  for (Eigen::Index i = 0; i < B; ++i) {
    double best_xn = -2.0, best_xtn = -2.0;
    for (Eigen::Index j = 0; j < B; ++j) {
      if (j == i) continue;
      const double s_xn = detail::row_cosine(h_t, j, fused, i);
      if (s_xn > best_xn) {
        best_xn = s_xn;
        out[static_cast<size_t>(i)].x_n = static_cast<int>(j);
      }
      const double s_xtn = detail::row_cosine(h_t, i, fused, j);
      if (s_xtn > best_xtn) {
        best_xtn = s_xtn;
        out[static_cast<size_t>(i)].xt_n = static_cast<int>(j);
      }
    }
  }
  return out;
}

// Mutual-identification loss over a batch. margin_triplet (default):
// mean_i [m - s(x_i,x~_i) + s(x_n,x~_i)]_+ + [m - s(x_i,x~_i) + s(x_i,x~_n)]_+.
// hinge_no_margin keeps the bare hinge [s(x,x~) - s(neg)]_+ with no margin
// term, for comparison runs against the corrected triplet form.
inline ad::NodeRef self_identification(ForwardCtx& ctx, const std::vector<ad::NodeRef>& h_t,
                                       const std::vector<ad::NodeRef>& fused,
                                       const std::vector<NegativePair>& negatives,
                                       double margin, const std::string& mode) {
  ad::Tape& t = ctx.tape;
  const size_t B = h_t.size();
  MMRE_CHECK(B >= 2 && fused.size() == B && negatives.size() == B,
             "self_identification: need a batch of at least 2");
  MMRE_CHECK(mode == "margin_triplet" || mode == "hinge_no_margin",
             "self_identification: unknown mode " + mode);
  ad::NodeRef m = t.constant(Mat::Constant(1, 1, margin));
  ad::NodeRef total = nullptr;
  for (size_t i = 0; i < B; ++i) {
    ad::NodeRef pos = ad::cosine(t, h_t[i], fused[i]);
    ad::NodeRef n1 = ad::cosine(t, h_t[static_cast<size_t>(negatives[i].x_n)], fused[i]);
    ad::NodeRef n2 = ad::cosine(t, h_t[i], fused[static_cast<size_t>(negatives[i].xt_n)]);
    ad::NodeRef term;
    if (mode == "margin_triplet") {
      term = ad::add(t, ad::relu(t, ad::add(t, ad::sub(t, m, pos), n1)),
                     ad::relu(t, ad::add(t, ad::sub(t, m, pos), n2)));
    } else {
      term = ad::add(t, ad::relu(t, ad::sub(t, pos, n1)), ad::relu(t, ad::sub(t, pos, n2)));
    }
    total = total ? ad::add(t, total, term) : term;
  }
  return ad::scale(t, total, 1.0 / static_cast<double>(B));
}

// Negative log-likelihood of the gold relation under the masked distribution.
inline ad::NodeRef classification(ForwardCtx& ctx, ad::NodeRef masked_probs, int gold) {
  ad::Tape& t = ctx.tape;
  MMRE_CHECK(gold >= 0 && gold < masked_probs->value.cols(),
             "classification: gold relation out of range");
  MMRE_CHECK(masked_probs->value(0, gold) > 0.0,
             "classification: gold relation masked out by the type pair");
  ad::NodeRef p = ad::pick(t, masked_probs, 0, gold);
  return ad::scale(t, ad::log_guard(t, p, 1e-12), -1.0);
}

struct JointLoss {
  ad::NodeRef l_d = nullptr, l_s = nullptr, l_c = nullptr, total = nullptr;
};

// total = lambda_d*l_d + lambda_s*l_s + lambda_c*l_c, accumulated in that
// order. Null components count as zero.
inline JointLoss joint(ForwardCtx& ctx, ad::NodeRef l_d, ad::NodeRef l_s, ad::NodeRef l_c,
                       const LossConfig& cfg) {
  ad::Tape& t = ctx.tape;
  cfg.validate();
  JointLoss out;
  ad::NodeRef zero = t.constant(Mat::Zero(1, 1));
  out.l_d = l_d ? l_d : zero;
  out.l_s = l_s ? l_s : zero;
  out.l_c = l_c ? l_c : zero;
  out.total = ad::add(t, ad::add(t, ad::scale(t, out.l_d, cfg.lambda_d),
                                 ad::scale(t, out.l_s, cfg.lambda_s)),
                      ad::scale(t, out.l_c, cfg.lambda_c));
  return out;
}

}  // namespace mmre
