#pragma once

#include <cmath>
#include <vector>

#include "mmre/common.hpp"
#include "mmre/params.hpp"

namespace mmre {

// Adaptive-moment optimizer with decoupled weight decay and global-norm
// gradient clipping. Only trainable parameters are registered, so a frozen
// backbone is untouched by construction.
class AdamW {
 public:
  explicit AdamW(std::vector<Parameter*> params, double lr, double weight_decay = 0.01,
                 double clip_norm = 1.0, double beta1 = 0.9, double beta2 = 0.999,
                 double eps = 1e-8)
      : params_(std::move(params)),
        lr_(lr),
        wd_(weight_decay),
        clip_(clip_norm),
        beta1_(beta1),
        beta2_(beta2),
        eps_(eps) {
    for (const Parameter* p : params_) {
      MMRE_CHECK(p->trainable, "optimizer: refusing to register a frozen parameter");
      m_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
    }
  }

  // Returns the pre-clip global gradient norm.
  double step() {
    double sq = 0.0;
    for (const Parameter* p : params_) sq += p->grad.squaredNorm();
    const double norm = std::sqrt(sq);
    MMRE_CHECK(std::isfinite(norm), "optimizer: non-finite gradient norm");
    const double scale = (clip_ > 0.0 && norm > clip_) ? clip_ / norm : 1.0;

    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (size_t i = 0; i < params_.size(); ++i) {
      Parameter& p = *params_[i];
      const Mat g = p.grad * scale;
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
      const Mat m_hat = m_[i] / bc1;
      Mat denom = (v_[i] / bc2).cwiseSqrt();
      denom.array() += eps_;
      p.value -= lr_ * (m_hat.cwiseQuotient(denom) + wd_ * p.value);
    }
    return norm;
  }

  int steps_taken() const { return t_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<Mat> m_, v_;
  double lr_, wd_, clip_, beta1_, beta2_, eps_;
  int t_ = 0;
};

}  // namespace mmre
