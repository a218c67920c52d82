#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <vector>

#include "mmre/model.hpp"
#include "mmre/synthetic.hpp"

namespace mmre::testutil {

inline SyntheticSpec tiny_spec() {
  SyntheticSpec spec;
  spec.n_train = 8;
  spec.n_dev = 4;
  spec.n_test = 4;
  spec.vocab_size = 60;
  spec.n_types = 4;
  spec.n_relations = 10;
  spec.objects_per_sample = 3;
  spec.m_blocks = 2;
  spec.raw_image_dim = 8;
  spec.raw_object_dim = 8;
  spec.text_len_min = 6;
  spec.text_len_max = 10;
  spec.noise_std = 0.1;
  spec.seed = 7;
  return spec;
}

inline Config tiny_config(const SyntheticSpec& spec) {
  Config cfg;
  cfg.model.backbone.n_layers = 2;
  cfg.model.backbone.n_heads = 2;
  cfg.model.backbone.model_dim = 16;
  cfg.model.backbone.ffn_dim = 32;
  cfg.model.backbone.max_positions = 128;
  cfg.model.vocab_size = spec.vocab_size;
  cfg.model.n_types = spec.n_types;
  cfg.model.n_relations = spec.n_relations;
  cfg.model.m_blocks = spec.m_blocks;
  cfg.model.raw_image_dim = spec.raw_image_dim;
  cfg.model.raw_object_dim = spec.raw_object_dim;
  cfg.model.max_objects = 10;
  cfg.model.max_len = 64;
  cfg.model.prefix_len = 4;
  cfg.train.batch_size = 4;
  cfg.validate();
  return cfg;
}

// A generated corpus plus a model sized to it. Tweaks run before generation.
struct Rig {
  SyntheticSpec spec;
  Config cfg;
  Dataset train;
  std::unique_ptr<Model> model;

  explicit Rig(const std::function<void(SyntheticSpec&)>& spec_tweak = nullptr,
               const std::function<void(Config&)>& cfg_tweak = nullptr) {
    spec = tiny_spec();
    if (spec_tweak) spec_tweak(spec);
    cfg = tiny_config(spec);
    if (cfg_tweak) cfg_tweak(cfg);
    cfg.validate();
    train = generate_synthetic(spec, "train");
    model = std::make_unique<Model>(cfg, synthetic_schema(spec));
  }
};

// Central finite differences of a scalar probe against accumulated gradients.
inline double fd_max_rel_err(const std::vector<Parameter*>& params,
                             const std::function<ad::NodeRef(ad::Tape&)>& probe,
                             double h = 1e-6) {
  for (auto* p : params) p->grad.setZero();
  {
    ad::Tape tape;
    ad::NodeRef loss = probe(tape);
    tape.backward(loss);
    tape.apply_param_grads();
  }
  double worst = 0.0;
  for (auto* p : params) {
    for (Eigen::Index i = 0; i < p->value.rows(); ++i) {
      for (Eigen::Index j = 0; j < p->value.cols(); ++j) {
        const double orig = p->value(i, j);
        p->value(i, j) = orig + h;
        ad::Tape tp;
        const double fp = probe(tp)->value(0, 0);
        p->value(i, j) = orig - h;
        ad::Tape tm;
        const double fm = probe(tm)->value(0, 0);
        p->value(i, j) = orig;
        const double fd = (fp - fm) / (2.0 * h);
        const double an = p->grad(i, j);
        const double err = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-4});
        worst = std::max(worst, err);
      }
    }
  }
  return worst;
}

inline Mat random_mat(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
  return m;
}

inline bool bitwise_equal(const Mat& a, const Mat& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
}

// Nudges every trainable tensor off its (often zero) initialization so paths
// gated by zero-init weights carry signal.
inline void randomize_params(ParamStore& store, uint64_t seed, double scale = 0.05) {
  Rng rng(Rng::mix(seed, 1));
  for (Parameter* p : store.trainable()) {
    for (Eigen::Index i = 0; i < p->value.rows(); ++i)
      for (Eigen::Index j = 0; j < p->value.cols(); ++j) p->value(i, j) += scale * rng.normal();
  }
}

}  // namespace mmre::testutil
