#pragma once

#include <fstream>
#include <json.hpp>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmre/batch.hpp"
#include "mmre/config.hpp"
#include "mmre/decoder.hpp"
#include "mmre/encoder.hpp"
#include "mmre/fusion.hpp"
#include "mmre/objectives.hpp"
#include "mmre/schema.hpp"

namespace mmre {

// The assembled network: frozen backbone plus the trainable groups
// (projections, prefix, fusion, decoder). Parameter initialization is fully
// determined by the training seed.
class Model {
 public:
  Model(Config config, RelationSchema schema)
      : cfg(std::move(config)), schema(std::move(schema)) {
    cfg.validate();
    MMRE_CHECK(this->schema.num_relations() == cfg.model.n_relations,
               "model: config n_relations does not match schema");
    MMRE_CHECK(this->schema.num_types() == cfg.model.n_types,
               "model: config n_types does not match schema");
    Rng rng(Rng::mix(cfg.train.seed, 0x1217));
    backbone = BackboneParams::create(store, cfg.model.backbone, rng,
                                      cfg.model.unfreeze_backbone);
    proj = ProjectionParams::create(store, cfg.model, rng);
    prefix = PrefixParams::create(store, cfg.model, rng);
    fusion = FusionParams::create(store, cfg.model, rng);
    decoder = DecoderParams::create(store, cfg.model, rng);
    if (cfg.model.i2t_provider == "precomputed") load_i2t_table(cfg.model.i2t_path);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  struct SampleForward {
    EncoderOutputs enc;
    FusionState fus;              // populated when fusion is enabled
    ad::NodeRef fused = nullptr;  // fusion output, or h_t when fusion is off
    DecodeOut dec_fused, dec_plain;
    RelationPrediction pred_fused, pred_plain;
  };

  SampleForward forward_sample(ForwardCtx& ctx, const Sample& s, bool need_plain) {
    SampleForward f;
    f.enc = encode(ctx, backbone, proj, prefix, cfg.model, s);
    if (cfg.model.use_fusion) {
      Mat stored;
      const Mat* pre = nullptr;
      if (cfg.model.i2t_provider == "precomputed") {
        auto it = i2t_table.find(s.id);
        MMRE_CHECK(it != i2t_table.end(), "model: missing precomputed i2t entry for \"" +
                                              s.id + "\"");
        stored = it->second;
        pre = &stored;
      }
      f.fus = fuse_forward(ctx, fusion, cfg.model, f.enc.h_t, f.enc.h_o, f.enc.h_i_pooled, pre);
      f.fused = f.fus.fused;
    } else {
      f.fused = f.enc.h_t;
    }
    const int heads = cfg.model.backbone.n_heads;
    ad::NodeRef fused_for_decoder = cfg.model.use_fused_in_decoder ? f.fused : nullptr;
    f.dec_fused = decode(ctx, decoder, heads, f.enc.all_states, f.enc.pooled_row,
                         fused_for_decoder, s.head_type, s.tail_type);
    f.pred_fused = predict_relation(ctx, decoder, f.dec_fused.r_rep, s.head_type, s.tail_type,
                                    schema);
    if (need_plain) {
      f.dec_plain = decode(ctx, decoder, heads, f.enc.all_states, f.enc.pooled_row, nullptr,
                           s.head_type, s.tail_type);
      f.pred_plain = predict_relation(ctx, decoder, f.dec_plain.r_rep, s.head_type,
                                      s.tail_type, schema);
    }
    return f;
  }

  struct BatchResult {
    ad::NodeRef total_node = nullptr;
    double l_d = 0, l_s = 0, l_c = 0, total = 0;
    std::vector<int> predictions;
    std::vector<NegativePair> negatives;
  };

  // Joint loss over a batch. A batch of one contributes no self-identification
  // term (it needs in-batch negatives).
  BatchResult batch_loss(ad::Tape& tape, const Batch& batch, Rng* dropout_rng = nullptr) {
    ForwardCtx ctx{tape, dropout_rng ? cfg.model.backbone.dropout_rate : 0.0, dropout_rng};
    const int B = batch.size();
    const bool need_ld = cfg.loss.lambda_d > 0;
    const bool need_ls = cfg.loss.lambda_s > 0 && B >= 2;

    std::vector<ad::NodeRef> lc_terms, ld_terms, ht_rows, fused_rows;
    BatchResult res;
    for (int i = 0; i < B; ++i) {
      const Sample& s = *batch.samples[static_cast<size_t>(i)];
      MMRE_CHECK(s.relation >= 0, "model: training requires labeled samples");
      SampleForward f = forward_sample(ctx, s, need_ld);
      res.predictions.push_back(f.pred_fused.predicted);
      lc_terms.push_back(classification(ctx, f.pred_fused.masked_probs, s.relation));
      if (need_ld)
        ld_terms.push_back(distribution_consistency(ctx, f.pred_fused.masked_probs,
                                                    f.pred_plain.masked_probs,
                                                    cfg.loss.ld_mode));
      if (need_ls) {
        ht_rows.push_back(f.enc.h_t);
        fused_rows.push_back(f.fused);
      }
    }

    auto mean_of = [&](const std::vector<ad::NodeRef>& terms) -> ad::NodeRef {
      ad::NodeRef sum = nullptr;
      for (ad::NodeRef term : terms) sum = sum ? ad::add(tape, sum, term) : term;
      return ad::scale(tape, sum, 1.0 / static_cast<double>(terms.size()));
    };

    ad::NodeRef l_c = mean_of(lc_terms);
    ad::NodeRef l_d = need_ld ? mean_of(ld_terms) : nullptr;
    ad::NodeRef l_s = nullptr;
    if (need_ls) {
      Mat H(B, cfg.model.backbone.model_dim), F(B, cfg.model.backbone.model_dim);
      for (int i = 0; i < B; ++i) {
        H.row(i) = ht_rows[static_cast<size_t>(i)]->value.row(0);
        F.row(i) = fused_rows[static_cast<size_t>(i)]->value.row(0);
      }
      res.negatives = hardest_negatives(H, F);
      l_s = self_identification(ctx, ht_rows, fused_rows, res.negatives, cfg.loss.margin,
                                cfg.loss.ls_mode);
    }
    JointLoss jl = joint(ctx, l_d, l_s, l_c, cfg.loss);
    res.total_node = jl.total;
    res.l_d = jl.l_d->value(0, 0);
    res.l_s = jl.l_s->value(0, 0);
    res.l_c = jl.l_c->value(0, 0);
    res.total = jl.total->value(0, 0);
    return res;
  }

  // Deployment path prediction; dropout off, no loss graph.
  int predict(const Sample& s) {
    ad::Tape tape;
    ForwardCtx ctx{tape};
    return forward_sample(ctx, s, false).pred_fused.predicted;
  }

  // Masked relation distribution for one sample.
  Mat score_all(const Sample& s) {
    ad::Tape tape;
    ForwardCtx ctx{tape};
    return forward_sample(ctx, s, false).pred_fused.masked_probs->value;
  }

  Config cfg;
  RelationSchema schema;
  ParamStore store;
  BackboneParams backbone;
  ProjectionParams proj;
  PrefixParams prefix;
  FusionParams fusion;
  DecoderParams decoder;
  std::unordered_map<std::string, Mat> i2t_table;

 private:
  void load_i2t_table(const std::string& path) {
    std::ifstream in(path);
    MMRE_CHECK(in.good(), "model: cannot open i2t file: " + path);
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw Error(path + ":" + std::to_string(line_no) + ": bad JSON: " + e.what());
      }
      const auto vec = j.at("vec").get<std::vector<double>>();
      MMRE_CHECK(static_cast<int>(vec.size()) == cfg.model.backbone.model_dim,
                 path + ":" + std::to_string(line_no) + ": vec length != model_dim");
      Mat m(1, cfg.model.backbone.model_dim);
      for (Eigen::Index i = 0; i < m.cols(); ++i) m(0, i) = vec[static_cast<size_t>(i)];
      i2t_table[j.at("id").get<std::string>()] = std::move(m);
    }
  }
};

}  // namespace mmre
