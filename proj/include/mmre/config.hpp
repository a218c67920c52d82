#pragma once

#include <array>
#include <json.hpp>
#include <string>
#include <vector>

#include "mmre/common.hpp"

namespace mmre {

// Frozen transformer stack dimensions. Desk-scale defaults; the full-scale
// setting (model_dim 768, layers 12) is representable but not the default.
struct BackboneConfig {
  int n_layers = 2;
  int n_heads = 2;
  int model_dim = 64;
  int ffn_dim = 128;
  int max_positions = 256;
  double dropout_rate = 0.6;

  int head_dim() const { return model_dim / n_heads; }

  void validate() const {
    MMRE_CHECK(n_layers >= 1 && n_heads >= 1 && model_dim >= 1 && ffn_dim >= 1 &&
                   max_positions >= 1,
               "backbone: dimensions must be positive");
    MMRE_CHECK(model_dim % n_heads == 0, "backbone: model_dim must be divisible by n_heads");
    MMRE_CHECK(dropout_rate >= 0.0 && dropout_rate < 1.0, "backbone: dropout must be in [0,1)");
  }
};

// Loss weighting and the switchable formulations.
struct LossConfig {
  double lambda_d = 2.0;
  double lambda_s = 2.0;
  double lambda_c = 3.0;
  double margin = 0.2;
  std::string ld_mode = "kl";              // "kl" | "cross_entropy"
  std::string ls_mode = "margin_triplet";  // "margin_triplet" | "hinge_no_margin"

  void validate() const {
    MMRE_CHECK(lambda_d >= 0 && lambda_s >= 0 && lambda_c >= 0, "loss: weights must be >= 0");
    MMRE_CHECK(margin >= 0, "loss: margin must be >= 0");
    MMRE_CHECK(ld_mode == "kl" || ld_mode == "cross_entropy", "loss: unknown ld_mode");
    MMRE_CHECK(ls_mode == "margin_triplet" || ls_mode == "hinge_no_margin",
               "loss: unknown ls_mode");
  }
};

// Everything the model needs beyond the backbone: data dims, prefix layout,
// staging, fusion, and decoder switches.
struct ModelConfig {
  BackboneConfig backbone;

  int vocab_size = 200;
  int n_types = 4;
  int n_relations = 10;  // includes "None"
  int m_blocks = 4;
  int raw_image_dim = 32;
  int raw_object_dim = 32;
  int max_objects = 10;  // K; extra objects beyond the top-K are dropped
  int max_len = 128;     // text truncation cap
  int prefix_len = 8;

  // Stage order: a permutation of "oit" (objects, image, text). Prefix
  // placement is by stage index (1-based) in that order; default both first.
  std::string order = "oit";
  int op_stage = 1;
  int ep_stage = 1;
  bool use_op = true;
  bool use_ep = true;

  bool use_fusion = true;
  bool use_fused_in_decoder = true;
  std::string alpha_mode = "cosine_ratio";  // "cosine_ratio" | "softmax"
  double delta = 0.4;
  std::vector<double> delta_vector;          // optional per-dimension trade-off
  std::string i2t_provider = "learned";      // "learned" | "precomputed"
  std::string i2t_path;                      // JSONL of {id, vec} when precomputed

  bool unfreeze_backbone = false;

  void validate() const {
    backbone.validate();
    MMRE_CHECK(vocab_size >= 2, "model: vocab_size must be >= 2");
    MMRE_CHECK(n_types >= 1 && n_relations >= 2, "model: need types and relations");
    MMRE_CHECK(m_blocks >= 1 && raw_image_dim >= 1 && raw_object_dim >= 1,
               "model: feature dims must be positive");
    MMRE_CHECK(max_objects >= 1 && max_len >= 1 && prefix_len >= 3,
               "model: max_objects/max_len/prefix_len out of range (prefix needs 2 slots)");
    MMRE_CHECK(order.size() == 3, "model: order must be a permutation of \"oit\"");
    std::array<int, 3> seen{0, 0, 0};
    for (char c : order) {
      const size_t i = c == 'o' ? 0 : c == 'i' ? 1 : c == 't' ? 2 : 3;
      MMRE_CHECK(i < 3, "model: order characters must be o, i, t");
      ++seen[i];
    }
    MMRE_CHECK(seen[0] == 1 && seen[1] == 1 && seen[2] == 1,
               "model: order must use each of o, i, t exactly once");
    MMRE_CHECK(op_stage >= 1 && op_stage <= 3 && ep_stage >= 1 && ep_stage <= 3,
               "model: prefix placement stages must be 1, 2, or 3");
    MMRE_CHECK(alpha_mode == "cosine_ratio" || alpha_mode == "softmax",
               "model: unknown alpha_mode");
    MMRE_CHECK(delta >= 0.0 && delta <= 1.0, "model: delta must be in [0,1]");
    MMRE_CHECK(delta_vector.empty() ||
                   static_cast<int>(delta_vector.size()) == backbone.model_dim,
               "model: delta_vector length must equal model_dim");
    MMRE_CHECK(i2t_provider == "learned" || i2t_provider == "precomputed",
               "model: unknown i2t_provider");
    MMRE_CHECK(i2t_provider != "precomputed" || !i2t_path.empty(),
               "model: precomputed i2t_provider needs i2t_path");
  }
};

struct TrainConfig {
  double lr = 2e-4;
  int batch_size = 100;
  int epochs = 20;
  uint64_t seed = 42;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  int eval_every = 1;                  // dev evaluations, in epochs
  double early_stop_train_acc = 0.97;  // >1 disables early stopping
  std::string data_dir;                // default corpus for runner subcommands

  void validate() const {
    MMRE_CHECK(lr > 0, "train: lr must be positive");
    MMRE_CHECK(batch_size >= 1 && epochs >= 0, "train: batch_size/epochs out of range");
    MMRE_CHECK(weight_decay >= 0 && grad_clip > 0, "train: weight_decay/grad_clip out of range");
    MMRE_CHECK(eval_every >= 1, "train: eval_every must be >= 1");
  }
};

struct Config {
  ModelConfig model;
  LossConfig loss;
  TrainConfig train;

  void validate() const {
    model.validate();
    loss.validate();
    train.validate();
  }

  nlohmann::json to_json() const {
    const BackboneConfig& b = model.backbone;
    nlohmann::json j;
    j["backbone"] = {{"n_layers", b.n_layers},     {"n_heads", b.n_heads},
                     {"model_dim", b.model_dim},   {"ffn_dim", b.ffn_dim},
                     {"max_positions", b.max_positions}, {"dropout_rate", b.dropout_rate}};
    j["model"] = {{"vocab_size", model.vocab_size},
                  {"n_types", model.n_types},
                  {"n_relations", model.n_relations},
                  {"m_blocks", model.m_blocks},
                  {"raw_image_dim", model.raw_image_dim},
                  {"raw_object_dim", model.raw_object_dim},
                  {"max_objects", model.max_objects},
                  {"max_len", model.max_len},
                  {"prefix_len", model.prefix_len},
                  {"order", model.order},
                  {"op_stage", model.op_stage},
                  {"ep_stage", model.ep_stage},
                  {"use_op", model.use_op},
                  {"use_ep", model.use_ep},
                  {"use_fusion", model.use_fusion},
                  {"use_fused_in_decoder", model.use_fused_in_decoder},
                  {"alpha_mode", model.alpha_mode},
                  {"delta", model.delta},
                  {"delta_vector", model.delta_vector},
                  {"i2t_provider", model.i2t_provider},
                  {"i2t_path", model.i2t_path},
                  {"unfreeze_backbone", model.unfreeze_backbone}};
    j["loss"] = {{"lambda_d", loss.lambda_d}, {"lambda_s", loss.lambda_s},
                 {"lambda_c", loss.lambda_c}, {"margin", loss.margin},
                 {"ld_mode", loss.ld_mode},   {"ls_mode", loss.ls_mode}};
    j["train"] = {{"lr", train.lr},
                  {"batch_size", train.batch_size},
                  {"epochs", train.epochs},
                  {"seed", train.seed},
                  {"weight_decay", train.weight_decay},
                  {"grad_clip", train.grad_clip},
                  {"eval_every", train.eval_every},
                  {"early_stop_train_acc", train.early_stop_train_acc},
                  {"data_dir", train.data_dir}};
    return j;
  }

  static Config from_json(const nlohmann::json& j) {
    Config c;
    auto get = [](const nlohmann::json& section, const char* key, auto& field) {
      if (section.contains(key)) field = section.at(key).get<std::decay_t<decltype(field)>>();
    };
    if (j.contains("backbone")) {
      const auto& s = j.at("backbone");
      BackboneConfig& b = c.model.backbone;
      get(s, "n_layers", b.n_layers);
      get(s, "n_heads", b.n_heads);
      get(s, "model_dim", b.model_dim);
      get(s, "ffn_dim", b.ffn_dim);
      get(s, "max_positions", b.max_positions);
      get(s, "dropout_rate", b.dropout_rate);
    }
    if (j.contains("model")) {
      const auto& s = j.at("model");
      ModelConfig& m = c.model;
      get(s, "vocab_size", m.vocab_size);
      get(s, "n_types", m.n_types);
      get(s, "n_relations", m.n_relations);
      get(s, "m_blocks", m.m_blocks);
      get(s, "raw_image_dim", m.raw_image_dim);
      get(s, "raw_object_dim", m.raw_object_dim);
      get(s, "max_objects", m.max_objects);
      get(s, "max_len", m.max_len);
      get(s, "prefix_len", m.prefix_len);
      get(s, "order", m.order);
      get(s, "op_stage", m.op_stage);
      get(s, "ep_stage", m.ep_stage);
      get(s, "use_op", m.use_op);
      get(s, "use_ep", m.use_ep);
      get(s, "use_fusion", m.use_fusion);
      get(s, "use_fused_in_decoder", m.use_fused_in_decoder);
      get(s, "alpha_mode", m.alpha_mode);
      get(s, "delta", m.delta);
      get(s, "delta_vector", m.delta_vector);
      get(s, "i2t_provider", m.i2t_provider);
      get(s, "i2t_path", m.i2t_path);
      get(s, "unfreeze_backbone", m.unfreeze_backbone);
    }
    if (j.contains("loss")) {
      const auto& s = j.at("loss");
      get(s, "lambda_d", c.loss.lambda_d);
      get(s, "lambda_s", c.loss.lambda_s);
      get(s, "lambda_c", c.loss.lambda_c);
      get(s, "margin", c.loss.margin);
      get(s, "ld_mode", c.loss.ld_mode);
      get(s, "ls_mode", c.loss.ls_mode);
    }
    if (j.contains("train")) {
      const auto& s = j.at("train");
      get(s, "lr", c.train.lr);
      get(s, "batch_size", c.train.batch_size);
      get(s, "epochs", c.train.epochs);
      get(s, "seed", c.train.seed);
      get(s, "weight_decay", c.train.weight_decay);
      get(s, "grad_clip", c.train.grad_clip);
      get(s, "eval_every", c.train.eval_every);
      get(s, "early_stop_train_acc", c.train.early_stop_train_acc);
      get(s, "data_dir", c.train.data_dir);
    }
    c.validate();
    return c;
  }

  // Aligns data-dependent dimensions with a generated corpus.
  void adopt_dataset_dims(int n_relations, int n_types, int m_blocks, int raw_image_dim,
                          int raw_object_dim) {
    model.n_relations = n_relations;
    model.n_types = n_types;
    model.m_blocks = m_blocks;
    model.raw_image_dim = raw_image_dim;
    model.raw_object_dim = raw_object_dim;
  }
};

}  // namespace mmre
