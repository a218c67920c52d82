#pragma once

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <json.hpp>
#include <mutex>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mmre/batch.hpp"
#include "mmre/metrics.hpp"
#include "mmre/model.hpp"
#include "mmre/synthetic.hpp"
#include "mmre/train.hpp"

namespace mmre {

namespace detail {

// MMRE_THREADS caps the worker count for independent experiment runs; every
// run owns its model and RNG state, so parallelism never changes results.
inline int thread_count(int n_tasks) {
  int n = 0;
  if (const char* env = std::getenv("MMRE_THREADS")) n = std::atoi(env);
  if (n < 1) n = static_cast<int>(std::thread::hardware_concurrency());
  if (n < 1) n = 1;
  return std::min(n, std::max(n_tasks, 1));
}

inline void parallel_tasks(int n_tasks, const std::function<void(int)>& fn) {
  const int workers = thread_count(n_tasks);
  if (workers <= 1) {
    for (int i = 0; i < n_tasks; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr first_error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const int i = next.fetch_add(1);
        if (i >= n_tasks) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ablation / placement grid
// ---------------------------------------------------------------------------

struct VariantSpec {
  std::string label;
  std::function<void(Config&)> apply;
};

// The thirteen ablation and placement rows, applied on top of a base config.
// "w/o joint objective" keeps the classification term and drops the two
// auxiliary terms.
inline std::vector<VariantSpec> ablation_variants() {
  auto stage = [](int op, int ep) {
    return [op, ep](Config& c) {
      c.model.op_stage = op;
      c.model.ep_stage = ep;
    };
  };
  return {
      {"w/o all prefixes",
       [](Config& c) {
         c.model.use_op = false;
         c.model.use_ep = false;
       }},
      {"w/o entity prefix", [](Config& c) { c.model.use_ep = false; }},
      {"w/o object prefix", [](Config& c) { c.model.use_op = false; }},
      {"w/o dual-gated fusion", [](Config& c) { c.model.use_fusion = false; }},
      {"w/o joint objective",
       [](Config& c) {
         c.loss.lambda_d = 0.0;
         c.loss.lambda_s = 0.0;
       }},
      {"all prefixes in stage 2", stage(2, 2)},
      {"all prefixes in stage 3", stage(3, 3)},
      {"entity prefix in stage 2", [](Config& c) { c.model.ep_stage = 2; }},
      {"entity prefix in stage 3", [](Config& c) { c.model.ep_stage = 3; }},
      {"object prefix in stage 2", [](Config& c) { c.model.op_stage = 2; }},
      {"object prefix in stage 3", [](Config& c) { c.model.op_stage = 3; }},
      {"entity prefix in stage 2, object prefix in stage 3", stage(3, 2)},
      {"entity prefix in stage 3, object prefix in stage 2", stage(2, 3)},
  };
}

inline const std::vector<uint64_t>& default_variant_seeds() {
  static const std::vector<uint64_t> seeds{13, 42, 2023};
  return seeds;
}

struct GridRow {
  std::string label;
  double accuracy = 0.0, precision = 0.0, recall = 0.0, f1 = 0.0;
};

namespace detail {

// Trains one configuration and reports its best-dev metrics.
inline MetricsReport run_once(Config cfg, uint64_t seed, const Dataset& train_ds,
                              const Dataset& dev_ds, const RelationSchema& schema,
                              const std::filesystem::path& scratch) {
  cfg.train.seed = seed;
  cfg.validate();
  Model model(cfg, schema);
  TrainResult res = train_model(model, train_ds, &dev_ds, scratch);
  MMRE_CHECK(res.best_epoch >= 0, "experiment run produced no dev evaluation");
  std::filesystem::remove_all(scratch);
  return res.best_dev_report;
}

inline std::string sanitize(const std::string& label) {
  std::string out;
  for (char c : label) out.push_back(std::isalnum(static_cast<unsigned char>(c)) ? c : '_');
  return out;
}

}  // namespace detail

// Full model plus the thirteen variants, each averaged over the seed set.
// Rows keep grid order (full model first); independent runs may execute in
// parallel.
inline std::vector<GridRow> run_variants(const Config& base, const Dataset& train_ds,
                                         const Dataset& dev_ds, const RelationSchema& schema,
                                         const std::filesystem::path& work_dir,
                                         const std::vector<uint64_t>& seeds =
                                             default_variant_seeds()) {
  MMRE_CHECK(!seeds.empty(), "variants: need at least one seed");
  std::vector<VariantSpec> grid;
  grid.push_back({"full model", [](Config&) {}});
  for (auto& v : ablation_variants()) grid.push_back(v);

  struct Task {
    size_t row;
    uint64_t seed;
    Config cfg;
    std::filesystem::path scratch;
  };
  std::vector<Task> tasks;
  for (size_t row = 0; row < grid.size(); ++row) {
    for (uint64_t seed : seeds) {
      Config cfg = base;
      grid[row].apply(cfg);
      tasks.push_back({row, seed, cfg,
                       work_dir / (detail::sanitize(grid[row].label) + "_s" +
                                   std::to_string(seed))});
    }
  }

  std::vector<std::vector<MetricsReport>> per_row(grid.size());
  for (auto& v : per_row) v.reserve(seeds.size());
  std::mutex mu;
  detail::parallel_tasks(static_cast<int>(tasks.size()), [&](int i) {
    const Task& t = tasks[static_cast<size_t>(i)];
    MetricsReport rep = detail::run_once(t.cfg, t.seed, train_ds, dev_ds, schema, t.scratch);
    std::lock_guard<std::mutex> lock(mu);
    per_row[t.row].push_back(rep);
  });

  std::vector<GridRow> rows;
  for (size_t r = 0; r < grid.size(); ++r) {
    GridRow row;
    row.label = grid[r].label;
    for (const MetricsReport& rep : per_row[r]) {
      row.accuracy += rep.accuracy;
      row.precision += rep.precision;
      row.recall += rep.recall;
      row.f1 += rep.f1;
    }
    const double n = static_cast<double>(per_row[r].size());
    row.accuracy /= n;
    row.precision /= n;
    row.recall /= n;
    row.f1 /= n;
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Input-order study
// ---------------------------------------------------------------------------

inline std::string order_label(const std::string& order) {
  std::string out;
  for (size_t i = 0; i < order.size(); ++i) {
    if (i > 0) out += "->";
    out += std::string("I_") + order[i];
  }
  return out;
}

// All six segment permutations with the base seed, sorted by F1 (descending;
// ties keep the permutation list order).
inline std::vector<GridRow> run_orders(const Config& base, const Dataset& train_ds,
                                       const Dataset& dev_ds, const RelationSchema& schema,
                                       const std::filesystem::path& work_dir) {
  const std::vector<std::string> orders{"oit", "oti", "iot", "ito", "toi", "tio"};
  std::vector<GridRow> rows(orders.size());
  detail::parallel_tasks(static_cast<int>(orders.size()), [&](int i) {
    Config cfg = base;
    cfg.model.order = orders[static_cast<size_t>(i)];
    MetricsReport rep =
        detail::run_once(cfg, base.train.seed, train_ds, dev_ds, schema,
                         work_dir / ("order_" + orders[static_cast<size_t>(i)]));
    GridRow& row = rows[static_cast<size_t>(i)];
    row.label = order_label(orders[static_cast<size_t>(i)]);
    row.accuracy = rep.accuracy;
    row.precision = rep.precision;
    row.recall = rep.recall;
    row.f1 = rep.f1;
  });
  std::stable_sort(rows.begin(), rows.end(),
                   [](const GridRow& a, const GridRow& b) { return a.f1 > b.f1; });
  return rows;
}

// ---------------------------------------------------------------------------
// Image-proportion sweep
// ---------------------------------------------------------------------------

// Zeroes the visual features (image blocks and object rows) of a
// deterministic (1 - keep) fraction of samples, chosen by a stable hash of
// the sample id so the subset never depends on file or shuffle order.
inline Dataset zero_visual_fraction(const Dataset& ds, double keep) {
  MMRE_CHECK(keep >= 0.0 && keep <= 1.0, "image proportion must be in [0,1]");
  Dataset out = ds;
  const size_t n = out.samples.size();
  const size_t n_zero = static_cast<size_t>(std::llround((1.0 - keep) * static_cast<double>(n)));
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
    const uint64_t ha = detail::fnv1a(out.samples[a].id);
    const uint64_t hb = detail::fnv1a(out.samples[b].id);
    return ha != hb ? ha < hb : out.samples[a].id < out.samples[b].id;
  });
  for (size_t i = 0; i < n_zero; ++i) {
    Sample& s = out.samples[idx[i]];
    s.image_feature.setZero();
    s.object_features.setZero();
  }
  return out;
}

// Retrains per proportion on the partially blinded corpus (train and eval
// splits are blinded by the same rule) and reports best-dev metrics.
inline std::vector<GridRow> run_image_proportion(const Config& base, const Dataset& train_ds,
                                                 const Dataset& dev_ds,
                                                 const RelationSchema& schema,
                                                 const std::vector<double>& proportions,
                                                 const std::filesystem::path& work_dir) {
  MMRE_CHECK(!proportions.empty(), "image proportion sweep: no proportions given");
  std::vector<GridRow> rows(proportions.size());
  detail::parallel_tasks(static_cast<int>(proportions.size()), [&](int i) {
    const double p = proportions[static_cast<size_t>(i)];
    Dataset blinded_train = zero_visual_fraction(train_ds, p);
    Dataset blinded_dev = zero_visual_fraction(dev_ds, p);
    std::ostringstream label;
    label << std::setprecision(6) << p;
    MetricsReport rep = detail::run_once(base, base.train.seed, blinded_train, blinded_dev,
                                         schema, work_dir / ("prop_" + label.str()));
    GridRow& row = rows[static_cast<size_t>(i)];
    row.label = label.str();
    row.accuracy = rep.accuracy;
    row.precision = rep.precision;
    row.recall = rep.recall;
    row.f1 = rep.f1;
  });
  return rows;
}

// ---------------------------------------------------------------------------
// Table serialization
// ---------------------------------------------------------------------------

inline std::string rows_to_table(const std::vector<GridRow>& rows, const std::string& key_name,
                                 char sep) {
  std::ostringstream out;
  out << std::setprecision(10);
  out << key_name << sep << "accuracy" << sep << "precision" << sep << "recall" << sep << "f1"
      << "\n";
  for (const GridRow& r : rows) {
    out << r.label << sep << r.accuracy << sep << r.precision << sep << r.recall << sep << r.f1
        << "\n";
  }
  return out.str();
}

inline std::string rows_to_tsv(const std::vector<GridRow>& rows, const std::string& key_name) {
  return rows_to_table(rows, key_name, '\t');
}

inline std::string rows_to_csv(const std::vector<GridRow>& rows, const std::string& key_name) {
  return rows_to_table(rows, key_name, ',');
}

// ---------------------------------------------------------------------------
// Gate inspection
// ---------------------------------------------------------------------------

// Qualitative dump of the fusion internals for one sample: object-attention
// weights with their ranking, gate norms, and the semantic channel magnitude.
inline nlohmann::json inspect_gates(Model& model, const Sample& s) {
  ad::Tape tape;
  ForwardCtx ctx{tape};
  Model::SampleForward f = model.forward_sample(ctx, s, false);

  nlohmann::json j;
  j["id"] = s.id;
  j["head_type"] = model.schema.entity_types()[static_cast<size_t>(s.head_type)];
  j["tail_type"] = model.schema.entity_types()[static_cast<size_t>(s.tail_type)];
  j["predicted_relation"] =
      model.schema.relations()[static_cast<size_t>(f.pred_fused.predicted)];
  std::vector<double> probs;
  for (Eigen::Index r = 0; r < f.pred_fused.masked_probs->value.cols(); ++r)
    probs.push_back(f.pred_fused.masked_probs->value(0, r));
  j["relation_probabilities"] = probs;
  j["selected_objects"] = {{"head", f.enc.o_e1_index}, {"tail", f.enc.o_e2_index}};

  if (!model.cfg.model.use_fusion) {
    j["fusion"] = "disabled";
    return j;
  }
  const Mat& alpha = f.fus.alpha->value;
  std::vector<double> alpha_v;
  for (Eigen::Index k = 0; k < alpha.cols(); ++k) alpha_v.push_back(alpha(0, k));
  std::vector<int> ranking(alpha_v.size());
  std::iota(ranking.begin(), ranking.end(), 0);
  std::stable_sort(ranking.begin(), ranking.end(),
                   [&](int a, int b) { return alpha_v[static_cast<size_t>(a)] >
                                              alpha_v[static_cast<size_t>(b)]; });
  Mat semantic = f.fus.h_i2t->value;
  if (model.cfg.model.delta_vector.empty()) {
    semantic *= model.cfg.model.delta;
  } else {
    for (Eigen::Index c = 0; c < semantic.cols(); ++c)
      semantic(0, c) *= model.cfg.model.delta_vector[static_cast<size_t>(c)];
  }
  j["fusion"] = {{"alpha", alpha_v},
                 {"alpha_sum", alpha.sum()},
                 {"alpha_uniform_fallback", f.fus.alpha_uniform_fallback},
                 {"alpha_ranking", ranking},
                 {"beta_norm", f.fus.beta->value.norm()},
                 {"gamma_norm", f.fus.gamma->value.norm()},
                 {"gamma_mean_abs", f.fus.gamma->value.cwiseAbs().mean()},
                 {"semantic_channel_norm", semantic.norm()}};
  return j;
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

struct GradCheckRow {
  std::string group;
  size_t n_scalars = 0;
  bool frozen = false;
  double max_rel_err = 0.0;      // trainable groups
  double max_frozen_grad = 0.0;  // frozen groups: must stay exactly zero
};

struct GradCheckReport {
  std::vector<GradCheckRow> rows;
  double runtime_seconds = 0.0;

  double worst_trainable_error() const {
    double worst = 0.0;
    for (const auto& r : rows) {
      if (!r.frozen) worst = std::max(worst, r.max_rel_err);
    }
    return worst;
  }

  std::string to_text() const {
    std::ostringstream out;
    out << std::left << std::setw(14) << "group" << std::setw(10) << "scalars"
        << "max rel err\n";
    for (const auto& r : rows) {
      out << std::left << std::setw(14) << r.group << std::setw(10) << r.n_scalars;
      if (r.frozen) {
        out << "no gradient expected (frozen); max accumulated |grad| = " << r.max_frozen_grad;
      } else {
        out << std::setprecision(3) << std::scientific << r.max_rel_err << std::defaultfloat;
      }
      out << "\n";
    }
    return out.str();
  }
};

// Central finite differences against the tape gradients of the full joint
// objective at toy dimensions, one row per parameter group. Weights are
// nudged off their init first so every path (fusion gates, consistency,
// hinge) carries signal. A fourth-order five-point stencil lets the step be
// large enough (1e-4) that round-off from the long forward graph stays well
// below the 1e-5 reporting scale, while truncation is O(h^4).
inline GradCheckReport grad_check(uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();

  SyntheticSpec spec;
  spec.n_train = 4;
  spec.n_dev = 0;
  spec.n_test = 0;
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
  spec.seed = seed;

  Config cfg;
  cfg.model.backbone.n_layers = 2;
  cfg.model.backbone.n_heads = 2;
  cfg.model.backbone.model_dim = 16;
  cfg.model.backbone.ffn_dim = 32;
  cfg.model.backbone.max_positions = 64;
  cfg.model.backbone.dropout_rate = 0.0;
  cfg.model.vocab_size = spec.vocab_size;
  cfg.model.prefix_len = 4;
  cfg.model.max_len = 32;
  cfg.model.max_objects = 3;
  cfg.train.seed = seed;
  cfg.adopt_dataset_dims(spec.n_relations, spec.n_types, spec.m_blocks, spec.raw_image_dim,
                         spec.raw_object_dim);
  cfg.validate();

  Dataset data = generate_synthetic(spec, "train");
  Model model(cfg, synthetic_schema(spec));
  Rng nudge(Rng::mix(seed, 0x6C));
  for (Parameter* p : model.store.trainable()) {
    for (Eigen::Index i = 0; i < p->value.rows(); ++i)
      for (Eigen::Index c = 0; c < p->value.cols(); ++c)
        p->value(i, c) += 0.05 * nudge.normal();
  }

  std::vector<const Sample*> ptrs;
  for (const Sample& s : data.samples) ptrs.push_back(&s);
  Batch batch = make_batch(ptrs);

  auto loss_value = [&]() {
    ad::Tape tape;
    return model.batch_loss(tape, batch).total;
  };

  // One backward pass for the analytic gradients of everything.
  model.store.zero_grads();
  {
    ad::Tape tape;
    Model::BatchResult res = model.batch_loss(tape, batch);
    tape.backward(res.total_node);
    tape.apply_param_grads();
  }

  GradCheckReport report;
  const double h = 1e-4;
  for (auto& [group, params] : model.store.by_group()) {
    GradCheckRow row;
    row.group = group;
    for (Parameter* p : params) {
      row.n_scalars += static_cast<size_t>(p->value.size());
      if (!p->trainable) {
        row.frozen = true;
        row.max_frozen_grad = std::max(row.max_frozen_grad, p->grad.cwiseAbs().maxCoeff());
        continue;
      }
      for (Eigen::Index i = 0; i < p->value.rows(); ++i) {
        for (Eigen::Index c = 0; c < p->value.cols(); ++c) {
          const double orig = p->value(i, c);
          auto at = [&](double x) {
            p->value(i, c) = x;
            return loss_value();
          };
          const double f1 = at(orig + h), f2 = at(orig + 2 * h);
          const double fm1 = at(orig - h), fm2 = at(orig - 2 * h);
          p->value(i, c) = orig;
          const double fd = (-f2 + 8.0 * f1 - 8.0 * fm1 + fm2) / (12.0 * h);
          const double an = p->grad(i, c);
          const double err = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-4});
          row.max_rel_err = std::max(row.max_rel_err, err);
        }
      }
    }
    report.rows.push_back(row);
  }
  report.runtime_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace mmre
