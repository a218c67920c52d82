#pragma once

#include <iomanip>
#include <json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "mmre/config.hpp"
#include "mmre/dataset.hpp"
#include "mmre/model.hpp"
#include "mmre/schema.hpp"

namespace mmre {

// Evaluation summary. Accuracy counts every sample; precision/recall/F1 score
// the non-"None" relations, micro-averaged by default with a macro option.
// Zero-denominator metrics are reported as 0 alongside a warning.
struct MetricsReport {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  bool macro = false;
  int n_samples = 0;
  std::vector<long> gold_counts, pred_counts, correct_counts;  // per relation id
  std::string config_fingerprint;
  std::vector<std::string> warnings;

  nlohmann::json to_json(const RelationSchema& schema) const {
    nlohmann::json per;
    for (size_t r = 0; r < gold_counts.size(); ++r) {
      per[schema.relations()[r]] = {{"gold", gold_counts[r]},
                                    {"predicted", pred_counts[r]},
                                    {"correct", correct_counts[r]}};
    }
    return nlohmann::json{{"accuracy", accuracy},
                          {"precision", precision},
                          {"recall", recall},
                          {"f1", f1},
                          {"averaging", macro ? "macro" : "micro"},
                          {"n_samples", n_samples},
                          {"per_relation", per},
                          {"config_fingerprint", config_fingerprint},
                          {"warnings", warnings}};
  }
};

// FNV-1a over the canonical config JSON; ties a report to the exact settings
// that produced it.
inline std::string config_fingerprint(const Config& cfg) {
  const std::string s = cfg.to_json().dump();
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << h;
  return out.str();
}

inline double harmonic_f1(double p, double r) { return p + r > 0 ? 2.0 * p * r / (p + r) : 0.0; }

// gold/pred aligned vectors of relation ids; relation 0 is "None".
inline MetricsReport compute_metrics(const std::vector<int>& gold, const std::vector<int>& pred,
                                     const RelationSchema& schema, bool macro = false) {
  MMRE_CHECK(gold.size() == pred.size() && !gold.empty(),
             "metrics: gold/prediction lists must align and be non-empty");
  const int R = schema.num_relations();
  MetricsReport rep;
  rep.macro = macro;
  rep.n_samples = static_cast<int>(gold.size());
  rep.gold_counts.assign(static_cast<size_t>(R), 0);
  rep.pred_counts.assign(static_cast<size_t>(R), 0);
  rep.correct_counts.assign(static_cast<size_t>(R), 0);

  long exact = 0;
  for (size_t i = 0; i < gold.size(); ++i) {
    MMRE_CHECK(gold[i] >= 0 && gold[i] < R && pred[i] >= 0 && pred[i] < R,
               "metrics: relation id out of range");
    ++rep.gold_counts[static_cast<size_t>(gold[i])];
    ++rep.pred_counts[static_cast<size_t>(pred[i])];
    if (gold[i] == pred[i]) {
      ++exact;
      ++rep.correct_counts[static_cast<size_t>(gold[i])];
    }
  }
  rep.accuracy = static_cast<double>(exact) / static_cast<double>(gold.size());

  auto guarded = [&rep](long num, long den, const char* what) {
    if (den == 0) {
      rep.warnings.push_back(std::string("undefined ") + what + " (zero denominator); using 0");
      return 0.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
  };

  if (!macro) {
    long tp = 0, pred_pos = 0, gold_pos = 0;
    for (int r = 1; r < R; ++r) {
      tp += rep.correct_counts[static_cast<size_t>(r)];
      pred_pos += rep.pred_counts[static_cast<size_t>(r)];
      gold_pos += rep.gold_counts[static_cast<size_t>(r)];
    }
    rep.precision = guarded(tp, pred_pos, "micro precision");
    rep.recall = guarded(tp, gold_pos, "micro recall");
  } else {
    double p_sum = 0.0, r_sum = 0.0;
    for (int r = 1; r < R; ++r) {
      p_sum += guarded(rep.correct_counts[static_cast<size_t>(r)],
                       rep.pred_counts[static_cast<size_t>(r)], "per-relation precision");
      r_sum += guarded(rep.correct_counts[static_cast<size_t>(r)],
                       rep.gold_counts[static_cast<size_t>(r)], "per-relation recall");
    }
    rep.precision = p_sum / static_cast<double>(R - 1);
    rep.recall = r_sum / static_cast<double>(R - 1);
  }
  rep.f1 = harmonic_f1(rep.precision, rep.recall);
  return rep;
}

// Runs the deployment prediction path over a dataset and scores it.
inline MetricsReport evaluate(Model& model, const Dataset& ds, bool macro = false) {
  MMRE_CHECK(ds.size() > 0, "evaluate: empty dataset");
  std::vector<int> gold, pred;
  gold.reserve(static_cast<size_t>(ds.size()));
  pred.reserve(static_cast<size_t>(ds.size()));
  for (const Sample& s : ds.samples) {
    MMRE_CHECK(s.relation >= 0, "evaluate: unlabeled sample " + s.id);
    gold.push_back(s.relation);
    pred.push_back(model.predict(s));
  }
  MetricsReport rep = compute_metrics(gold, pred, model.schema, macro);
  rep.config_fingerprint = config_fingerprint(model.cfg);
  return rep;
}

}  // namespace mmre
