// Training loop, evaluation metrics, and experiment-runner plumbing.

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>

#include "mmre/corpus.hpp"
#include "mmre/experiments.hpp"
#include "mmre/metrics.hpp"
#include "mmre/train.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace mmre;
using namespace mmre::testutil;

namespace {

RelationSchema open_schema() {
  // Explicit compatibility entries allowing every relation for the A->A pair.
  std::vector<CompatEntry> compat;
  for (const std::string r : {"r1", "r2", "r3"}) compat.push_back({r, "A", "A"});
  return RelationSchema({"None", "r1", "r2", "r3"}, {"A", "B"}, compat);
}

fs::path fresh_dir(const std::string& tag) {
  const fs::path dir = fs::temp_directory_path() / ("mmre_harness_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream in(p);
  EXPECT_TRUE(in.good()) << p;
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  return lines;
}

}  // namespace

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

TEST(Metrics, HandCountedMicroAverages) {
  const RelationSchema schema = open_schema();
  // 6 true positives on r1, 2 false positives (gold None, predicted r2),
  // 2 false negatives (gold r3, predicted None).
  std::vector<int> gold{1, 1, 1, 1, 1, 1, 0, 0, 3, 3};
  std::vector<int> pred{1, 1, 1, 1, 1, 1, 2, 2, 0, 0};
  const MetricsReport rep = compute_metrics(gold, pred, schema);
  EXPECT_DOUBLE_EQ(rep.accuracy, 0.6);
  EXPECT_DOUBLE_EQ(rep.precision, 0.75);
  EXPECT_DOUBLE_EQ(rep.recall, 0.75);
  EXPECT_DOUBLE_EQ(rep.f1, 0.75);
  EXPECT_TRUE(rep.warnings.empty());
}

TEST(Metrics, PerfectPredictionsScoreOneEverywhere) {
  const RelationSchema schema = open_schema();
  std::vector<int> gold{1, 2, 3, 1, 2};
  const MetricsReport rep = compute_metrics(gold, gold, schema);
  EXPECT_DOUBLE_EQ(rep.accuracy, 1.0);
  EXPECT_DOUBLE_EQ(rep.precision, 1.0);
  EXPECT_DOUBLE_EQ(rep.recall, 1.0);
  EXPECT_DOUBLE_EQ(rep.f1, 1.0);
}

TEST(Metrics, AllNonePredictionsReportZeroWithAWarning) {
  const RelationSchema schema = open_schema();
  std::vector<int> gold{1, 2, 3};
  std::vector<int> pred{0, 0, 0};
  const MetricsReport rep = compute_metrics(gold, pred, schema);
  EXPECT_DOUBLE_EQ(rep.accuracy, 0.0);
  EXPECT_DOUBLE_EQ(rep.precision, 0.0);  // zero predicted positives
  EXPECT_DOUBLE_EQ(rep.recall, 0.0);
  EXPECT_DOUBLE_EQ(rep.f1, 0.0);
  EXPECT_FALSE(rep.warnings.empty());
}

TEST(Metrics, MacroAveragesPerRelationRates) {
  const RelationSchema schema = open_schema();
  // r1: tp=1 fp=1 -> P=0.5, R=1. r2: tp=1 -> P=R=1. r3: never gold or
  // predicted -> contributes zeros (with warnings) to the macro means.
  std::vector<int> gold{1, 0, 2};
  std::vector<int> pred{1, 1, 2};
  const MetricsReport rep = compute_metrics(gold, pred, schema, /*macro=*/true);
  EXPECT_TRUE(rep.macro);
  EXPECT_NEAR(rep.precision, (0.5 + 1.0 + 0.0) / 3.0, 1e-12);
  EXPECT_NEAR(rep.recall, (1.0 + 1.0 + 0.0) / 3.0, 1e-12);
  EXPECT_NEAR(rep.f1, harmonic_f1(rep.precision, rep.recall), 1e-12);
  EXPECT_FALSE(rep.warnings.empty());
}

TEST(Metrics, F1IsTheHarmonicMeanOnRandomReports) {
  const RelationSchema schema = open_schema();
  Rng rng(404);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> gold, pred;
    for (int i = 0; i < 40; ++i) {
      gold.push_back(rng.uniform_int(0, 3));
      pred.push_back(rng.uniform_int(0, 3));
    }
    const MetricsReport rep = compute_metrics(gold, pred, schema);
    EXPECT_NEAR(rep.f1, harmonic_f1(rep.precision, rep.recall), 1e-9);
    EXPECT_GE(rep.accuracy, 0.0);
    EXPECT_LE(rep.accuracy, 1.0);
  }
}

TEST(Metrics, MismatchedOrEmptyInputsAreRejected) {
  const RelationSchema schema = open_schema();
  EXPECT_THROW(compute_metrics({1, 2}, {1}, schema), Error);
  EXPECT_THROW(compute_metrics({}, {}, schema), Error);
}

TEST(Metrics, ConfigFingerprintTracksTheConfig) {
  Config a;
  Config b;
  EXPECT_EQ(config_fingerprint(a), config_fingerprint(b));
  b.train.lr *= 2;
  EXPECT_NE(config_fingerprint(a), config_fingerprint(b));
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace {

// Small corpus + config for fast end-to-end training tests.
struct TrainFixture {
  SyntheticSpec spec;
  Config cfg;
  Dataset train, dev;

  TrainFixture() {
    spec = tiny_spec();
    spec.n_train = 50;
    spec.n_dev = 12;
    cfg = tiny_config(spec);
    cfg.train.batch_size = 5;
    cfg.train.epochs = 2;
    cfg.train.lr = 1e-3;
    cfg.model.backbone.dropout_rate = 0.0;
    cfg.validate();
    train = generate_synthetic(spec, "train");
    dev = generate_synthetic(spec, "dev");
  }
};

}  // namespace

TEST(Training, WritesTheLogWithTheExactHeaderAndOneRowPerStep) {
  TrainFixture fx;
  const fs::path out = fresh_dir("log");
  Model model(fx.cfg, fx.train.schema);
  const TrainResult res = train_model(model, fx.train, &fx.dev, out);
  EXPECT_EQ(res.epochs_run, 2);
  EXPECT_EQ(res.steps, 2 * 10);  // 50 samples / batch 5
  const auto lines = read_lines(res.log_path);
  ASSERT_EQ(lines.size(), static_cast<size_t>(res.steps) + 1);
  EXPECT_EQ(lines[0], "step,l_d,l_s,l_c,total,learning rate");
  int step = 0;
  for (size_t i = 1; i < lines.size(); ++i) {
    std::stringstream ss(lines[i]);
    std::string field;
    std::vector<double> vals;
    while (std::getline(ss, field, ',')) vals.push_back(std::stod(field));
    ASSERT_EQ(vals.size(), 6u) << lines[i];
    EXPECT_EQ(static_cast<int>(vals[0]), ++step);
    EXPECT_DOUBLE_EQ(vals[5], fx.cfg.train.lr);
    EXPECT_TRUE(std::isfinite(vals[4]));
  }
}

TEST(Training, SmoothedLossIsMostlyNonIncreasing) {
  TrainFixture fx;
  const fs::path out = fresh_dir("smooth");
  Model model(fx.cfg, fx.train.schema);
  train_model(model, fx.train, nullptr, out);
  const auto lines = read_lines(out / "train_log.csv");
  std::vector<double> total;
  for (size_t i = 1; i < lines.size(); ++i) {
    const size_t last = lines[i].find_last_of(',');
    const size_t prev = lines[i].find_last_of(',', last - 1);
    total.push_back(std::stod(lines[i].substr(prev + 1, last - prev - 1)));
  }
  // Smooth over disjoint 5-step blocks: the self-identification term varies
  // with each shuffled batch's composition, and block means average that out
  // while leaving the optimization trend.
  const size_t w = 5;
  ASSERT_EQ(total.size() % w, 0u);
  std::vector<double> smooth;
  for (size_t i = 0; i + w <= total.size(); i += w) {
    double s = 0;
    for (size_t k = 0; k < w; ++k) s += total[i + k];
    smooth.push_back(s / static_cast<double>(w));
  }
  ASSERT_GE(smooth.size(), 4u);
  int down = 0;
  for (size_t i = 1; i < smooth.size(); ++i) down += smooth[i] <= smooth[i - 1] + 1e-12;
  EXPECT_GE(static_cast<double>(down) / static_cast<double>(smooth.size() - 1), 0.9);
}

TEST(Training, SameConfigAndSeedReproducesIdenticalMetrics) {
  TrainFixture fx;
  const fs::path out_a = fresh_dir("det_a");
  const fs::path out_b = fresh_dir("det_b");
  Model model_a(fx.cfg, fx.train.schema);
  Model model_b(fx.cfg, fx.train.schema);
  const TrainResult a = train_model(model_a, fx.train, &fx.dev, out_a);
  const TrainResult b = train_model(model_b, fx.train, &fx.dev, out_b);
  EXPECT_EQ(a.final_train_accuracy, b.final_train_accuracy);
  EXPECT_EQ(a.best_dev_f1, b.best_dev_f1);
  EXPECT_EQ(a.last_dev_report.accuracy, b.last_dev_report.accuracy);
  for (Parameter* p : model_a.store.all()) {
    Parameter* q = model_b.store.find(p->name);
    ASSERT_NE(q, nullptr) << p->name;
    EXPECT_TRUE(bitwise_equal(p->value, q->value)) << p->name;
  }
}

TEST(Training, BestCheckpointRoundTripsAndPredictsLikeTheLiveModel) {
  TrainFixture fx;
  const fs::path out = fresh_dir("ckpt");
  Model model(fx.cfg, fx.train.schema);
  const TrainResult res = train_model(model, fx.train, &fx.dev, out);
  ASSERT_GE(res.best_epoch, 1);
  auto loaded = checkpoint::load(res.final_checkpoint);
  for (const Sample& s : fx.dev.samples) {
    EXPECT_EQ(loaded->predict(s), model.predict(s)) << s.id;
  }
  // The best snapshot exists and loads; it may predate the final state.
  auto best = checkpoint::load(res.best_checkpoint);
  EXPECT_EQ(best->cfg.train.seed, fx.cfg.train.seed);
}

TEST(Training, EarlyStopHaltsAtTheAccuracyThreshold) {
  TrainFixture fx;
  fx.cfg.train.epochs = 50;
  fx.cfg.train.early_stop_train_acc = 0.0;  // satisfied immediately
  const fs::path out = fresh_dir("early");
  Model model(fx.cfg, fx.train.schema);
  const TrainResult res = train_model(model, fx.train, &fx.dev, out);
  EXPECT_TRUE(res.early_stopped);
  EXPECT_EQ(res.epochs_run, 1);
}

TEST(Training, NonFiniteForwardAbortsWithADiagnostic) {
  // A non-finite forward is caught by whichever validation layer sees it
  // first (encoder state guard, masked-probability checks, or the training
  // loop's own loss check) — training must abort, never write a checkpoint.
  TrainFixture fx;
  const fs::path out = fresh_dir("diverge");
  Model model(fx.cfg, fx.train.schema);
  Parameter* head = model.store.find("decoder.head.w");
  ASSERT_NE(head, nullptr);
  head->value.setConstant(std::numeric_limits<double>::quiet_NaN());
  try {
    train_model(model, fx.train, nullptr, out);
    FAIL() << "expected an abort";
  } catch (const Error& e) {
    EXPECT_GT(std::string(e.what()).size(), 0u);
  }
  EXPECT_FALSE(fs::exists(out / "final.ckpt"));
}

TEST(Training, EmptySplitIsRejected) {
  TrainFixture fx;
  Dataset empty;
  empty.schema = fx.train.schema;
  Model model(fx.cfg, fx.train.schema);
  EXPECT_THROW(train_model(model, empty, nullptr, fresh_dir("empty")), Error);
}

// ---------------------------------------------------------------------------
// Corpus round trip
// ---------------------------------------------------------------------------

TEST(Corpus, WriteThenLoadPreservesEverySplit) {
  SyntheticSpec spec = tiny_spec();
  const fs::path dir = fresh_dir("corpus");
  write_corpus(spec, dir);
  for (const std::string name :
       {"schema.json", "meta.json", "spec.json", "train.jsonl", "dev.jsonl", "test.jsonl"}) {
    EXPECT_TRUE(fs::exists(dir / name)) << name;
  }
  const RelationSchema schema = load_corpus_schema(dir);
  EXPECT_EQ(schema.num_relations(), spec.n_relations);
  const Dataset train = load_split(dir, schema, "train");
  const Dataset direct = generate_synthetic(spec, "train");
  ASSERT_EQ(train.size(), direct.size());
  for (int i = 0; i < train.size(); ++i) {
    EXPECT_EQ(train.samples[static_cast<size_t>(i)].id, direct.samples[static_cast<size_t>(i)].id);
    EXPECT_EQ(train.samples[static_cast<size_t>(i)].relation,
              direct.samples[static_cast<size_t>(i)].relation);
  }
}

// ---------------------------------------------------------------------------
// Experiment helpers
// ---------------------------------------------------------------------------

TEST(Variants, GridHasThirteenUniquelyLabeledRows) {
  const auto grid = ablation_variants();
  EXPECT_EQ(grid.size(), 13u);
  std::set<std::string> labels;
  for (const auto& v : grid) labels.insert(v.label);
  EXPECT_EQ(labels.size(), grid.size());
  EXPECT_TRUE(labels.count("w/o all prefixes"));
  EXPECT_TRUE(labels.count("w/o dual-gated fusion"));
  EXPECT_TRUE(labels.count("w/o joint objective"));
}

TEST(Variants, JointObjectiveRowOnlyDropsTheAuxiliaryTerms) {
  Config cfg;
  for (const auto& v : ablation_variants()) {
    if (v.label != "w/o joint objective") continue;
    v.apply(cfg);
    EXPECT_DOUBLE_EQ(cfg.loss.lambda_d, 0.0);
    EXPECT_DOUBLE_EQ(cfg.loss.lambda_s, 0.0);
    EXPECT_GT(cfg.loss.lambda_c, 0.0);
    return;
  }
  FAIL() << "row missing";
}

TEST(Orders, LabelsUseTheSegmentArrowNotation) {
  EXPECT_EQ(order_label("oit"), "I_o->I_i->I_t");
  EXPECT_EQ(order_label("tio"), "I_t->I_i->I_o");
}

TEST(ImageProportion, ZeroingIsDeterministicAndNested) {
  SyntheticSpec spec = tiny_spec();
  spec.n_train = 30;
  const Dataset ds = generate_synthetic(spec, "train");

  const Dataset full = zero_visual_fraction(ds, 1.0);
  for (int i = 0; i < ds.size(); ++i) {
    EXPECT_TRUE(bitwise_equal(full.samples[static_cast<size_t>(i)].image_feature,
                              ds.samples[static_cast<size_t>(i)].image_feature));
  }

  const Dataset none = zero_visual_fraction(ds, 0.0);
  for (const Sample& s : none.samples) {
    EXPECT_EQ(s.image_feature.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(s.object_features.cwiseAbs().maxCoeff(), 0.0);
  }

  auto zeroed_ids = [](const Dataset& d) {
    std::set<std::string> ids;
    for (const Sample& s : d.samples) {
      if (s.image_feature.cwiseAbs().maxCoeff() == 0.0) ids.insert(s.id);
    }
    return ids;
  };
  const auto a = zeroed_ids(zero_visual_fraction(ds, 0.4));
  const auto b = zeroed_ids(zero_visual_fraction(ds, 0.4));
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.size(), static_cast<size_t>(std::llround(0.6 * 30)));
  // Lowering the kept proportion only grows the blanked subset.
  const auto c = zeroed_ids(zero_visual_fraction(ds, 0.2));
  for (const auto& id : a) EXPECT_TRUE(c.count(id)) << id;
  EXPECT_THROW(zero_visual_fraction(ds, 1.5), Error);
}

TEST(Tables, SerializeAtFullPrecisionWithTheRequestedSeparator) {
  std::vector<GridRow> rows{{"full model", 0.9123456789, 0.8, 0.7, 0.75},
                            {"w/o x", 0.5, 0.25, 0.125, 1.0 / 6}};
  const std::string tsv = rows_to_tsv(rows, "variant");
  std::stringstream ss(tsv);
  std::string line;
  std::getline(ss, line);
  EXPECT_EQ(line, "variant\taccuracy\tprecision\trecall\tf1");
  std::getline(ss, line);
  EXPECT_EQ(line, "full model\t0.9123456789\t0.8\t0.7\t0.75");
  const std::string csv = rows_to_csv(rows, "proportion");
  EXPECT_NE(csv.find("proportion,accuracy,precision,recall,f1"), std::string::npos);
  EXPECT_NE(csv.find("0.1666666667"), std::string::npos);
}

// ---------------------------------------------------------------------------
// Gate inspection
// ---------------------------------------------------------------------------

TEST(Inspect, DumpRoundTripsThroughJsonAndRanksAlpha) {
  Rig rig;
  randomize_params(rig.model->store, 99);
  const Sample& s = rig.train.samples[0];
  const nlohmann::json j = inspect_gates(*rig.model, s);
  const nlohmann::json back = nlohmann::json::parse(j.dump());
  EXPECT_EQ(back.at("id").get<std::string>(), s.id);

  const auto& fus = back.at("fusion");
  const auto alpha = fus.at("alpha").get<std::vector<double>>();
  ASSERT_FALSE(alpha.empty());
  if (!fus.at("alpha_uniform_fallback").get<bool>()) {
    EXPECT_NEAR(fus.at("alpha_sum").get<double>(), 1.0, 1e-9);
  }
  const auto ranking = fus.at("alpha_ranking").get<std::vector<int>>();
  ASSERT_EQ(ranking.size(), alpha.size());
  const int top = static_cast<int>(
      std::max_element(alpha.begin(), alpha.end()) - alpha.begin());
  EXPECT_EQ(ranking[0], top);
  for (size_t i = 1; i < ranking.size(); ++i) {
    EXPECT_GE(alpha[static_cast<size_t>(ranking[i - 1])], alpha[static_cast<size_t>(ranking[i])]);
  }
  const auto probs = back.at("relation_probabilities").get<std::vector<double>>();
  double sum = 0;
  for (double p : probs) sum += p;
  EXPECT_NEAR(sum, 1.0, 1e-9);
}

TEST(Inspect, ReportsFusionDisabledWhenTheBlockIsOff) {
  Rig rig(nullptr, [](Config& c) { c.model.use_fusion = false; });
  const nlohmann::json j = inspect_gates(*rig.model, rig.train.samples[0]);
  EXPECT_EQ(j.at("fusion").get<std::string>(), "disabled");
}
