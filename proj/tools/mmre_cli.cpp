// Command-line surface for the relation-extraction stack: synthetic corpus
// generation, training, evaluation, the experiment runners, gate inspection,
// and the finite-difference gradient check.

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <string>
#include <vector>

#include "mmre/checkpoint.hpp"
#include "mmre/corpus.hpp"
#include "mmre/experiments.hpp"
#include "mmre/metrics.hpp"
#include "mmre/model.hpp"
#include "mmre/train.hpp"

namespace fs = std::filesystem;

namespace {

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in.good()) throw mmre::Error("cannot open " + path.string());
  nlohmann::json j;
  in >> j;
  return j;
}

mmre::Config load_config(const fs::path& path) {
  mmre::Config cfg = mmre::Config::from_json(read_json_file(path));
  cfg.validate();
  return cfg;
}

// A checkpoint argument may be the directory written by `train` (preferring
// the best-dev snapshot) or a direct file path.
fs::path resolve_checkpoint(const fs::path& given) {
  if (fs::is_directory(given)) {
    if (fs::exists(given / "best.ckpt")) return given / "best.ckpt";
    if (fs::exists(given / "final.ckpt")) return given / "final.ckpt";
    throw mmre::Error("no best.ckpt or final.ckpt under " + given.string());
  }
  return given;
}

// Aligns dimension fields that are dictated by the corpus rather than chosen
// by the experimenter.
void adopt_corpus(mmre::Config& cfg, const mmre::Dataset& ds) {
  cfg.adopt_dataset_dims(ds.schema.num_relations(), ds.schema.num_types(), ds.m_blocks,
                         ds.raw_image_dim, ds.raw_object_dim);
  cfg.validate();
}

void emit_table(const std::string& table, const fs::path& file) {
  std::cout << table;
  std::ofstream out(file);
  if (!out.good()) throw mmre::Error("cannot write " + file.string());
  out << table;
  std::cerr << "table written to " << file.string() << "\n";
}

fs::path scratch_dir() {
  return fs::temp_directory_path() /
         ("mmre_runs_" + std::to_string(static_cast<unsigned long long>(
                             std::chrono::steady_clock::now().time_since_epoch().count())));
}

struct RunnerInputs {
  mmre::Config cfg;
  mmre::RelationSchema schema;
  mmre::Dataset train_ds, dev_ds;
};

RunnerInputs load_runner_inputs(const fs::path& config_path) {
  RunnerInputs in;
  in.cfg = load_config(config_path);
  if (in.cfg.train.data_dir.empty())
    throw mmre::Error("config has no train.data_dir; this command reads its corpus from there");
  const fs::path data = in.cfg.train.data_dir;
  in.schema = mmre::load_corpus_schema(data);
  in.train_ds = mmre::load_split(data, in.schema, "train");
  in.dev_ds = mmre::load_split(data, in.schema, "dev");
  adopt_corpus(in.cfg, in.train_ds);
  return in;
}

int run(int argc, char** argv) {
  CLI::App app{"multi-modal relation extraction toolkit"};
  app.require_subcommand(1);

  // gen-data
  std::string gd_spec, gd_out;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic corpus with a planted rule");
  gen->add_option("--spec", gd_spec, "generation spec (JSON)")->required();
  gen->add_option("--out", gd_out, "output corpus directory")->required();

  // train
  std::string tr_config, tr_data, tr_out;
  auto* tr = app.add_subcommand("train", "train a model and checkpoint it");
  tr->add_option("--config", tr_config, "config (JSON)")->required();
  tr->add_option("--data", tr_data, "corpus directory (overrides train.data_dir)");
  tr->add_option("--out", tr_out, "checkpoint/log output directory")->required();

  // eval
  std::string ev_ckpt, ev_data, ev_split = "test";
  bool ev_macro = false;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a corpus split");
  ev->add_option("--ckpt", ev_ckpt, "checkpoint directory or file")->required();
  ev->add_option("--data", ev_data, "corpus directory")->required();
  ev->add_option("--split", ev_split, "split name (train/dev/test)");
  ev->add_flag("--macro", ev_macro, "macro-average precision/recall/F1");

  // variants
  std::string va_config, va_out = "variants.tsv";
  auto* va = app.add_subcommand("variants", "ablation/placement grid, mean over seeds");
  va->add_option("--config", va_config, "base config (JSON); corpus from train.data_dir")
      ->required();
  va->add_option("--out", va_out, "table file (TSV)");

  // orders
  std::string or_config, or_out = "orders.tsv";
  auto* ord = app.add_subcommand("orders", "all six segment-order permutations");
  ord->add_option("--config", or_config, "base config (JSON); corpus from train.data_dir")
      ->required();
  ord->add_option("--out", or_out, "table file (TSV)");

  // image-prop
  std::string ip_config, ip_props, ip_out = "image_prop.csv";
  auto* ip = app.add_subcommand("image-prop", "retrain with a fraction of images blanked");
  ip->add_option("--config", ip_config, "base config (JSON); corpus from train.data_dir")
      ->required();
  ip->add_option("--props", ip_props, "comma-separated image proportions in [0,1]")->required();
  ip->add_option("--out", ip_out, "curve file (CSV)");

  // inspect
  std::string in_ckpt, in_id, in_data;
  auto* ins = app.add_subcommand("inspect", "dump fusion gates for one sample");
  ins->add_option("--ckpt", in_ckpt, "checkpoint directory or file")->required();
  ins->add_option("--id", in_id, "sample id to inspect")->required();
  ins->add_option("--data", in_data, "corpus directory (default: checkpoint's train.data_dir)");

  // gradcheck
  uint64_t gc_seed = 1;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient check at toy dims");
  gc->add_option("--seed", gc_seed, "random seed");

  CLI11_PARSE(app, argc, argv);

  if (*gen) {
    mmre::SyntheticSpec spec = mmre::SyntheticSpec::from_json(read_json_file(gd_spec));
    mmre::write_corpus(spec, gd_out);
    for (const std::string& split : {"train", "dev", "test"}) {
      const auto ds = mmre::load_split(gd_out, mmre::load_corpus_schema(gd_out), split);
      std::cout << split << ": " << ds.size() << " samples\n";
    }
    std::cout << "corpus written to " << gd_out << "\n";
    return 0;
  }

  if (*tr) {
    mmre::Config cfg = load_config(tr_config);
    if (!tr_data.empty()) cfg.train.data_dir = tr_data;
    if (cfg.train.data_dir.empty())
      throw mmre::Error("no corpus: pass --data or set train.data_dir in the config");
    const fs::path data = cfg.train.data_dir;
    const mmre::RelationSchema schema = mmre::load_corpus_schema(data);
    mmre::Dataset train_ds = mmre::load_split(data, schema, "train");
    mmre::Dataset dev_ds = mmre::load_split(data, schema, "dev");
    adopt_corpus(cfg, train_ds);
    mmre::Model model(cfg, schema);
    mmre::TrainResult res =
        mmre::train_model(model, train_ds, dev_ds.size() > 0 ? &dev_ds : nullptr, tr_out,
                          /*quiet=*/false);
    nlohmann::json j{{"epochs_run", res.epochs_run},
                     {"steps", res.steps},
                     {"early_stopped", res.early_stopped},
                     {"final_train_accuracy", res.final_train_accuracy},
                     {"best_epoch", res.best_epoch},
                     {"best_dev_f1", res.best_dev_f1},
                     {"log", res.log_path.string()},
                     {"final_checkpoint", res.final_checkpoint.string()},
                     {"best_checkpoint", res.best_checkpoint.string()}};
    std::cout << j.dump(2) << "\n";
    return 0;
  }

  if (*ev) {
    std::unique_ptr<mmre::Model> model = mmre::checkpoint::load(resolve_checkpoint(ev_ckpt));
    const mmre::RelationSchema schema = mmre::load_corpus_schema(ev_data);
    mmre::Dataset ds = mmre::load_split(ev_data, schema, ev_split);
    mmre::MetricsReport rep = mmre::evaluate(*model, ds, ev_macro);
    std::cout << rep.to_json(schema).dump(2) << "\n";
    return 0;
  }

  if (*va) {
    RunnerInputs in = load_runner_inputs(va_config);
    const fs::path work = scratch_dir();
    const auto rows = mmre::run_variants(in.cfg, in.train_ds, in.dev_ds, in.schema, work);
    fs::remove_all(work);
    emit_table(mmre::rows_to_tsv(rows, "variant"), va_out);
    return 0;
  }

  if (*ord) {
    RunnerInputs in = load_runner_inputs(or_config);
    const fs::path work = scratch_dir();
    const auto rows = mmre::run_orders(in.cfg, in.train_ds, in.dev_ds, in.schema, work);
    fs::remove_all(work);
    emit_table(mmre::rows_to_tsv(rows, "order"), or_out);
    return 0;
  }

  if (*ip) {
    RunnerInputs in = load_runner_inputs(ip_config);
    std::vector<double> props;
    std::stringstream ss(ip_props);
    for (std::string tok; std::getline(ss, tok, ',');) {
      if (!tok.empty()) props.push_back(std::stod(tok));
    }
    if (props.empty()) throw mmre::Error("--props parsed to an empty list");
    const fs::path work = scratch_dir();
    const auto rows =
        mmre::run_image_proportion(in.cfg, in.train_ds, in.dev_ds, in.schema, props, work);
    fs::remove_all(work);
    emit_table(mmre::rows_to_csv(rows, "proportion"), ip_out);
    return 0;
  }

  if (*ins) {
    std::unique_ptr<mmre::Model> model = mmre::checkpoint::load(resolve_checkpoint(in_ckpt));
    const fs::path data = in_data.empty() ? fs::path(model->cfg.train.data_dir) : fs::path(in_data);
    if (data.empty())
      throw mmre::Error("no corpus: pass --data or train with data_dir in the config");
    const mmre::RelationSchema schema = mmre::load_corpus_schema(data);
    for (const std::string& split : {"train", "dev", "test"}) {
      if (!fs::exists(data / (split + ".jsonl"))) continue;
      mmre::Dataset ds = mmre::load_split(data, schema, split);
      for (const mmre::Sample& s : ds.samples) {
        if (s.id == in_id) {
          nlohmann::json j = mmre::inspect_gates(*model, s);
          j["split"] = split;
          std::cout << j.dump(2) << "\n";
          return 0;
        }
      }
    }
    throw mmre::Error("sample id not found in any split: " + in_id);
  }

  if (*gc) {
    mmre::GradCheckReport rep = mmre::grad_check(gc_seed);
    std::cout << rep.to_text();
    std::cout << "worst trainable max rel err: " << rep.worst_trainable_error() << " ("
              << rep.runtime_seconds << " s)\n";
    const bool ok = rep.worst_trainable_error() < 1e-5;
    std::cout << (ok ? "gradcheck: OK\n" : "gradcheck: FAILED\n");
    return ok ? 0 : 1;
  }

  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
