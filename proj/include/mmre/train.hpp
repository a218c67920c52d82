#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <string>

#include "mmre/batch.hpp"
#include "mmre/checkpoint.hpp"
#include "mmre/metrics.hpp"
#include "mmre/model.hpp"
#include "mmre/optimizer.hpp"

namespace mmre {

struct TrainResult {
  int epochs_run = 0;
  int steps = 0;
  double best_dev_f1 = -1.0;  // stays -1 without a dev split
  int best_epoch = -1;
  double final_train_accuracy = 0.0;
  bool early_stopped = false;
  std::filesystem::path best_checkpoint;
  std::filesystem::path final_checkpoint;
  std::filesystem::path log_path;
  MetricsReport last_dev_report;
  MetricsReport best_dev_report;
};

// Mini-batch training of the trainable groups (the frozen backbone never
// registers with the optimizer). Per-epoch shuffling, periodic dev
// evaluation with best-dev checkpointing, and an eval-mode train-accuracy
// early stop. Deterministic for a fixed config and seed.
inline TrainResult train_model(Model& model, const Dataset& train_ds, const Dataset* dev_ds,
                               const std::filesystem::path& out_dir, bool quiet = true) {
  const Config& cfg = model.cfg;
  MMRE_CHECK(train_ds.size() > 0, "train: empty training split");
  std::filesystem::create_directories(out_dir);

  TrainResult result;
  result.log_path = out_dir / "train_log.csv";
  result.best_checkpoint = out_dir / "best.ckpt";
  result.final_checkpoint = out_dir / "final.ckpt";

  std::ofstream log(result.log_path);
  MMRE_CHECK(log.good(), "train: cannot write " + result.log_path.string());
  log << "step,l_d,l_s,l_c,total,learning rate\n" << std::setprecision(17);

  AdamW opt(model.store.trainable(), cfg.train.lr, cfg.train.weight_decay,
            cfg.train.grad_clip);
  Rng dropout_rng(Rng::mix(cfg.train.seed, 0xD407));
  const bool want_pairs = cfg.loss.lambda_s > 0;

  auto train_accuracy = [&]() {
    long correct = 0;
    for (const Sample& s : train_ds.samples) {
      if (model.predict(s) == s.relation) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(train_ds.size());
  };

  double best_f1 = -std::numeric_limits<double>::infinity();
  for (int epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
    BatchIterator batches(train_ds, cfg.train.batch_size,
                          Rng::mix(cfg.train.seed, static_cast<uint64_t>(epoch)),
                          /*shuffle=*/true, want_pairs);
    Batch batch;
    while (batches.next(&batch)) {
      ad::Tape tape;
      Model::BatchResult res = model.batch_loss(tape, batch, &dropout_rng);
      ++result.steps;
      MMRE_CHECK(std::isfinite(res.total),
                 "train: diverged at step " + std::to_string(result.steps) +
                     " (non-finite loss; lower the learning rate or check the data)");
      model.store.zero_grads();
      tape.backward(res.total_node);
      tape.apply_param_grads();
      opt.step();
      log << result.steps << ',' << res.l_d << ',' << res.l_s << ',' << res.l_c << ','
          << res.total << ',' << cfg.train.lr << '\n';
    }
    result.epochs_run = epoch;

    const bool eval_now = epoch % cfg.train.eval_every == 0 || epoch == cfg.train.epochs;
    if (!eval_now) continue;
    if (dev_ds != nullptr && dev_ds->size() > 0) {
      MetricsReport rep = evaluate(model, *dev_ds);
      result.last_dev_report = rep;
      if (rep.f1 > best_f1) {
        best_f1 = rep.f1;
        result.best_dev_f1 = rep.f1;
        result.best_epoch = epoch;
        result.best_dev_report = rep;
        checkpoint::save(model, result.best_checkpoint);
      }
      if (!quiet) {
        std::fprintf(stderr, "epoch %d dev f1 %.4f acc %.4f\n", epoch, rep.f1, rep.accuracy);
      }
    }
    if (cfg.train.early_stop_train_acc <= 1.0) {
      const double acc = train_accuracy();
      if (acc >= cfg.train.early_stop_train_acc) {
        result.early_stopped = true;
        break;
      }
    }
  }

  result.final_train_accuracy = train_accuracy();
  checkpoint::save(model, result.final_checkpoint);
  if (result.best_epoch < 0) {
    // No dev split (or no evaluation ran): the final state is the best known.
    checkpoint::save(model, result.best_checkpoint);
  }
  log.close();
  return result;
}

}  // namespace mmre
