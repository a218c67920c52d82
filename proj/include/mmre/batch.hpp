#pragma once

#include <numeric>
#include <vector>

#include "mmre/common.hpp"
#include "mmre/dataset.hpp"
#include "mmre/rng.hpp"

namespace mmre {

// Fixed-size view over samples with padded token / object blocks. Feature
// matrices stay per-sample (the encoder consumes one sequence at a time);
// the padded forms and masks serve shape-uniform consumers and checks.
struct Batch {
  std::vector<const Sample*> samples;
  Eigen::MatrixXi tokens;  // B x Lmax, pad = 0
  Mat token_mask;          // B x Lmax, 1 = real token
  Mat object_mask;         // B x Kmax, 1 = real object row
  std::vector<Span> head_spans, tail_spans;
  std::vector<int> head_types, tail_types, labels;  // label -1 when absent

  int size() const { return static_cast<int>(samples.size()); }
  int max_tokens() const { return static_cast<int>(tokens.cols()); }
  int max_objects() const { return static_cast<int>(object_mask.cols()); }
};

inline Batch make_batch(const std::vector<const Sample*>& samples) {
  MMRE_CHECK(!samples.empty(), "batch: empty sample list");
  Batch b;
  b.samples = samples;
  const int B = b.size();
  int lmax = 0, kmax = 0;
  for (const Sample* s : samples) {
    lmax = std::max(lmax, static_cast<int>(s->tokens.size()));
    kmax = std::max(kmax, static_cast<int>(s->object_features.rows()));
  }
  b.tokens = Eigen::MatrixXi::Zero(B, lmax);
  b.token_mask = Mat::Zero(B, lmax);
  b.object_mask = Mat::Zero(B, kmax);
  for (int i = 0; i < B; ++i) {
    const Sample& s = *samples[static_cast<size_t>(i)];
    for (size_t p = 0; p < s.tokens.size(); ++p) {
      b.tokens(i, static_cast<Eigen::Index>(p)) = s.tokens[p];
      b.token_mask(i, static_cast<Eigen::Index>(p)) = 1.0;
    }
    for (Eigen::Index k = 0; k < s.object_features.rows(); ++k) b.object_mask(i, k) = 1.0;
    b.head_spans.push_back(s.head_span);
    b.tail_spans.push_back(s.tail_span);
    b.head_types.push_back(s.head_type);
    b.tail_types.push_back(s.tail_type);
    b.labels.push_back(s.relation);
  }
  return b;
}

// Walks a dataset once in batches; the final batch may be smaller. A fresh
// iterator (with a per-epoch seed) gives each epoch its own order.
class BatchIterator {
 public:
  BatchIterator(const Dataset& ds, int batch_size, uint64_t seed, bool shuffle,
                bool self_identification_enabled = false)
      : ds_(ds), batch_size_(batch_size) {
    MMRE_CHECK(batch_size_ >= 1, "batch: batch size must be positive");
    MMRE_CHECK(batch_size_ >= 2 || !self_identification_enabled,
               "batch: batch size must be at least 2 when the self-identification loss is "
               "enabled");
    MMRE_CHECK(ds.size() > 0, "batch: empty dataset");
    order_.resize(static_cast<size_t>(ds.size()));
    std::iota(order_.begin(), order_.end(), 0);
    if (shuffle) {
      Rng rng(seed);
      rng.shuffle(order_);
    }
  }

  bool next(Batch* out) {
    if (cursor_ >= static_cast<int>(order_.size())) return false;
    const int end = std::min(cursor_ + batch_size_, static_cast<int>(order_.size()));
    std::vector<const Sample*> samples;
    for (int i = cursor_; i < end; ++i)
      samples.push_back(&ds_.samples[static_cast<size_t>(order_[static_cast<size_t>(i)])]);
    cursor_ = end;
    *out = make_batch(samples);
    return true;
  }

  int num_batches() const {
    return (static_cast<int>(order_.size()) + batch_size_ - 1) / batch_size_;
  }

 private:
  const Dataset& ds_;
  int batch_size_;
  std::vector<int> order_;
  int cursor_ = 0;
};

}  // namespace mmre
