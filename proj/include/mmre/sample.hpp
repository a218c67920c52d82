#pragma once

#include <string>
#include <vector>

#include "mmre/common.hpp"
#include "mmre/schema.hpp"

namespace mmre {

// Token index range [begin, end), 0-based.
struct Span {
  int begin = 0;
  int end = 0;
  int length() const { return end - begin; }
  bool contains(int i) const { return i >= begin && i < end; }
};

inline bool spans_overlap(const Span& a, const Span& b) {
  return a.begin < b.end && b.begin < a.end;
}

// One relation-extraction instance: a token sequence with two entity spans,
// a block-structured image feature, and ROI-ranked object features.
struct Sample {
  std::string id;
  std::vector<int> tokens;
  Span head_span;
  Span tail_span;
  int head_type = -1;
  int tail_type = -1;
  Mat image_feature;          // M x raw_image_dim
  Mat object_features;        // K x raw_object_dim, rows sorted by roi_scores desc
  std::vector<double> roi_scores;
  int relation = -1;          // -1 when unlabeled
};

// Structural checks. Returns human-readable violations; empty means valid.
inline std::vector<std::string> validate_sample(const Sample& s, const RelationSchema& schema) {
  std::vector<std::string> v;
  const int len = static_cast<int>(s.tokens.size());
  if (len == 0) v.push_back("empty token sequence");
  auto check_span = [&](const Span& sp, const char* which) {
    if (sp.begin < 0 || sp.end > len || sp.length() <= 0)
      v.push_back(std::string(which) + " span out of range");
  };
  check_span(s.head_span, "head");
  check_span(s.tail_span, "tail");
  if (spans_overlap(s.head_span, s.tail_span)) v.push_back("entity spans overlap");
  if (s.head_type < 0 || s.head_type >= schema.num_types()) v.push_back("head type out of range");
  if (s.tail_type < 0 || s.tail_type >= schema.num_types()) v.push_back("tail type out of range");
  if (s.relation >= schema.num_relations()) v.push_back("relation id out of range");
  if (s.image_feature.rows() == 0 || s.image_feature.cols() == 0)
    v.push_back("empty image feature");
  if (s.object_features.rows() == 0) v.push_back("empty object list");
  if (static_cast<int>(s.roi_scores.size()) != s.object_features.rows())
    v.push_back("roi score count does not match object count");
  for (size_t k = 1; k < s.roi_scores.size(); ++k)
    if (s.roi_scores[k] > s.roi_scores[k - 1]) {
      v.push_back("object list not sorted by descending roi score");
      break;
    }
  if (!all_finite(s.image_feature) || !all_finite(s.object_features))
    v.push_back("non-finite feature value");
  for (double r : s.roi_scores)
    if (!std::isfinite(r)) {
      v.push_back("non-finite roi score");
      break;
    }
  if (s.relation >= 0 && s.head_type >= 0 && s.head_type < schema.num_types() &&
      s.tail_type >= 0 && s.tail_type < schema.num_types() &&
      !schema.compatible(s.head_type, s.tail_type, s.relation))
    v.push_back("relation incompatible with entity type pair");
  return v;
}

}  // namespace mmre
