#pragma once

#include <algorithm>
#include <json.hpp>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "mmre/common.hpp"
#include "mmre/dataset.hpp"
#include "mmre/rng.hpp"

namespace mmre {

// Parameters of the planted-rule generator. Every non-None relation owns one
// unit direction in object space and one in image space; each sample hides
// the directions of its relation in one object row and one image block.
struct SyntheticSpec {
  int n_train = 1000;
  int n_dev = 200;
  int n_test = 200;
  int vocab_size = 200;
  int n_types = 4;
  int n_relations = 10;        // includes "None" at index 0
  int relations_per_pair = 3;  // relations sharing one type pair
  int objects_per_sample = 6;
  int m_blocks = 4;
  int raw_image_dim = 32;
  int raw_object_dim = 32;
  int text_len_min = 8;
  int text_len_max = 16;
  double noise_std = 0.1;
  uint64_t seed = 7;

  nlohmann::json to_json() const {
    return nlohmann::json{{"n_train", n_train},
                          {"n_dev", n_dev},
                          {"n_test", n_test},
                          {"vocab_size", vocab_size},
                          {"n_types", n_types},
                          {"n_relations", n_relations},
                          {"relations_per_pair", relations_per_pair},
                          {"objects_per_sample", objects_per_sample},
                          {"m_blocks", m_blocks},
                          {"raw_image_dim", raw_image_dim},
                          {"raw_object_dim", raw_object_dim},
                          {"text_len_min", text_len_min},
                          {"text_len_max", text_len_max},
                          {"noise_std", noise_std},
                          {"seed", seed}};
  }

  static SyntheticSpec from_json(const nlohmann::json& j) {
    SyntheticSpec s;
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("n_train", s.n_train);
    get("n_dev", s.n_dev);
    get("n_test", s.n_test);
    get("vocab_size", s.vocab_size);
    get("n_types", s.n_types);
    get("n_relations", s.n_relations);
    get("relations_per_pair", s.relations_per_pair);
    get("objects_per_sample", s.objects_per_sample);
    get("m_blocks", s.m_blocks);
    get("raw_image_dim", s.raw_image_dim);
    get("raw_object_dim", s.raw_object_dim);
    get("text_len_min", s.text_len_min);
    get("text_len_max", s.text_len_max);
    get("noise_std", s.noise_std);
    get("seed", s.seed);
    return s;
  }
};

// Ground truth behind a generated corpus, exported so downstream checks can
// recover labels without running any model.
struct SyntheticMeta {
  Mat directions_obj;                             // (C+1) x raw_object_dim, row 0 zero
  Mat directions_img;                             // (C+1) x raw_image_dim, row 0 zero
  std::vector<std::pair<int, int>> relation_pairs;  // relation -> (head_type, tail_type)

  nlohmann::json to_json() const {
    nlohmann::json pairs = nlohmann::json::array();
    for (const auto& [h, t] : relation_pairs) pairs.push_back({h, t});
    return nlohmann::json{{"directions_obj", detail::matrix_to_json(directions_obj)},
                          {"directions_img", detail::matrix_to_json(directions_img)},
                          {"relation_pairs", pairs}};
  }

  static SyntheticMeta from_json(const nlohmann::json& j) {
    SyntheticMeta m;
    m.directions_obj = detail::json_to_matrix(j.at("directions_obj"));
    m.directions_img = detail::json_to_matrix(j.at("directions_img"));
    for (const auto& p : j.at("relation_pairs"))
      m.relation_pairs.emplace_back(p[0].get<int>(), p[1].get<int>());
    return m;
  }
};

namespace detail {

inline void validate_spec(const SyntheticSpec& spec) {
  MMRE_CHECK(spec.n_relations >= 2, "synthetic: need at least one non-None relation");
  MMRE_CHECK(spec.n_types >= 1, "synthetic: need at least one entity type");
  MMRE_CHECK(spec.relations_per_pair >= 1, "synthetic: relations_per_pair must be positive");
  const int pairs_needed =
      (spec.n_relations - 2) / spec.relations_per_pair + 1;
  MMRE_CHECK(pairs_needed <= spec.n_types * spec.n_types,
             "synthetic: not enough type pairs for the requested relation count");
  MMRE_CHECK(spec.objects_per_sample >= 1, "synthetic: need at least one object per sample");
  MMRE_CHECK(spec.m_blocks >= 1, "synthetic: need at least one image block");
  MMRE_CHECK(spec.raw_image_dim >= 8 && spec.raw_object_dim >= 8,
             "synthetic: feature dims below 8 make planted directions ambiguous");
  MMRE_CHECK(spec.text_len_min >= 4 && spec.text_len_max >= spec.text_len_min,
             "synthetic: text length range must allow two disjoint spans");
  MMRE_CHECK(spec.noise_std >= 0.0, "synthetic: noise_std must be non-negative");
  const int sub = (spec.vocab_size - 2) / (spec.n_types + 2);
  MMRE_CHECK(sub >= 1, "synthetic: vocab too small for per-type sub-vocabularies");
}

inline uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// Unit Gaussian direction; rejected until its dot with every earlier row is
// below 0.7 so the nearest-direction rule has a certain margin.
inline Mat separated_directions(int count, int dim, Rng& rng) {
  Mat dirs = Mat::Zero(count, dim);
  for (int r = 1; r < count; ++r) {
    for (int attempt = 0; attempt < 1000; ++attempt) {
      Eigen::VectorXd g(dim);
      for (int d = 0; d < dim; ++d) g(d) = rng.normal();
      const double n = g.norm();
      if (n < 1e-9) continue;
      g /= n;
      bool ok = true;
      for (int p = 1; p < r && ok; ++p)
        if (std::abs(g.dot(dirs.row(p).transpose())) > 0.7) ok = false;
      if (ok) {
        dirs.row(r) = g.transpose();
        break;
      }
      MMRE_CHECK(attempt < 999, "synthetic: could not separate planted directions");
    }
  }
  return dirs;
}

// Distractor row: random direction with norm in [0.3, 0.8], strictly below the
// unit norm of a planted row, so it can never win the nearest-direction rule.
inline Eigen::RowVectorXd distractor(int dim, Rng& rng) {
  Eigen::VectorXd g(dim);
  double n = 0.0;
  do {
    for (int d = 0; d < dim; ++d) g(d) = rng.normal();
    n = g.norm();
  } while (n < 1e-9);
  return (g * (rng.uniform(0.3, 0.8) / n)).transpose();
}

}  // namespace detail

// Entity-type names; the first four follow common person/org conventions.
inline std::vector<std::string> synthetic_type_names(int n_types) {
  static const char* kNamed[] = {"per", "org", "loc", "misc"};
  std::vector<std::string> names;
  for (int t = 0; t < n_types; ++t)
    names.push_back(t < 4 ? kNamed[t] : "t" + std::to_string(t));
  return names;
}

// Relation r (r >= 1) is assigned type pair (r-1) / relations_per_pair in
// row-major pair order, so consecutive relations share a pair and the type
// mask alone cannot identify the label.
inline std::vector<std::pair<int, int>> synthetic_relation_pairs(const SyntheticSpec& spec) {
  std::vector<std::pair<int, int>> pairs(static_cast<size_t>(spec.n_relations), {-1, -1});
  for (int r = 1; r < spec.n_relations; ++r) {
    const int p = (r - 1) / spec.relations_per_pair;
    pairs[static_cast<size_t>(r)] = {p / spec.n_types, p % spec.n_types};
  }
  return pairs;
}

inline RelationSchema synthetic_schema(const SyntheticSpec& spec) {
  detail::validate_spec(spec);
  const auto types = synthetic_type_names(spec.n_types);
  const auto pairs = synthetic_relation_pairs(spec);
  std::vector<std::string> relations{"None"};
  for (int r = 1; r < spec.n_relations; ++r)
    relations.push_back("/" + types[static_cast<size_t>(pairs[static_cast<size_t>(r)].first)] +
                        "/" + types[static_cast<size_t>(pairs[static_cast<size_t>(r)].second)] +
                        "/rel" + std::to_string(r));
  return RelationSchema(relations, types);
}

// Planted directions depend only on the seed, never on the split, so train,
// dev, and test share one ground-truth rule.
inline SyntheticMeta synthetic_meta(const SyntheticSpec& spec) {
  detail::validate_spec(spec);
  SyntheticMeta meta;
  Rng rng_obj(Rng::mix(spec.seed, 0xD1E0));
  Rng rng_img(Rng::mix(spec.seed, 0xD1E1));
  meta.directions_obj = detail::separated_directions(spec.n_relations, spec.raw_object_dim, rng_obj);
  meta.directions_img = detail::separated_directions(spec.n_relations, spec.raw_image_dim, rng_img);
  meta.relation_pairs = synthetic_relation_pairs(spec);
  return meta;
}

// Labels any sample from its object rows alone: pick the planted direction
// with the highest dot product over all rows. Exact at noise_std 0.
inline int nearest_direction_label(const Mat& object_features, const SyntheticMeta& meta) {
  int best = 1;
  double best_score = -1e300;
  for (Eigen::Index r = 1; r < meta.directions_obj.rows(); ++r) {
    const double score =
        (object_features * meta.directions_obj.row(r).transpose()).maxCoeff();
    if (score > best_score) {
      best_score = score;
      best = static_cast<int>(r);
    }
  }
  return best;
}

inline Dataset generate_synthetic(const SyntheticSpec& spec, const std::string& split) {
  detail::validate_spec(spec);
  const SyntheticMeta meta = synthetic_meta(spec);
  Dataset ds;
  ds.schema = synthetic_schema(spec);
  ds.split = split;
  ds.m_blocks = spec.m_blocks;
  ds.raw_image_dim = spec.raw_image_dim;
  ds.raw_object_dim = spec.raw_object_dim;

  int count = 0;
  if (split == "train") count = spec.n_train;
  else if (split == "dev") count = spec.n_dev;
  else if (split == "test") count = spec.n_test;
  else throw Error("synthetic: unknown split \"" + split + "\"");

  // Token id layout: 0 pad, 1 unk, one block per type, remainder general.
  const int sub = (spec.vocab_size - 2) / (spec.n_types + 2);
  const auto type_token = [&](int type, Rng& rng) {
    return rng.uniform_int(2 + type * sub, 2 + (type + 1) * sub - 1);
  };
  const int general_lo = 2 + spec.n_types * sub;
  const auto general_token = [&](Rng& rng) {
    return rng.uniform_int(general_lo, spec.vocab_size - 1);
  };

  Rng rng(Rng::mix(spec.seed, detail::fnv1a(split)));
  ds.samples.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    Sample s;
    s.id = split + "-" + std::to_string(i);
    const int r = rng.uniform_int(1, spec.n_relations - 1);
    s.relation = r;
    s.head_type = meta.relation_pairs[static_cast<size_t>(r)].first;
    s.tail_type = meta.relation_pairs[static_cast<size_t>(r)].second;

    const int len = rng.uniform_int(spec.text_len_min, spec.text_len_max);
    s.tokens.resize(static_cast<size_t>(len));
    for (int p = 0; p < len; ++p) s.tokens[static_cast<size_t>(p)] = general_token(rng);
    // Head span in the first half, tail span in the second: never overlapping.
    const int half = len / 2;
    const int hl = rng.uniform_int(1, std::min(2, half));
    const int tl = rng.uniform_int(1, std::min(2, len - half));
    s.head_span.begin = rng.uniform_int(0, half - hl);
    s.head_span.end = s.head_span.begin + hl;
    s.tail_span.begin = rng.uniform_int(half, len - tl);
    s.tail_span.end = s.tail_span.begin + tl;
    for (int p = s.head_span.begin; p < s.head_span.end; ++p)
      s.tokens[static_cast<size_t>(p)] = type_token(s.head_type, rng);
    for (int p = s.tail_span.begin; p < s.tail_span.end; ++p)
      s.tokens[static_cast<size_t>(p)] = type_token(s.tail_type, rng);

    const int K = spec.objects_per_sample;
    Mat objects(K, spec.raw_object_dim);
    const int planted_obj = rng.uniform_int(0, K - 1);
    for (int k = 0; k < K; ++k) {
      if (k == planted_obj) {
        objects.row(k) = meta.directions_obj.row(r);
        for (int d = 0; d < spec.raw_object_dim; ++d)
          objects(k, d) += spec.noise_std * rng.normal();
      } else {
        objects.row(k) = detail::distractor(spec.raw_object_dim, rng);
      }
    }
    std::vector<double> scores(static_cast<size_t>(K));
    for (auto& v : scores) v = rng.uniform(0.5, 1.0);
    std::vector<int> order(static_cast<size_t>(K));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)]; });
    s.object_features.resize(K, spec.raw_object_dim);
    s.roi_scores.resize(static_cast<size_t>(K));
    for (int k = 0; k < K; ++k) {
      s.object_features.row(k) = objects.row(order[static_cast<size_t>(k)]);
      s.roi_scores[static_cast<size_t>(k)] = scores[static_cast<size_t>(order[static_cast<size_t>(k)])];
    }

    s.image_feature.resize(spec.m_blocks, spec.raw_image_dim);
    const int planted_block = rng.uniform_int(0, spec.m_blocks - 1);
    for (int m = 0; m < spec.m_blocks; ++m) {
      if (m == planted_block) {
        s.image_feature.row(m) = meta.directions_img.row(r);
        for (int d = 0; d < spec.raw_image_dim; ++d)
          s.image_feature(m, d) += spec.noise_std * rng.normal();
      } else {
        s.image_feature.row(m) = detail::distractor(spec.raw_image_dim, rng);
      }
    }

    const auto violations = validate_sample(s, ds.schema);
    MMRE_CHECK(violations.empty(), "synthetic: generated invalid sample " + s.id);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace mmre
