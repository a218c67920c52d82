#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmre/common.hpp"
#include "mmre/sample.hpp"
#include "mmre/schema.hpp"

namespace mmre {

// String-token lookup. Index 0 is the pad token, index 1 the unknown token.
class Vocabulary {
 public:
  Vocabulary() { add("<pad>"); add("<unk>"); }

  explicit Vocabulary(const std::vector<std::string>& tokens) {
    for (const auto& t : tokens) add(t);
    MMRE_CHECK(size() >= 2 && tokens_[0] == "<pad>" && tokens_[1] == "<unk>",
               "vocabulary: first two entries must be <pad>, <unk>");
  }

  int add(const std::string& token) {
    auto it = index_.find(token);
    if (it != index_.end()) return it->second;
    const int id = static_cast<int>(tokens_.size());
    tokens_.push_back(token);
    index_[token] = id;
    return id;
  }

  int lookup(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? unk_id() : it->second;
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  static constexpr int pad_id() { return 0; }
  static constexpr int unk_id() { return 1; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  nlohmann::json to_json() const { return nlohmann::json{{"tokens", tokens_}}; }
  static Vocabulary from_json(const nlohmann::json& j) {
    return Vocabulary(j.at("tokens").get<std::vector<std::string>>());
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// A labeled split plus the schema it was validated against.
struct Dataset {
  RelationSchema schema;
  std::string split;
  std::vector<Sample> samples;
  int m_blocks = 0;
  int raw_image_dim = 0;
  int raw_object_dim = 0;

  int size() const { return static_cast<int>(samples.size()); }

  std::vector<int> relation_counts() const {
    std::vector<int> counts(static_cast<size_t>(schema.num_relations()), 0);
    for (const auto& s : samples)
      if (s.relation >= 0) ++counts[static_cast<size_t>(s.relation)];
    return counts;
  }
};

namespace detail {

inline Error line_error(const std::string& path, size_t line_no, const std::string& what) {
  return Error(path + ":" + std::to_string(line_no) + ": " + what);
}

inline Mat json_to_matrix(const nlohmann::json& j) {
  MMRE_CHECK(j.is_array() && !j.empty() && j[0].is_array(), "expected array of rows");
  const Eigen::Index rows = static_cast<Eigen::Index>(j.size());
  const Eigen::Index cols = static_cast<Eigen::Index>(j[0].size());
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    MMRE_CHECK(static_cast<Eigen::Index>(j[static_cast<size_t>(r)].size()) == cols,
               "ragged feature rows");
    for (Eigen::Index c = 0; c < cols; ++c)
      m(r, c) = j[static_cast<size_t>(r)][static_cast<size_t>(c)].get<double>();
  }
  return m;
}

inline nlohmann::json matrix_to_json(const Mat& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

// Sidecar container for large feature blocks: raw little-endian float32,
// row-major, plus a manifest mapping "<sample_id>/<field>" to byte offsets.
struct Sidecar {
  std::filesystem::path bin_path;
  nlohmann::json manifest;
  bool present = false;

  Mat read(const std::string& key) const {
    const auto& entry = manifest.at("entries").at(key);
    const uint64_t offset = entry.at("offset").get<uint64_t>();
    const auto shape = entry.at("shape").get<std::vector<Eigen::Index>>();
    MMRE_CHECK(shape.size() == 2, "sidecar entry " + key + ": shape must have 2 dims");
    std::ifstream in(bin_path, std::ios::binary);
    MMRE_CHECK(in.good(), "sidecar: cannot open " + bin_path.string());
    in.seekg(static_cast<std::streamoff>(offset));
    const size_t n = static_cast<size_t>(shape[0]) * static_cast<size_t>(shape[1]);
    std::vector<float> buf(n);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(float)));
    MMRE_CHECK(in.gcount() == static_cast<std::streamsize>(n * sizeof(float)),
               "sidecar: short read for " + key);
    Mat m(shape[0], shape[1]);
    for (Eigen::Index r = 0; r < shape[0]; ++r)
      for (Eigen::Index c = 0; c < shape[1]; ++c)
        m(r, c) = static_cast<double>(buf[static_cast<size_t>(r * shape[1] + c)]);
    return m;
  }
};

inline Sidecar open_sidecar(const std::filesystem::path& jsonl_path) {
  Sidecar sc;
  std::filesystem::path stem = jsonl_path;
  stem.replace_extension();
  sc.bin_path = stem.string() + ".features.bin";
  const std::filesystem::path manifest_path = stem.string() + ".features.json";
  if (std::filesystem::exists(sc.bin_path) && std::filesystem::exists(manifest_path)) {
    std::ifstream in(manifest_path);
    in >> sc.manifest;
    MMRE_CHECK(sc.manifest.at("dtype") == "float32" && sc.manifest.at("order") == "row-major",
               "sidecar manifest: expected float32 row-major");
    sc.present = true;
  }
  return sc;
}

}  // namespace detail

// Writes feature matrices to "<stem>.features.bin" / "<stem>.features.json"
// next to the given JSONL path. Keys are "<sample_id>/<field>".
inline void write_feature_sidecar(const std::filesystem::path& jsonl_path,
                                  const std::vector<std::pair<std::string, Mat>>& entries) {
  std::filesystem::path stem = jsonl_path;
  stem.replace_extension();
  std::ofstream bin(stem.string() + ".features.bin", std::ios::binary);
  MMRE_CHECK(bin.good(), "sidecar: cannot write " + stem.string() + ".features.bin");
  nlohmann::json manifest;
  manifest["dtype"] = "float32";
  manifest["order"] = "row-major";
  uint64_t offset = 0;
  for (const auto& [key, m] : entries) {
    std::vector<float> buf(static_cast<size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c)
        buf[static_cast<size_t>(r * m.cols() + c)] = static_cast<float>(m(r, c));
    bin.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
    manifest["entries"][key] = {{"offset", offset}, {"shape", {m.rows(), m.cols()}}};
    offset += buf.size() * sizeof(float);
  }
  std::ofstream mf(stem.string() + ".features.json");
  mf << manifest.dump(2) << "\n";
}

// One sample per line. Tokens may be ints (used directly) or strings (mapped
// through the vocabulary); types and relations may be ids or schema names.
// "@sidecar" in a feature field defers to the binary sidecar next to the file.
inline Dataset load_dataset(const std::filesystem::path& path, const RelationSchema& schema,
                            const std::string& split, const Vocabulary* vocab = nullptr) {
  std::ifstream in(path);
  MMRE_CHECK(in.good(), "cannot open dataset file: " + path.string());
  const detail::Sidecar sidecar = detail::open_sidecar(path);

  Dataset ds;
  ds.schema = schema;
  ds.split = split;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw detail::line_error(path.string(), line_no, std::string("bad JSON: ") + e.what());
    }
    try {
      Sample s;
      s.id = j.at("id").get<std::string>();
      for (const auto& t : j.at("tokens")) {
        if (t.is_string()) {
          MMRE_CHECK(vocab != nullptr, "string tokens require a vocabulary");
          s.tokens.push_back(vocab->lookup(t.get<std::string>()));
        } else {
          s.tokens.push_back(t.get<int>());
        }
      }
      auto read_span = [&](const char* key) {
        const auto& a = j.at(key);
        MMRE_CHECK(a.is_array() && a.size() == 2, std::string(key) + ": expected [begin, end)");
        return Span{a[0].get<int>(), a[1].get<int>()};
      };
      s.head_span = read_span("head_span");
      s.tail_span = read_span("tail_span");
      auto read_type = [&](const char* key) {
        const auto& t = j.at(key);
        return t.is_string() ? schema.type_id(t.get<std::string>()) : t.get<int>();
      };
      s.head_type = read_type("head_type");
      s.tail_type = read_type("tail_type");
      if (j.contains("relation") && !j.at("relation").is_null()) {
        const auto& r = j.at("relation");
        s.relation = r.is_string() ? schema.relation_id(r.get<std::string>()) : r.get<int>();
      }
      auto read_matrix = [&](const char* key) {
        const auto& f = j.at(key);
        if (f.is_string()) {
          MMRE_CHECK(f.get<std::string>() == "@sidecar", std::string(key) + ": unknown reference");
          MMRE_CHECK(sidecar.present, std::string(key) + ": no sidecar next to dataset file");
          return sidecar.read(s.id + "/" + key);
        }
        return detail::json_to_matrix(f);
      };
      s.image_feature = read_matrix("image_feature");
      s.object_features = read_matrix("object_features");
      s.roi_scores = j.at("roi_scores").get<std::vector<double>>();

      const auto violations = validate_sample(s, schema);
      if (!violations.empty()) {
        std::string msg = "invalid sample \"" + s.id + "\":";
        for (const auto& v : violations) msg += " " + v + ";";
        throw Error(msg);
      }
      if (ds.samples.empty()) {
        ds.m_blocks = static_cast<int>(s.image_feature.rows());
        ds.raw_image_dim = static_cast<int>(s.image_feature.cols());
        ds.raw_object_dim = static_cast<int>(s.object_features.cols());
      } else {
        MMRE_CHECK(s.image_feature.rows() == ds.m_blocks &&
                       s.image_feature.cols() == ds.raw_image_dim,
                   "image feature shape differs from first sample");
        MMRE_CHECK(s.object_features.cols() == ds.raw_object_dim,
                   "object feature dim differs from first sample");
      }
      ds.samples.push_back(std::move(s));
    } catch (const Error& e) {
      throw detail::line_error(path.string(), line_no, e.what());
    } catch (const nlohmann::json::exception& e) {
      throw detail::line_error(path.string(), line_no, std::string("bad record: ") + e.what());
    }
  }
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  MMRE_CHECK(out.good(), "cannot write dataset file: " + path.string());
  for (const auto& s : ds.samples) {
    nlohmann::json j;
    j["id"] = s.id;
    j["tokens"] = s.tokens;
    j["head_span"] = {s.head_span.begin, s.head_span.end};
    j["tail_span"] = {s.tail_span.begin, s.tail_span.end};
    j["head_type"] = ds.schema.entity_types()[static_cast<size_t>(s.head_type)];
    j["tail_type"] = ds.schema.entity_types()[static_cast<size_t>(s.tail_type)];
    if (s.relation >= 0) j["relation"] = ds.schema.relations()[static_cast<size_t>(s.relation)];
    j["image_feature"] = detail::matrix_to_json(s.image_feature);
    j["object_features"] = detail::matrix_to_json(s.object_features);
    j["roi_scores"] = s.roi_scores;
    out << j.dump() << "\n";
  }
}

}  // namespace mmre
