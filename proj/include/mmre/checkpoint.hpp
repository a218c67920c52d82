#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <memory>
#include <string>

#include "mmre/model.hpp"

namespace mmre {

// Single-file container: magic, format version, a JSON header carrying the
// config, schema, and tensor directory, then raw little-endian float64 data.
// Frozen backbone weights are stored too, so a checkpoint restores the exact
// model without replaying initialization.
namespace checkpoint {

constexpr char kMagic[4] = {'M', 'M', 'R', 'E'};
constexpr uint32_t kVersion = 1;

inline void save(Model& model, const std::filesystem::path& path) {
  nlohmann::json header;
  header["config"] = model.cfg.to_json();
  header["schema"] = model.schema.to_json();
  nlohmann::json tensors = nlohmann::json::array();
  uint64_t offset = 0;
  const auto params = model.store.all();
  for (const Parameter* p : params) {
    tensors.push_back({{"name", p->name},
                       {"rows", p->value.rows()},
                       {"cols", p->value.cols()},
                       {"offset", offset}});
    offset += static_cast<uint64_t>(p->value.size()) * sizeof(double);
  }
  header["tensors"] = tensors;
  const std::string header_str = header.dump();

  std::ofstream out(path, std::ios::binary);
  MMRE_CHECK(out.good(), "checkpoint: cannot write " + path.string());
  out.write(kMagic, 4);
  const uint32_t version = kVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const uint64_t header_len = header_str.size();
  out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (const Parameter* p : params) {
    // Row-major serialization keeps the layout independent of Eigen defaults.
    for (Eigen::Index r = 0; r < p->value.rows(); ++r)
      for (Eigen::Index c = 0; c < p->value.cols(); ++c) {
        const double v = p->value(r, c);
        out.write(reinterpret_cast<const char*>(&v), sizeof(v));
      }
  }
  MMRE_CHECK(out.good(), "checkpoint: write failed for " + path.string());
}

inline std::unique_ptr<Model> load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  MMRE_CHECK(in.good(), "checkpoint: cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  MMRE_CHECK(in.gcount() == 4 && std::equal(magic, magic + 4, kMagic),
             "checkpoint: bad magic in " + path.string());
  uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  MMRE_CHECK(version == kVersion,
             "checkpoint: unsupported version " + std::to_string(version));
  uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  std::string header_str(header_len, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(header_len));
  MMRE_CHECK(in.good(), "checkpoint: truncated header in " + path.string());
  const nlohmann::json header = nlohmann::json::parse(header_str);

  auto model = std::make_unique<Model>(Config::from_json(header.at("config")),
                                       RelationSchema::from_json(header.at("schema")));
  size_t restored = 0;
  for (const auto& t : header.at("tensors")) {
    const std::string name = t.at("name").get<std::string>();
    Parameter* p = model->store.find(name);
    MMRE_CHECK(p != nullptr, "checkpoint: unknown tensor " + name);
    MMRE_CHECK(p->value.rows() == t.at("rows").get<Eigen::Index>() &&
                   p->value.cols() == t.at("cols").get<Eigen::Index>(),
               "checkpoint: shape mismatch for " + name);
    for (Eigen::Index r = 0; r < p->value.rows(); ++r)
      for (Eigen::Index c = 0; c < p->value.cols(); ++c) {
        double v = 0;
        in.read(reinterpret_cast<char*>(&v), sizeof(v));
        p->value(r, c) = v;
      }
    ++restored;
  }
  MMRE_CHECK(in.good(), "checkpoint: truncated tensor data in " + path.string());
  MMRE_CHECK(restored == model->store.all().size(),
             "checkpoint: tensor directory does not cover the model");
  return model;
}

}  // namespace checkpoint
}  // namespace mmre
