#pragma once

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <string>

#include "mmre/dataset.hpp"
#include "mmre/synthetic.hpp"

// On-disk corpus layout shared by the CLI and the tests:
//   dir/schema.json   relation + entity-type inventory and compatibility map
//   dir/<split>.jsonl one sample per line (train / dev / test)
//   dir/meta.json     planted-rule directions, kept for oracle checks
//   dir/spec.json     echo of the generation spec
namespace mmre {

inline void write_corpus(const SyntheticSpec& spec, const std::filesystem::path& dir) {
  detail::validate_spec(spec);
  std::filesystem::create_directories(dir);
  const RelationSchema schema = synthetic_schema(spec);
  {
    std::ofstream out(dir / "schema.json");
    MMRE_CHECK(out.good(), "cannot write " + (dir / "schema.json").string());
    out << schema.to_json().dump(2) << "\n";
  }
  {
    std::ofstream out(dir / "meta.json");
    out << synthetic_meta(spec).to_json().dump() << "\n";
  }
  {
    std::ofstream out(dir / "spec.json");
    out << spec.to_json().dump(2) << "\n";
  }
  for (const std::string& split : {"train", "dev", "test"}) {
    save_dataset(generate_synthetic(spec, split), dir / (split + ".jsonl"));
  }
}

inline RelationSchema load_corpus_schema(const std::filesystem::path& dir) {
  std::ifstream in(dir / "schema.json");
  MMRE_CHECK(in.good(), "cannot open " + (dir / "schema.json").string());
  nlohmann::json j;
  in >> j;
  return RelationSchema::from_json(j);
}

inline Dataset load_split(const std::filesystem::path& dir, const RelationSchema& schema,
                          const std::string& split) {
  return load_dataset(dir / (split + ".jsonl"), schema, split);
}

}  // namespace mmre
