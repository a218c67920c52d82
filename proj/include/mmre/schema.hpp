#pragma once

#include <json.hpp>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmre/common.hpp"

namespace mmre {

// Explicit (head_type, tail_type, relation) compatibility entry, used when
// relation names do not carry type prefixes.
struct CompatEntry {
  std::string relation;
  std::string head_type;
  std::string tail_type;
};

// Relation vocabulary, entity-type vocabulary, and the type-pair -> relation
// compatibility mask. "None" is always present and compatible with every pair.
class RelationSchema {
 public:
  RelationSchema() = default;

  RelationSchema(std::vector<std::string> relations, std::vector<std::string> entity_types,
                 const std::vector<CompatEntry>& explicit_compat = {})
      : relations_(std::move(relations)), entity_types_(std::move(entity_types)) {
    for (size_t i = 0; i < relations_.size(); ++i) relation_index_[relations_[i]] = static_cast<int>(i);
    for (size_t i = 0; i < entity_types_.size(); ++i) type_index_[entity_types_[i]] = static_cast<int>(i);
    MMRE_CHECK(relation_index_.count("None") == 1, "schema: relation set must include \"None\"");
    MMRE_CHECK(relation_index_.size() == relations_.size(), "schema: duplicate relation name");
    MMRE_CHECK(type_index_.size() == entity_types_.size(), "schema: duplicate entity type");
    MMRE_CHECK(!entity_types_.empty(), "schema: empty entity type list");
    build_mask(explicit_compat);
  }

  int num_relations() const { return static_cast<int>(relations_.size()); }
  int num_types() const { return static_cast<int>(entity_types_.size()); }
  int none_id() const { return relation_index_.at("None"); }

  const std::vector<std::string>& relations() const { return relations_; }
  const std::vector<std::string>& entity_types() const { return entity_types_; }

  int relation_id(const std::string& name) const {
    auto it = relation_index_.find(name);
    MMRE_CHECK(it != relation_index_.end(), "schema: unknown relation name: " + name);
    return it->second;
  }

  int type_id(const std::string& name) const {
    auto it = type_index_.find(name);
    MMRE_CHECK(it != type_index_.end(), "schema: unknown entity type: " + name);
    return it->second;
  }

  bool compatible(int head_type, int tail_type, int relation) const {
    return compat_[index(head_type, tail_type, relation)];
  }

  // Relations allowed for a type pair, as a (C+1)-vector of 0/1.
  std::vector<char> compat_row(int head_type, int tail_type) const {
    std::vector<char> row(static_cast<size_t>(num_relations()));
    for (int r = 0; r < num_relations(); ++r)
      row[static_cast<size_t>(r)] = compatible(head_type, tail_type, r) ? 1 : 0;
    return row;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["relations"] = relations_;
    j["entity_types"] = entity_types_;
    nlohmann::json compat = nlohmann::json::array();
    for (int th = 0; th < num_types(); ++th)
      for (int tt = 0; tt < num_types(); ++tt)
        for (int r = 0; r < num_relations(); ++r)
          if (r != none_id() && compatible(th, tt, r))
            compat.push_back({{"relation", relations_[static_cast<size_t>(r)]},
                              {"head_type", entity_types_[static_cast<size_t>(th)]},
                              {"tail_type", entity_types_[static_cast<size_t>(tt)]}});
    j["compat"] = compat;
    return j;
  }

  static RelationSchema from_json(const nlohmann::json& j) {
    std::vector<CompatEntry> entries;
    if (j.contains("compat")) {
      for (const auto& e : j.at("compat"))
        entries.push_back({e.at("relation").get<std::string>(),
                           e.at("head_type").get<std::string>(),
                           e.at("tail_type").get<std::string>()});
    }
    return RelationSchema(j.at("relations").get<std::vector<std::string>>(),
                          j.at("entity_types").get<std::vector<std::string>>(), entries);
  }

  // Path-style names carry their type pair as a prefix: "/per/org/member_of".
  // Returns false if the name does not have that shape or uses unknown types.
  static bool parse_typed_name(const std::string& name, std::string* head, std::string* tail) {
    if (name.empty() || name[0] != '/') return false;
    const size_t a = name.find('/', 1);
    if (a == std::string::npos) return false;
    const size_t b = name.find('/', a + 1);
    if (b == std::string::npos) return false;
    *head = name.substr(1, a - 1);
    *tail = name.substr(a + 1, b - a - 1);
    return !head->empty() && !tail->empty() && b + 1 < name.size();
  }

 private:
  size_t index(int th, int tt, int r) const {
    return (static_cast<size_t>(th) * static_cast<size_t>(num_types()) + static_cast<size_t>(tt)) *
               static_cast<size_t>(num_relations()) +
           static_cast<size_t>(r);
  }

  void build_mask(const std::vector<CompatEntry>& explicit_compat) {
    const size_t total = static_cast<size_t>(num_types()) * static_cast<size_t>(num_types()) *
                         static_cast<size_t>(num_relations());
    compat_.assign(total, 0);
    const int none = none_id();
    for (int th = 0; th < num_types(); ++th)
      for (int tt = 0; tt < num_types(); ++tt) compat_[index(th, tt, none)] = 1;

    std::vector<char> covered(relations_.size(), 0);
    covered[static_cast<size_t>(none)] = 1;
    for (const auto& e : explicit_compat) {
      const int r = relation_id(e.relation);
      compat_[index(type_id(e.head_type), type_id(e.tail_type), r)] = 1;
      covered[static_cast<size_t>(r)] = 1;
    }
    for (int r = 0; r < num_relations(); ++r) {
      if (covered[static_cast<size_t>(r)]) continue;
      std::string head, tail;
      MMRE_CHECK(parse_typed_name(relations_[static_cast<size_t>(r)], &head, &tail),
                 "schema: relation \"" + relations_[static_cast<size_t>(r)] +
                     "\" has no type prefix and no explicit compat entry");
      compat_[index(type_id(head), type_id(tail), r)] = 1;
    }
  }

  std::vector<std::string> relations_;
  std::vector<std::string> entity_types_;
  std::unordered_map<std::string, int> relation_index_;
  std::unordered_map<std::string, int> type_index_;
  std::vector<char> compat_;  // [type x type x relation]
};

}  // namespace mmre
