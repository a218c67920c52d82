#pragma once

#include <deque>
#include <map>
#include <string>
#include <vector>

#include "mmre/common.hpp"

namespace mmre {

struct Parameter {
  std::string name;   // unique, e.g. "backbone.layer0.attn.wq"
  std::string group;  // optimizer / grad-check grouping
  Mat value;
  Mat grad;  // same shape, zeroed between steps
  bool trainable = true;
};

// Owns every parameter of a model. Addresses are stable (deque), so modules
// keep Parameter& references and the optimizer walks the store.
class ParamStore {
 public:
  Parameter& add(const std::string& group, const std::string& name, Eigen::Index rows,
                 Eigen::Index cols, bool trainable) {
    params_.push_back(Parameter{name, group, Mat::Zero(rows, cols),
                                Mat::Zero(rows, cols), trainable});
    return params_.back();
  }

  std::vector<Parameter*> all() {
    std::vector<Parameter*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
  }

  std::vector<Parameter*> trainable() {
    std::vector<Parameter*> out;
    for (auto& p : params_) {
      if (p.trainable) out.push_back(&p);
    }
    return out;
  }

  // Group name -> members, in registration order.
  std::map<std::string, std::vector<Parameter*>> by_group() {
    std::map<std::string, std::vector<Parameter*>> out;
    for (auto& p : params_) out[p.group].push_back(&p);
    return out;
  }

  Parameter* find(const std::string& name) {
    for (auto& p : params_) {
      if (p.name == name) return &p;
    }
    return nullptr;
  }

  void zero_grads() {
    for (auto& p : params_) p.grad.setZero();
  }

  size_t scalar_count() const {
    size_t n = 0;
    for (const auto& p : params_) n += static_cast<size_t>(p.value.size());
    return n;
  }

 private:
  std::deque<Parameter> params_;
};

}  // namespace mmre
