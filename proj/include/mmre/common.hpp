#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace mmre {

using Mat = Eigen::MatrixXd;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// User-facing precondition. Internal shape bugs use std::logic_error instead.
#define MMRE_CHECK(cond, msg)            \
  do {                                   \
    if (!(cond)) throw ::mmre::Error(msg); \
  } while (0)

inline bool all_finite(const Mat& m) { return m.allFinite(); }

}  // namespace mmre
