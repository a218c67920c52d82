#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mmre/common.hpp"
#include "mmre/params.hpp"
#include "mmre/rng.hpp"

// Reverse-mode autodiff over dense double matrices. A Tape owns the nodes of
// one computation graph in creation order, which is already a topological
// order, so backward() is a single reverse sweep. Row convention: sequences
// are S x N matrices (one position per row), vectors are 1 x N, scalars 1 x 1.

namespace mmre::ad {

using mmre::Mat;

struct Node {
  Mat value;
  Mat grad;  // empty until first accumulation
  bool requires_grad = false;
  std::function<void(const Node&)> backward;
};

using NodeRef = Node*;

inline void shape_check(bool ok, const char* op) {
  if (!ok) throw std::logic_error(std::string("ad: shape mismatch in ") + op);
}

inline void accum(NodeRef n, const Mat& g) {
  if (!n->requires_grad) return;
  if (n->grad.size() == 0) n->grad = Mat::Zero(n->value.rows(), n->value.cols());
  n->grad += g;
}

inline void accum_block(NodeRef n, Eigen::Index r0, Eigen::Index c0, const Mat& g) {
  if (!n->requires_grad) return;
  if (n->grad.size() == 0) n->grad = Mat::Zero(n->value.rows(), n->value.cols());
  n->grad.block(r0, c0, g.rows(), g.cols()) += g;
}

class Tape {
 public:
  NodeRef make(Mat v, bool requires_grad = false) {
    nodes_.push_back(std::make_unique<Node>());
    NodeRef n = nodes_.back().get();
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    return n;
  }

  NodeRef constant(Mat v) { return make(std::move(v), false); }

  // One leaf per Parameter per tape; value is copied so the graph is
  // self-contained. Frozen parameters yield requires_grad=false leaves:
  // gradients still flow through them to other inputs, just not into them.
  NodeRef leaf(Parameter& p) {
    auto it = leaf_cache_.find(&p);
    if (it != leaf_cache_.end()) return it->second;
    NodeRef n = make(p.value, p.trainable);
    leaf_cache_.emplace(&p, n);
    leaves_.emplace_back(&p, n);
    return n;
  }

  void backward(NodeRef root) {
    shape_check(root->value.rows() == 1 && root->value.cols() == 1, "backward root");
    MMRE_CHECK(std::isfinite(root->value(0, 0)), "backward: non-finite loss");
    root->grad = Mat::Ones(1, 1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node& n = **it;
      if (n.backward && n.requires_grad && n.grad.size() != 0) n.backward(n);
    }
  }

  // Add accumulated leaf gradients into their Parameters.
  void apply_param_grads() {
    for (auto& [p, n] : leaves_) {
      if (p->trainable && n->grad.size() != 0) p->grad += n->grad;
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  std::deque<std::unique_ptr<Node>> nodes_;
  std::vector<std::pair<Parameter*, NodeRef>> leaves_;
  std::unordered_map<const Parameter*, NodeRef> leaf_cache_;
};

// ---------------------------------------------------------------------------
// elementwise and arithmetic ops

inline NodeRef add(Tape& t, NodeRef a, NodeRef b) {
  shape_check(a->value.rows() == b->value.rows() && a->value.cols() == b->value.cols(), "add");
  NodeRef y = t.make(a->value + b->value, a->requires_grad || b->requires_grad);
  y->backward = [a, b](const Node& self) {
    if (a->requires_grad) accum(a, self.grad);
    if (b->requires_grad) accum(b, self.grad);
  };
  return y;
}

inline NodeRef sub(Tape& t, NodeRef a, NodeRef b) {
  shape_check(a->value.rows() == b->value.rows() && a->value.cols() == b->value.cols(), "sub");
  NodeRef y = t.make(a->value - b->value, a->requires_grad || b->requires_grad);
  y->backward = [a, b](const Node& self) {
    if (a->requires_grad) accum(a, self.grad);
    if (b->requires_grad) accum(b, -self.grad);
  };
  return y;
}

// Broadcast-add a 1 x N row to every row of a.
inline NodeRef add_row(Tape& t, NodeRef a, NodeRef row) {
  shape_check(row->value.rows() == 1 && row->value.cols() == a->value.cols(), "add_row");
  Mat v = a->value;
  v.rowwise() += row->value.row(0);
  NodeRef y = t.make(std::move(v), a->requires_grad || row->requires_grad);
  y->backward = [a, row](const Node& self) {
    if (a->requires_grad) accum(a, self.grad);
    if (row->requires_grad) accum(row, self.grad.colwise().sum());
  };
  return y;
}

inline NodeRef hadamard(Tape& t, NodeRef a, NodeRef b) {
  shape_check(a->value.rows() == b->value.rows() && a->value.cols() == b->value.cols(), "hadamard");
  NodeRef y = t.make(a->value.cwiseProduct(b->value), a->requires_grad || b->requires_grad);
  y->backward = [a, b](const Node& self) {
    if (a->requires_grad) accum(a, self.grad.cwiseProduct(b->value));
    if (b->requires_grad) accum(b, self.grad.cwiseProduct(a->value));
  };
  return y;
}

inline NodeRef scale(Tape& t, NodeRef a, double s) {
  NodeRef y = t.make(a->value * s, a->requires_grad);
  y->backward = [a, s](const Node& self) {
    if (a->requires_grad) accum(a, self.grad * s);
  };
  return y;
}

// Multiply by a 1 x 1 node, broadcast over all entries.
inline NodeRef scale_by(Tape& t, NodeRef a, NodeRef s) {
  shape_check(s->value.rows() == 1 && s->value.cols() == 1, "scale_by");
  NodeRef y = t.make(a->value * s->value(0, 0), a->requires_grad || s->requires_grad);
  y->backward = [a, s](const Node& self) {
    if (a->requires_grad) accum(a, self.grad * s->value(0, 0));
    if (s->requires_grad) {
      Mat g(1, 1);
      g(0, 0) = self.grad.cwiseProduct(a->value).sum();
      accum(s, g);
    }
  };
  return y;
}

// y = a / s with s a 1x1 node.
inline NodeRef div_by(Tape& t, NodeRef a, NodeRef s) {
  shape_check(s->value.rows() == 1 && s->value.cols() == 1, "div_by");
  const double d = s->value(0, 0);
  NodeRef y = t.make(a->value / d, a->requires_grad || s->requires_grad);
  y->backward = [a, s, d](const Node& self) {
    if (a->requires_grad) accum(a, self.grad / d);
    if (s->requires_grad) {
      Mat g(1, 1);
      g(0, 0) = -self.grad.cwiseProduct(a->value).sum() / (d * d);
      accum(s, g);
    }
  };
  return y;
}

inline NodeRef matmul(Tape& t, NodeRef a, NodeRef b) {
  shape_check(a->value.cols() == b->value.rows(), "matmul");
  NodeRef y = t.make(a->value * b->value, a->requires_grad || b->requires_grad);
  y->backward = [a, b](const Node& self) {
    if (a->requires_grad) accum(a, self.grad * b->value.transpose());
    if (b->requires_grad) accum(b, a->value.transpose() * self.grad);
  };
  return y;
}

// y = a * b^T
inline NodeRef matmul_nt(Tape& t, NodeRef a, NodeRef b) {
  shape_check(a->value.cols() == b->value.cols(), "matmul_nt");
  NodeRef y = t.make(a->value * b->value.transpose(), a->requires_grad || b->requires_grad);
  y->backward = [a, b](const Node& self) {
    if (a->requires_grad) accum(a, self.grad * b->value);
    if (b->requires_grad) accum(b, self.grad.transpose() * a->value);
  };
  return y;
}

// y = x * W^T + b with W: out x in, b: 1 x out.
inline NodeRef linear(Tape& t, NodeRef x, NodeRef w, NodeRef b) {
  shape_check(x->value.cols() == w->value.cols(), "linear");
  shape_check(b->value.rows() == 1 && b->value.cols() == w->value.rows(), "linear bias");
  Mat v = x->value * w->value.transpose();
  v.rowwise() += b->value.row(0);
  NodeRef y = t.make(std::move(v), x->requires_grad || w->requires_grad || b->requires_grad);
  y->backward = [x, w, b](const Node& self) {
    if (x->requires_grad) accum(x, self.grad * w->value);
    if (w->requires_grad) accum(w, self.grad.transpose() * x->value);
    if (b->requires_grad) accum(b, self.grad.colwise().sum());
  };
  return y;
}

// ---------------------------------------------------------------------------
// structural ops

inline NodeRef slice_rows(Tape& t, NodeRef a, Eigen::Index r0, Eigen::Index n) {
  shape_check(r0 >= 0 && r0 + n <= a->value.rows(), "slice_rows");
  NodeRef y = t.make(a->value.middleRows(r0, n), a->requires_grad);
  y->backward = [a, r0](const Node& self) {
    if (a->requires_grad) accum_block(a, r0, 0, self.grad);
  };
  return y;
}

inline NodeRef slice_cols(Tape& t, NodeRef a, Eigen::Index c0, Eigen::Index n) {
  shape_check(c0 >= 0 && c0 + n <= a->value.cols(), "slice_cols");
  NodeRef y = t.make(a->value.middleCols(c0, n), a->requires_grad);
  y->backward = [a, c0](const Node& self) {
    if (a->requires_grad) accum_block(a, 0, c0, self.grad);
  };
  return y;
}

inline NodeRef concat_rows(Tape& t, const std::vector<NodeRef>& parts) {
  shape_check(!parts.empty(), "concat_rows");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts[0]->value.cols();
  bool rg = false;
  for (NodeRef p : parts) {
    shape_check(p->value.cols() == cols, "concat_rows");
    rows += p->value.rows();
    rg = rg || p->requires_grad;
  }
  Mat v(rows, cols);
  Eigen::Index r = 0;
  for (NodeRef p : parts) {
    v.middleRows(r, p->value.rows()) = p->value;
    r += p->value.rows();
  }
  NodeRef y = t.make(std::move(v), rg);
  y->backward = [parts](const Node& self) {
    Eigen::Index r = 0;
    for (NodeRef p : parts) {
      if (p->requires_grad) accum(p, self.grad.middleRows(r, p->value.rows()));
      r += p->value.rows();
    }
  };
  return y;
}

inline NodeRef concat_cols(Tape& t, const std::vector<NodeRef>& parts) {
  shape_check(!parts.empty(), "concat_cols");
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts[0]->value.rows();
  bool rg = false;
  for (NodeRef p : parts) {
    shape_check(p->value.rows() == rows, "concat_cols");
    cols += p->value.cols();
    rg = rg || p->requires_grad;
  }
  Mat v(rows, cols);
  Eigen::Index c = 0;
  for (NodeRef p : parts) {
    v.middleCols(c, p->value.cols()) = p->value;
    c += p->value.cols();
  }
  NodeRef y = t.make(std::move(v), rg);
  y->backward = [parts](const Node& self) {
    Eigen::Index c = 0;
    for (NodeRef p : parts) {
      if (p->requires_grad) accum(p, self.grad.middleCols(c, p->value.cols()));
      c += p->value.cols();
    }
  };
  return y;
}

inline NodeRef gather_rows(Tape& t, NodeRef table, std::vector<int> ids) {
  Mat v(static_cast<Eigen::Index>(ids.size()), table->value.cols());
  for (size_t i = 0; i < ids.size(); ++i) {
    shape_check(ids[i] >= 0 && ids[i] < table->value.rows(), "gather_rows");
    v.row(static_cast<Eigen::Index>(i)) = table->value.row(ids[i]);
  }
  NodeRef y = t.make(std::move(v), table->requires_grad);
  y->backward = [table, ids = std::move(ids)](const Node& self) {
    if (!table->requires_grad) return;
    if (table->grad.size() == 0)
      table->grad = Mat::Zero(table->value.rows(), table->value.cols());
    for (size_t i = 0; i < ids.size(); ++i)
      table->grad.row(ids[i]) += self.grad.row(static_cast<Eigen::Index>(i));
  };
  return y;
}

// Add b into rows [r0, r0+b.rows()) of a.
inline NodeRef add_rows_at(Tape& t, NodeRef a, NodeRef b, Eigen::Index r0) {
  shape_check(b->value.cols() == a->value.cols() && r0 >= 0 &&
                  r0 + b->value.rows() <= a->value.rows(),
              "add_rows_at");
  Mat v = a->value;
  v.middleRows(r0, b->value.rows()) += b->value;
  NodeRef y = t.make(std::move(v), a->requires_grad || b->requires_grad);
  y->backward = [a, b, r0](const Node& self) {
    if (a->requires_grad) accum(a, self.grad);
    if (b->requires_grad) accum(b, self.grad.middleRows(r0, b->value.rows()));
  };
  return y;
}

inline NodeRef mean_rows(Tape& t, NodeRef a) {
  const double inv = 1.0 / static_cast<double>(a->value.rows());
  NodeRef y = t.make(a->value.colwise().sum() * inv, a->requires_grad);
  y->backward = [a, inv](const Node& self) {
    if (a->requires_grad) accum(a, (self.grad * inv).replicate(a->value.rows(), 1));
  };
  return y;
}

inline NodeRef sum_all(Tape& t, NodeRef a) {
  Mat v(1, 1);
  v(0, 0) = a->value.sum();
  NodeRef y = t.make(std::move(v), a->requires_grad);
  y->backward = [a](const Node& self) {
    if (a->requires_grad)
      accum(a, Mat::Constant(a->value.rows(), a->value.cols(), self.grad(0, 0)));
  };
  return y;
}

inline NodeRef mean_all(Tape& t, NodeRef a) {
  return scale(t, sum_all(t, a), 1.0 / static_cast<double>(a->value.size()));
}

inline NodeRef pick(Tape& t, NodeRef a, Eigen::Index r, Eigen::Index c) {
  shape_check(r >= 0 && r < a->value.rows() && c >= 0 && c < a->value.cols(), "pick");
  Mat v(1, 1);
  v(0, 0) = a->value(r, c);
  NodeRef y = t.make(std::move(v), a->requires_grad);
  y->backward = [a, r, c](const Node& self) {
    if (!a->requires_grad) return;
    if (a->grad.size() == 0) a->grad = Mat::Zero(a->value.rows(), a->value.cols());
    a->grad(r, c) += self.grad(0, 0);
  };
  return y;
}

// ---------------------------------------------------------------------------
// nonlinearities

inline NodeRef tanh(Tape& t, NodeRef a) {
  NodeRef y = t.make(a->value.array().tanh().matrix(), a->requires_grad);
  y->backward = [a](const Node& self) {
    if (a->requires_grad)
      accum(a, self.grad.cwiseProduct(
                   (1.0 - self.value.array().square()).matrix()));
  };
  return y;
}

inline NodeRef relu(Tape& t, NodeRef a) {
  NodeRef y = t.make(a->value.cwiseMax(0.0), a->requires_grad);
  y->backward = [a](const Node& self) {
    if (a->requires_grad)
      accum(a, self.grad.cwiseProduct(
                   (a->value.array() > 0.0).cast<double>().matrix()));
  };
  return y;
}

// Exact GELU: x * Phi(x).
inline NodeRef gelu(Tape& t, NodeRef a) {
  auto phi_cdf = [](double x) { return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)); };
  NodeRef y = t.make(
      a->value.unaryExpr([&](double x) { return x * phi_cdf(x); }), a->requires_grad);
  y->backward = [a, phi_cdf](const Node& self) {
    if (!a->requires_grad) return;
    static const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * M_PI);
    Mat d = a->value.unaryExpr([&](double x) {
      return phi_cdf(x) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
    });
    accum(a, self.grad.cwiseProduct(d));
  };
  return y;
}

// log(a + eps) elementwise; eps guards zero probabilities.
inline NodeRef log_guard(Tape& t, NodeRef a, double eps) {
  NodeRef y = t.make((a->value.array() + eps).log().matrix(), a->requires_grad);
  y->backward = [a, eps](const Node& self) {
    if (a->requires_grad)
      accum(a, (self.grad.array() / (a->value.array() + eps)).matrix());
  };
  return y;
}

// Row-wise softmax of (a + add_mask); mask entries are 0 or a large negative
// constant. Masked entries underflow to exactly 0 in the output.
inline NodeRef softmax_rows(Tape& t, NodeRef a, const Mat& add_mask) {
  shape_check(add_mask.size() == 0 || (add_mask.rows() == a->value.rows() &&
                                       add_mask.cols() == a->value.cols()),
              "softmax_rows");
  Mat z = add_mask.size() == 0 ? a->value : Mat(a->value + add_mask);
  Mat p(z.rows(), z.cols());
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const double m = z.row(r).maxCoeff();
    p.row(r) = (z.row(r).array() - m).exp();
    p.row(r) /= p.row(r).sum();
  }
  NodeRef y = t.make(std::move(p), a->requires_grad);
  y->backward = [a](const Node& self) {
    if (!a->requires_grad) return;
    Mat g(self.value.rows(), self.value.cols());
    for (Eigen::Index r = 0; r < self.value.rows(); ++r) {
      const double dot = self.grad.row(r).dot(self.value.row(r));
      g.row(r) = self.value.row(r).cwiseProduct(
          (self.grad.row(r).array() - dot).matrix());
    }
    accum(a, g);
  };
  return y;
}

inline NodeRef softmax_rows(Tape& t, NodeRef a) { return softmax_rows(t, a, Mat()); }

// Per-row layer normalization with gain g and bias b (both 1 x N).
inline NodeRef layer_norm(Tape& t, NodeRef x, NodeRef g, NodeRef b, double eps = 1e-5) {
  const Eigen::Index n = x->value.cols();
  shape_check(g->value.rows() == 1 && g->value.cols() == n, "layer_norm gain");
  shape_check(b->value.rows() == 1 && b->value.cols() == n, "layer_norm bias");
  Mat xhat(x->value.rows(), n);
  std::vector<double> inv_std(static_cast<size_t>(x->value.rows()));
  for (Eigen::Index r = 0; r < x->value.rows(); ++r) {
    const double mu = x->value.row(r).mean();
    Eigen::RowVectorXd d = x->value.row(r).array() - mu;
    const double var = d.squaredNorm() / static_cast<double>(n);
    const double s = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(r)] = s;
    xhat.row(r) = d * s;
  }
  Mat v = xhat.cwiseProduct(g->value.replicate(x->value.rows(), 1));
  v.rowwise() += b->value.row(0);
  NodeRef y = t.make(std::move(v), x->requires_grad || g->requires_grad || b->requires_grad);
  y->backward = [x, g, b, xhat = std::move(xhat), inv_std = std::move(inv_std), n](const Node& self) {
    if (g->requires_grad) accum(g, self.grad.cwiseProduct(xhat).colwise().sum());
    if (b->requires_grad) accum(b, self.grad.colwise().sum());
    if (!x->requires_grad) return;
    Mat gx(x->value.rows(), n);
    const double invn = 1.0 / static_cast<double>(n);
    for (Eigen::Index r = 0; r < x->value.rows(); ++r) {
      Eigen::RowVectorXd dxhat = self.grad.row(r).cwiseProduct(g->value.row(0));
      const double s = inv_std[static_cast<size_t>(r)];
      const double m1 = dxhat.sum() * invn;
      const double m2 = dxhat.dot(xhat.row(r)) * invn;
      gx.row(r) = s * (dxhat.array() - m1 - xhat.row(r).array() * m2);
    }
    accum(x, gx);
  };
  return y;
}

// Inverted dropout; identity when rate == 0.
inline NodeRef dropout(Tape& t, NodeRef a, double rate, Rng& rng) {
  if (rate <= 0.0) return a;
  shape_check(rate < 1.0, "dropout rate");
  Mat mask(a->value.rows(), a->value.cols());
  const double keep = 1.0 - rate;
  for (Eigen::Index i = 0; i < mask.rows(); ++i)
    for (Eigen::Index j = 0; j < mask.cols(); ++j)
      mask(i, j) = rng.uniform() < keep ? 1.0 / keep : 0.0;
  NodeRef y = t.make(a->value.cwiseProduct(mask), a->requires_grad);
  y->backward = [a, mask = std::move(mask)](const Node& self) {
    if (a->requires_grad) accum(a, self.grad.cwiseProduct(mask));
  };
  return y;
}

// Cosine similarity of two 1 x N rows -> 1 x 1. Zero-norm inputs are an error.
inline NodeRef cosine(Tape& t, NodeRef a, NodeRef b, double norm_tol = 1e-12) {
  shape_check(a->value.rows() == 1 && b->value.rows() == 1 &&
                  a->value.cols() == b->value.cols(),
              "cosine");
  const double na = a->value.row(0).norm();
  const double nb = b->value.row(0).norm();
  MMRE_CHECK(na > norm_tol && nb > norm_tol, "cosine: zero-norm vector input");
  const double dot = a->value.row(0).dot(b->value.row(0));
  const double c = dot / (na * nb);
  Mat v(1, 1);
  v(0, 0) = c;
  NodeRef y = t.make(std::move(v), a->requires_grad || b->requires_grad);
  y->backward = [a, b, na, nb, c](const Node& self) {
    const double g = self.grad(0, 0);
    if (a->requires_grad)
      accum(a, g * (b->value / (na * nb) - c * a->value / (na * na)));
    if (b->requires_grad)
      accum(b, g * (a->value / (na * nb) - c * b->value / (nb * nb)));
  };
  return y;
}

}  // namespace mmre::ad
