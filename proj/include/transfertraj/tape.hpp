#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "transfertraj/types.hpp"

namespace transfertraj::ad {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

// Reverse-mode tape over dense matrices. Every op appends a node holding its
// value and a closure that routes the node's gradient to its inputs; nodes are
// only ever created after their inputs, so a single reverse sweep from the
// loss node is a valid topological order. Graphs are rebuilt per forward pass.
template <typename T>
class Tape {
 public:
  using M = Mat<T>;

  int leaf(M value, bool requires_grad) {
    return push(std::move(value), requires_grad, nullptr);
  }

  int constant(M value) { return leaf(std::move(value), false); }

  // --- elementwise -------------------------------------------------------

  int add(int a, int b) {
    check_same_shape(a, b, "add");
    return push(val(a) + val(b), rg(a) || rg(b), [a, b](Tape& t, int out) {
      if (t.rg(a)) t.nodes_[a].grad += t.nodes_[out].grad;
      if (t.rg(b)) t.nodes_[b].grad += t.nodes_[out].grad;
    });
  }

  int sub(int a, int b) {
    check_same_shape(a, b, "sub");
    return push(val(a) - val(b), rg(a) || rg(b), [a, b](Tape& t, int out) {
      if (t.rg(a)) t.nodes_[a].grad += t.nodes_[out].grad;
      if (t.rg(b)) t.nodes_[b].grad -= t.nodes_[out].grad;
    });
  }

  int mul(int a, int b) {
    check_same_shape(a, b, "mul");
    return push(val(a).cwiseProduct(val(b)), rg(a) || rg(b), [a, b](Tape& t, int out) {
      if (t.rg(a)) t.nodes_[a].grad += t.nodes_[out].grad.cwiseProduct(t.val(b));
      if (t.rg(b)) t.nodes_[b].grad += t.nodes_[out].grad.cwiseProduct(t.val(a));
    });
  }

  int scale(int a, T s) {
    return push(val(a) * s, rg(a), [a, s](Tape& t, int out) {
      if (t.rg(a)) t.nodes_[a].grad += t.nodes_[out].grad * s;
    });
  }

  int add_scalar(int a, T s) {
    return push(val(a).array() + s, rg(a), [a](Tape& t, int out) {
      if (t.rg(a)) t.nodes_[a].grad += t.nodes_[out].grad;
    });
  }

  int add_const(int a, const M& c) {
    check_shape(a, c, "add_const");
    return push(val(a) + c, rg(a), [a](Tape& t, int out) {
      if (t.rg(a)) t.nodes_[a].grad += t.nodes_[out].grad;
    });
  }

  int mul_const(int a, M c) {
    check_shape(a, c, "mul_const");
    M prod = val(a).cwiseProduct(c);
    return push(std::move(prod), rg(a), [a, c = std::move(c)](Tape& t, int out) {
      if (t.rg(a)) t.nodes_[a].grad += t.nodes_[out].grad.cwiseProduct(c);
    });
  }

  // --- matrix products ----------------------------------------------------

  int matmul(int a, int b) {
    if (val(a).cols() != val(b).rows()) throw DimMismatch("matmul inner dims");
    return push(val(a) * val(b), rg(a) || rg(b), [a, b](Tape& t, int out) {
      const M& g = t.nodes_[out].grad;
      if (t.rg(a)) t.nodes_[a].grad += g * t.val(b).transpose();
      if (t.rg(b)) t.nodes_[b].grad += t.val(a).transpose() * g;
    });
  }

  // a * b^T
  int matmul_nt(int a, int b) {
    if (val(a).cols() != val(b).cols()) throw DimMismatch("matmul_nt inner dims");
    return push(val(a) * val(b).transpose(), rg(a) || rg(b), [a, b](Tape& t, int out) {
      const M& g = t.nodes_[out].grad;
      if (t.rg(a)) t.nodes_[a].grad += g * t.val(b);
      if (t.rg(b)) t.nodes_[b].grad += g.transpose() * t.val(a);
    });
  }

  // --- broadcasting helpers (v is 1 x cols or rows x 1) --------------------

  int add_rowvec(int a, int v) {
    if (val(v).rows() != 1 || val(v).cols() != val(a).cols()) throw DimMismatch("add_rowvec");
    M out = val(a);
    out.rowwise() += val(v).row(0);
    return push(std::move(out), rg(a) || rg(v), [a, v](Tape& t, int o) {
      const M& g = t.nodes_[o].grad;
      if (t.rg(a)) t.nodes_[a].grad += g;
      if (t.rg(v)) t.nodes_[v].grad += g.colwise().sum();
    });
  }

  int mul_rowvec(int a, int v) {
    if (val(v).rows() != 1 || val(v).cols() != val(a).cols()) throw DimMismatch("mul_rowvec");
    M out = (val(a).array().rowwise() * val(v).row(0).array()).matrix();
    return push(std::move(out), rg(a) || rg(v), [a, v](Tape& t, int o) {
      const M& g = t.nodes_[o].grad;
      if (t.rg(a)) t.nodes_[a].grad.array() += g.array().rowwise() * t.val(v).row(0).array();
      if (t.rg(v)) t.nodes_[v].grad += (g.cwiseProduct(t.val(a))).colwise().sum();
    });
  }

  int mul_colvec(int a, int v) {
    if (val(v).cols() != 1 || val(v).rows() != val(a).rows()) throw DimMismatch("mul_colvec");
    M out = (val(a).array().colwise() * val(v).col(0).array()).matrix();
    return push(std::move(out), rg(a) || rg(v), [a, v](Tape& t, int o) {
      const M& g = t.nodes_[o].grad;
      if (t.rg(a)) t.nodes_[a].grad.array() += g.array().colwise() * t.val(v).col(0).array();
      if (t.rg(v)) t.nodes_[v].grad += (g.cwiseProduct(t.val(a))).rowwise().sum();
    });
  }

  int rowwise_dot(int a, int b) {
    check_same_shape(a, b, "rowwise_dot");
    M out = val(a).cwiseProduct(val(b)).rowwise().sum();
    return push(std::move(out), rg(a) || rg(b), [a, b](Tape& t, int o) {
      const M& g = t.nodes_[o].grad;  // rows x 1
      if (t.rg(a)) t.nodes_[a].grad.array() += t.val(b).array().colwise() * g.col(0).array();
      if (t.rg(b)) t.nodes_[b].grad.array() += t.val(a).array().colwise() * g.col(0).array();
    });
  }

  // --- shape ops ------------------------------------------------------------

  int concat_cols(int a, int b) {
    if (val(a).rows() != val(b).rows()) throw DimMismatch("concat_cols row counts");
    M out(val(a).rows(), val(a).cols() + val(b).cols());
    out << val(a), val(b);
    const int ca = static_cast<int>(val(a).cols());
    return push(std::move(out), rg(a) || rg(b), [a, b, ca](Tape& t, int o) {
      const M& g = t.nodes_[o].grad;
      if (t.rg(a)) t.nodes_[a].grad += g.leftCols(ca);
      if (t.rg(b)) t.nodes_[b].grad += g.rightCols(g.cols() - ca);
    });
  }

  int slice_cols(int a, int c0, int n) {
    if (c0 < 0 || n < 0 || c0 + n > val(a).cols()) throw DimMismatch("slice_cols range");
    return push(val(a).middleCols(c0, n), rg(a), [a, c0, n](Tape& t, int o) {
      if (t.rg(a)) t.nodes_[a].grad.middleCols(c0, n) += t.nodes_[o].grad;
    });
  }

  int rows_gather(int a, std::vector<int> idx) {
    M out(static_cast<int>(idx.size()), val(a).cols());
    for (int i = 0; i < out.rows(); ++i) out.row(i) = val(a).row(idx[i]);
    return push(std::move(out), rg(a), [a, idx = std::move(idx)](Tape& t, int o) {
      if (!t.rg(a)) return;
      const M& g = t.nodes_[o].grad;
      for (int i = 0; i < g.rows(); ++i) t.nodes_[a].grad.row(idx[i]) += g.row(i);
    });
  }

  int rows_scatter(int a, std::vector<int> idx, int total_rows) {
    if (static_cast<int>(idx.size()) != val(a).rows()) throw DimMismatch("rows_scatter index count");
    M out = M::Zero(total_rows, val(a).cols());
    for (int i = 0; i < val(a).rows(); ++i) out.row(idx[i]) = val(a).row(i);
    return push(std::move(out), rg(a), [a, idx = std::move(idx)](Tape& t, int o) {
      if (!t.rg(a)) return;
      const M& g = t.nodes_[o].grad;
      for (std::size_t i = 0; i < idx.size(); ++i) {
        t.nodes_[a].grad.row(static_cast<int>(i)) += g.row(idx[i]);
      }
    });
  }

  // --- nonlinearities -------------------------------------------------------

  int relu(int a) {
    return push(val(a).cwiseMax(T(0)), rg(a), [a](Tape& t, int o) {
      if (!t.rg(a)) return;
      t.nodes_[a].grad.array() +=
          t.nodes_[o].grad.array() * (t.val(a).array() > T(0)).template cast<T>();
    });
  }

  int softplus(int a) {
    M out = val(a).unaryExpr([](T x) {
      return x > T(30) ? x : T(std::log1p(std::exp(double(x))));
    });
    return push(std::move(out), rg(a), [a](Tape& t, int o) {
      if (!t.rg(a)) return;
      t.nodes_[a].grad.array() += t.nodes_[o].grad.array() *
          t.val(a).unaryExpr([](T x) { return T(1.0 / (1.0 + std::exp(-double(x)))); }).array();
    });
  }

  int sin_op(int a) {
    return push(M(val(a).array().sin().matrix()), rg(a), [a](Tape& t, int o) {
      if (t.rg(a)) t.nodes_[a].grad.array() += t.nodes_[o].grad.array() * t.val(a).array().cos();
    });
  }

  int cos_op(int a) {
    return push(M(val(a).array().cos().matrix()), rg(a), [a](Tape& t, int o) {
      if (t.rg(a)) t.nodes_[a].grad.array() -= t.nodes_[o].grad.array() * t.val(a).array().sin();
    });
  }

  int square(int a) {
    return push(val(a).cwiseProduct(val(a)), rg(a), [a](Tape& t, int o) {
      if (t.rg(a)) t.nodes_[a].grad.array() += T(2) * t.nodes_[o].grad.array() * t.val(a).array();
    });
  }

  // sqrt(x + eps), elementwise; eps keeps the gradient finite at x = 0.
  int sqrt_eps(int a, T eps) {
    M out = (val(a).array() + eps).sqrt().matrix();
    return push(std::move(out), rg(a), [a](Tape& t, int o) {
      if (!t.rg(a)) return;
      t.nodes_[a].grad.array() +=
          t.nodes_[o].grad.array() / (T(2) * t.nodes_[o].val.array());
    });
  }

  // --- normalizations ---------------------------------------------------------

  int softmax_rows(int a) {
    M out = val(a);
    for (int i = 0; i < out.rows(); ++i) {
      const T mx = out.row(i).maxCoeff();
      out.row(i) = (out.row(i).array() - mx).exp().matrix();
      out.row(i) /= out.row(i).sum();
    }
    return push(std::move(out), rg(a), [a](Tape& t, int o) {
      if (!t.rg(a)) return;
      const M& p = t.nodes_[o].val;
      const M& g = t.nodes_[o].grad;
      for (int i = 0; i < p.rows(); ++i) {
        const T dot = g.row(i).dot(p.row(i));
        t.nodes_[a].grad.row(i).array() += p.row(i).array() * (g.row(i).array() - dot);
      }
    });
  }

  // Per row: keep the k largest logits (ties to the lower index), softmax over
  // the kept set, zeros elsewhere. `selected` receives the kept indices per
  // row in ascending order.
  int topk_softmax_rows(int a, int k, std::vector<std::vector<int>>* selected) {
    const M& x = val(a);
    const int cols = static_cast<int>(x.cols());
    const int keep = std::min(k, cols);
    M out = M::Zero(x.rows(), cols);
    std::vector<std::vector<int>> sel(x.rows());
    for (int i = 0; i < x.rows(); ++i) {
      std::vector<int> order(cols);
      std::iota(order.begin(), order.end(), 0);
      std::sort(order.begin(), order.end(), [&](int p, int q) {
        if (x(i, p) != x(i, q)) return x(i, p) > x(i, q);
        return p < q;
      });
      order.resize(keep);
      std::sort(order.begin(), order.end());
      T mx = x(i, order[0]);
      for (int j : order) mx = std::max(mx, x(i, j));
      T denom = T(0);
      for (int j : order) denom += std::exp(x(i, j) - mx);
      for (int j : order) out(i, j) = std::exp(x(i, j) - mx) / denom;
      sel[i] = order;
    }
    if (selected != nullptr) *selected = sel;
    return push(std::move(out), rg(a), [a, sel = std::move(sel)](Tape& t, int o) {
      if (!t.rg(a)) return;
      const M& p = t.nodes_[o].val;
      const M& g = t.nodes_[o].grad;
      for (std::size_t i = 0; i < sel.size(); ++i) {
        T dot = T(0);
        for (int j : sel[i]) dot += g(i, j) * p(i, j);
        for (int j : sel[i]) t.nodes_[a].grad(i, j) += p(i, j) * (g(i, j) - dot);
      }
    });
  }

  int layer_norm_rows(int a, T eps) {
    const M& x = val(a);
    const int cols = static_cast<int>(x.cols());
    M out(x.rows(), cols);
    M inv_std(x.rows(), 1);
    for (int i = 0; i < x.rows(); ++i) {
      const T mean = x.row(i).mean();
      const T var = (x.row(i).array() - mean).square().mean();
      const T is = T(1) / std::sqrt(var + eps);
      inv_std(i, 0) = is;
      out.row(i) = ((x.row(i).array() - mean) * is).matrix();
    }
    return push(std::move(out), rg(a), [a, inv_std = std::move(inv_std), cols](Tape& t, int o) {
      if (!t.rg(a)) return;
      const M& y = t.nodes_[o].val;
      const M& g = t.nodes_[o].grad;
      const T inv_n = T(1) / T(cols);
      for (int i = 0; i < y.rows(); ++i) {
        const T g_mean = g.row(i).mean();
        const T gy_mean = g.row(i).cwiseProduct(y.row(i)).sum() * inv_n;
        t.nodes_[a].grad.row(i).array() +=
            inv_std(i, 0) * (g.row(i).array() - g_mean - y.row(i).array() * gy_mean);
      }
    });
  }

  // --- rotary pairs -----------------------------------------------------------

  // Rotates each consecutive (2j, 2j+1) column pair of v by angles(:, j).
  int rotate_pairs(int v, int angles) {
    const M& x = val(v);
    const M& a = val(angles);
    if (x.cols() != 2 * a.cols() || x.rows() != a.rows()) {
      throw DimMismatch("rotate_pairs expects v cols = 2 * angle cols, equal rows");
    }
    M c = a.array().cos().matrix();
    M s = a.array().sin().matrix();
    M out(x.rows(), x.cols());
    for (int j = 0; j < a.cols(); ++j) {
      out.col(2 * j) = x.col(2 * j).cwiseProduct(c.col(j)) - x.col(2 * j + 1).cwiseProduct(s.col(j));
      out.col(2 * j + 1) =
          x.col(2 * j).cwiseProduct(s.col(j)) + x.col(2 * j + 1).cwiseProduct(c.col(j));
    }
    return push(std::move(out), rg(v) || rg(angles),
                [v, angles, c = std::move(c), s = std::move(s)](Tape& t, int o) {
      const M& g = t.nodes_[o].grad;
      const M& x = t.val(v);
      for (int j = 0; j < c.cols(); ++j) {
        const auto g0 = g.col(2 * j);
        const auto g1 = g.col(2 * j + 1);
        if (t.rg(v)) {
          // Transposed rotation applied to the output gradient.
          t.nodes_[v].grad.col(2 * j) += g0.cwiseProduct(c.col(j)) + g1.cwiseProduct(s.col(j));
          t.nodes_[v].grad.col(2 * j + 1) += g1.cwiseProduct(c.col(j)) - g0.cwiseProduct(s.col(j));
        }
        if (t.rg(angles)) {
          const auto x0 = x.col(2 * j);
          const auto x1 = x.col(2 * j + 1);
          t.nodes_[angles].grad.col(j) +=
              g0.cwiseProduct(-x0.cwiseProduct(s.col(j)) - x1.cwiseProduct(c.col(j))) +
              g1.cwiseProduct(x0.cwiseProduct(c.col(j)) - x1.cwiseProduct(s.col(j)));
        }
      }
    });
  }

  // --- reductions -----------------------------------------------------------

  int sum_all(int a) {
    M out(1, 1);
    out(0, 0) = val(a).sum();
    return push(std::move(out), rg(a), [a](Tape& t, int o) {
      if (t.rg(a)) t.nodes_[a].grad.array() += t.nodes_[o].grad(0, 0);
    });
  }

  // a / b for 1x1 nodes.
  int div_scalar(int a, int b) {
    if (val(a).size() != 1 || val(b).size() != 1) throw DimMismatch("div_scalar expects 1x1");
    M out(1, 1);
    out(0, 0) = val(a)(0, 0) / val(b)(0, 0);
    return push(std::move(out), rg(a) || rg(b), [a, b](Tape& t, int o) {
      const T g = t.nodes_[o].grad(0, 0);
      const T bv = t.val(b)(0, 0);
      if (t.rg(a)) t.nodes_[a].grad(0, 0) += g / bv;
      if (t.rg(b)) t.nodes_[b].grad(0, 0) -= g * t.val(a)(0, 0) / (bv * bv);
    });
  }

  // --- execution --------------------------------------------------------------

  void backward(int root) {
    if (val(root).size() != 1) throw DimMismatch("backward root must be a scalar node");
    for (auto& n : nodes_) n.grad.setZero();
    nodes_[root].grad(0, 0) = T(1);
    for (int i = root; i >= 0; --i) {
      if (nodes_[i].back && nodes_[i].requires_grad) nodes_[i].back(*this, i);
    }
  }

  const M& val(int id) const { return nodes_[id].val; }
  const M& grad(int id) const { return nodes_[id].grad; }
  bool rg(int id) const { return nodes_[id].requires_grad; }
  int size() const { return static_cast<int>(nodes_.size()); }

 private:
  struct Node {
    M val;
    M grad;
    bool requires_grad = false;
    std::function<void(Tape&, int)> back;
  };

  std::vector<Node> nodes_;

  int push(M value, bool requires_grad, std::function<void(Tape&, int)> back) {
    Node n;
    n.grad = M::Zero(value.rows(), value.cols());
    n.val = std::move(value);
    n.requires_grad = requires_grad;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  void check_same_shape(int a, int b, const char* op) const {
    if (val(a).rows() != val(b).rows() || val(a).cols() != val(b).cols()) {
      throw DimMismatch(std::string(op) + ": shape mismatch");
    }
  }

  void check_shape(int a, const M& c, const char* op) const {
    if (val(a).rows() != c.rows() || val(a).cols() != c.cols()) {
      throw DimMismatch(std::string(op) + ": shape mismatch");
    }
  }
};

}  // namespace transfertraj::ad
