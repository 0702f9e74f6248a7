#pragma once

#include <Eigen/Dense>
#include <string>

#include "transfertraj/modality.hpp"
#include "transfertraj/nn.hpp"
#include "transfertraj/tape.hpp"
#include "transfertraj/types.hpp"

namespace transfertraj {

// Rotary frequencies: theta_j = theta_base^(-2j / head_dim) for j = 1..head_dim/2,
// strictly decreasing so angle pairs cover a spectrum of spatial scales.
inline Eigen::VectorXd rotary_thetas(int head_dim, double theta_base) {
  if (head_dim <= 0 || head_dim % 2 != 0) throw InvalidConfig("head_dim must be even and positive");
  Eigen::VectorXd thetas(head_dim / 2);
  for (int j = 1; j <= head_dim / 2; ++j) {
    thetas[j - 1] = std::pow(theta_base, -2.0 * j / head_dim);
  }
  return thetas;
}

// Learned angle map: phi(x, y) = W_phi * (x, y), no bias. W_phi is (d_h/2) x 2;
// the missing bias is what makes angle differences depend only on coordinate
// differences.
inline Eigen::VectorXd phi_angles(const Eigen::MatrixXd& w_phi, double x, double y) {
  if (w_phi.cols() != 2) throw DimMismatch("w_phi must have 2 columns");
  return w_phi.col(0) * x + w_phi.col(1) * y;
}

// Rotates consecutive coordinate pairs of v: pair j turns by angles[j] * thetas[j].
inline Eigen::VectorXd rotate_vector(const Eigen::VectorXd& v, const Eigen::VectorXd& angles,
                                     const Eigen::VectorXd& thetas) {
  if (v.size() != 2 * angles.size() || angles.size() != thetas.size()) {
    throw DimMismatch("rotate_vector expects |v| = 2|angles| = 2|thetas|");
  }
  Eigen::VectorXd out(v.size());
  for (int j = 0; j < angles.size(); ++j) {
    const double a = angles[j] * thetas[j];
    const double c = std::cos(a);
    const double s = std::sin(a);
    out[2 * j] = v[2 * j] * c - v[2 * j + 1] * s;
    out[2 * j + 1] = v[2 * j] * s + v[2 * j + 1] * c;
  }
  return out;
}

// Multi-head attention where each head's query/key vectors are rotated by
// angles derived from the token's spatial offset, so logits depend on relative
// displacement only. Layer parameters live under `prefix`: wq/wk/wv (d x d,
// applied as row-vector products) and wphi (2 x d_h/2, shared across heads).
//
// `offsets_node` is a constant n x 2 node; `key_mask` adds -inf-like penalties
// to padded key columns; `valid_node` zeroes padded output rows.
template <typename T>
int trie_attention(ad::Tape<T>& tape, BoundParams<T>& params, const ModelConfig& cfg,
                   const std::string& prefix, int tokens, int offsets_node,
                   const ad::Mat<T>& key_mask, int valid_node) {
  const int d_h = cfg.head_dim();
  const int n = static_cast<int>(tape.val(tokens).rows());
  const int q = tape.matmul(tokens, params.node(prefix + ".wq"));
  const int k = tape.matmul(tokens, params.node(prefix + ".wk"));
  const int v = tape.matmul(tokens, params.node(prefix + ".wv"));

  const int raw_angles = tape.matmul(offsets_node, params.node(prefix + ".wphi"));  // n x d_h/2
  const Eigen::VectorXd thetas = rotary_thetas(d_h, cfg.theta_base);
  ad::Mat<T> theta_rep(n, d_h / 2);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d_h / 2; ++j) theta_rep(i, j) = T(thetas[j]);
  }
  const int angles = tape.mul_const(raw_angles, std::move(theta_rep));

  const T inv_sqrt_dh = T(1.0 / std::sqrt(static_cast<double>(d_h)));
  int out = -1;
  for (int h = 0; h < cfg.n_heads; ++h) {
    const int qh = tape.slice_cols(q, h * d_h, d_h);
    const int kh = tape.slice_cols(k, h * d_h, d_h);
    const int vh = tape.slice_cols(v, h * d_h, d_h);
    const int qr = tape.rotate_pairs(qh, angles);
    const int kr = tape.rotate_pairs(kh, angles);
    const int logits = tape.scale(tape.matmul_nt(qr, kr), inv_sqrt_dh);
    const int weights = tape.softmax_rows(tape.add_const(logits, key_mask));
    const int head_out = tape.matmul(weights, vh);
    out = h == 0 ? head_out : tape.concat_cols(out, head_out);
  }
  return tape.mul_colvec(out, valid_node);
}

}  // namespace transfertraj
