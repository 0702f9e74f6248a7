#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "transfertraj/nn.hpp"
#include "transfertraj/rng.hpp"
#include "transfertraj/tape.hpp"
#include "transfertraj/types.hpp"

namespace transfertraj {

// Noisy top-k gate for a single token. Returns a length-C vector with exactly
// min(k, C) positive entries summing to one; everything else is exactly zero.
// Noise is only injected when `train` is set, so evaluation is deterministic.
// Ties keep the lower expert index.
inline Eigen::VectorXd noisy_topk_gate(const Eigen::VectorXd& u, const Eigen::MatrixXd& w_gate,
                                       const Eigen::MatrixXd& w_noise, int k, bool train,
                                       Rng* rng) {
  if (w_gate.rows() != u.size() || w_noise.rows() != u.size() || w_noise.cols() != w_gate.cols()) {
    throw DimMismatch("gate weight shapes do not match the input");
  }
  const int n_experts = static_cast<int>(w_gate.cols());
  if (k < 1 || k > n_experts) throw InvalidConfig("top_k must be in [1, n_experts]");
  Eigen::VectorXd logits = w_gate.transpose() * u;
  if (train) {
    if (rng == nullptr) throw InvalidConfig("training-mode gating needs an rng");
    const Eigen::VectorXd raw = w_noise.transpose() * u;
    for (int c = 0; c < n_experts; ++c) {
      const double sp = raw[c] > 30.0 ? raw[c] : std::log1p(std::exp(raw[c]));
      logits[c] += rng->normal() * sp;
    }
  }
  std::vector<int> order(n_experts);
  for (int c = 0; c < n_experts; ++c) order[c] = c;
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (logits[a] != logits[b]) return logits[a] > logits[b];
    return a < b;
  });
  double max_kept = logits[order[0]];
  double denom = 0.0;
  Eigen::VectorXd gates = Eigen::VectorXd::Zero(n_experts);
  for (int r = 0; r < k; ++r) denom += std::exp(logits[order[r]] - max_kept);
  for (int r = 0; r < k; ++r) gates[order[r]] = std::exp(logits[order[r]] - max_kept) / denom;
  return gates;
}

// Which experts each token was routed to, per layer. Indices within a token
// are ascending.
struct GateTrace {
  std::vector<std::vector<std::vector<int>>> selected;
};

struct MoeResult {
  int output = -1;    // n x d
  int aux_loss = -1;  // 1 x 1 squared coefficient of variation of importance, or -1
};

// Sparse mixture of experts over token rows. Each token is dispatched to its
// top-k experts only; expert MLPs never see unrouted rows. Parameters live
// under `prefix`: gate.w and noise.w (d x C) plus expert{j}.w1/b1/w2/b2.
template <typename T>
MoeResult moe_block(ad::Tape<T>& tape, BoundParams<T>& params, const ModelConfig& cfg,
                    const std::string& prefix, int tokens, bool train, Rng* rng,
                    std::vector<std::vector<int>>* selected_out, bool want_aux) {
  const int n = static_cast<int>(tape.val(tokens).rows());
  int logits = tape.matmul(tokens, params.node(prefix + ".gate.w"));
  if (train) {
    if (rng == nullptr) throw InvalidConfig("training-mode gating needs an rng");
    const int noise_scale = tape.softplus(tape.matmul(tokens, params.node(prefix + ".noise.w")));
    ad::Mat<T> eps(n, cfg.n_experts);
    for (int i = 0; i < n; ++i) {
      for (int c = 0; c < cfg.n_experts; ++c) eps(i, c) = T(rng->normal());
    }
    logits = tape.add(logits, tape.mul_const(noise_scale, std::move(eps)));
  }
  std::vector<std::vector<int>> selected;
  const int gates = tape.topk_softmax_rows(logits, cfg.top_k, &selected);
  if (selected_out != nullptr) *selected_out = selected;

  MoeResult res;
  for (int j = 0; j < cfg.n_experts; ++j) {
    std::vector<int> routed;
    for (int i = 0; i < n; ++i) {
      for (const int c : selected[i]) {
        if (c == j) routed.push_back(i);
      }
    }
    if (routed.empty()) continue;
    const std::string ep = prefix + ".expert" + std::to_string(j);
    const int sub = tape.rows_gather(tokens, routed);
    const int hidden =
        tape.relu(tape.add_rowvec(tape.matmul(sub, params.node(ep + ".w1")), params.node(ep + ".b1")));
    const int expert_out =
        tape.add_rowvec(tape.matmul(hidden, params.node(ep + ".w2")), params.node(ep + ".b2"));
    const int gate_col = tape.slice_cols(tape.rows_gather(gates, routed), j, 1);
    const int weighted = tape.mul_colvec(expert_out, gate_col);
    const int scattered = tape.rows_scatter(weighted, routed, n);
    res.output = res.output < 0 ? scattered : tape.add(res.output, scattered);
  }
  if (res.output < 0) {
    res.output = tape.constant(ad::Mat<T>::Zero(n, cfg.d));
  }

  if (want_aux) {
    // Importance per expert is the summed gate mass; the squared coefficient
    // of variation C * sum(x^2) / sum(x)^2 - 1 penalizes uneven routing.
    const int ones = tape.constant(ad::Mat<T>::Ones(1, n));
    const int importance = tape.matmul(ones, gates);
    const int ssq = tape.sum_all(tape.square(importance));
    const int total_sq = tape.square(tape.sum_all(importance));
    res.aux_loss = tape.add_scalar(tape.scale(tape.div_scalar(ssq, total_sq), T(cfg.n_experts)), T(-1));
  }
  return res;
}

}  // namespace transfertraj
