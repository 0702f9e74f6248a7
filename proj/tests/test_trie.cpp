#include <Eigen/Dense>
#include <cmath>

#include "doctest.h"
#include "transfertraj/model.hpp"
#include "transfertraj/rng.hpp"
#include "transfertraj/trie.hpp"

using namespace transfertraj;
using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

namespace {

Mat random_mat(Rng& rng, int rows, int cols, double scale = 1.0) {
  Mat m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) m(i, j) = rng.normal() * scale;
  }
  return m;
}

}  // namespace

TEST_CASE("rotary frequencies follow the inverse power ladder") {
  const Vec thetas = rotary_thetas(32, 10000.0);
  REQUIRE(thetas.size() == 16);
  CHECK(thetas[0] == doctest::Approx(std::pow(10000.0, -2.0 / 32.0)).epsilon(1e-12));
  CHECK(thetas[15] == doctest::Approx(1e-4).epsilon(1e-12));
  for (int j = 0; j + 1 < 16; ++j) CHECK(thetas[j] > thetas[j + 1]);
  CHECK_THROWS_AS(rotary_thetas(7, 10000.0), InvalidConfig);
}

TEST_CASE("angle map is linear with no bias") {
  Rng rng(51);
  const Mat w_phi = random_mat(rng, 8, 2);
  CHECK(phi_angles(w_phi, 0.0, 0.0).norm() == 0.0);
  const Vec a = phi_angles(w_phi, 0.3, -0.2);
  const Vec b = phi_angles(w_phi, -0.1, 0.5);
  const Vec ab = phi_angles(w_phi, 0.2, 0.3);
  CHECK((a + b - ab).norm() < 1e-12);
  CHECK((phi_angles(w_phi, 0.6, -0.4) - 2.0 * a).norm() < 1e-12);
}

TEST_CASE("pair rotations compose additively and preserve norms") {
  Rng rng(52);
  const Vec v = random_mat(rng, 8, 1).col(0);
  const Vec thetas = rotary_thetas(8, 100.0);
  const Vec a1 = random_mat(rng, 4, 1).col(0);
  const Vec a2 = random_mat(rng, 4, 1).col(0);
  const Vec once = rotate_vector(rotate_vector(v, a1, thetas), a2, thetas);
  const Vec combined = rotate_vector(v, a1 + a2, thetas);
  CHECK((once - combined).norm() < 1e-12);
  CHECK(rotate_vector(v, a1, thetas).norm() == doctest::Approx(v.norm()));
  CHECK((rotate_vector(v, Vec::Zero(4), thetas) - v).norm() == 0.0);
}

TEST_CASE("rotated query-key products depend on relative displacement only") {
  Rng rng(53);
  const int d = 16;
  const Vec thetas = rotary_thetas(d, 10000.0);
  const Mat w_q = random_mat(rng, d, d);
  const Mat w_k = random_mat(rng, d, d);
  const Mat w_phi = random_mat(rng, d / 2, 2);
  const Vec e_i = random_mat(rng, d, 1).col(0);
  const Vec e_j = random_mat(rng, d, 1).col(0);

  for (int trial = 0; trial < 20; ++trial) {
    const double xi = rng.uniform(-0.05, 0.05);
    const double yi = rng.uniform(-0.05, 0.05);
    const double xj = rng.uniform(-0.05, 0.05);
    const double yj = rng.uniform(-0.05, 0.05);

    const Vec q = rotate_vector(w_q * e_i, phi_angles(w_phi, xi, yi), thetas);
    const Vec k = rotate_vector(w_k * e_j, phi_angles(w_phi, xj, yj), thetas);
    const double direct = q.dot(k);

    // Same product, computed from the displacement alone.
    const Vec rel = rotate_vector(w_k * e_j, phi_angles(w_phi, xj - xi, yj - yi), thetas);
    const double relative = (w_q * e_i).dot(rel);
    CHECK(direct == doctest::Approx(relative).epsilon(1e-10));

    // Translating both points leaves the product unchanged.
    const double dx = rng.uniform(-0.3, 0.3);
    const double dy = rng.uniform(-0.3, 0.3);
    const Vec q2 = rotate_vector(w_q * e_i, phi_angles(w_phi, xi + dx, yi + dy), thetas);
    const Vec k2 = rotate_vector(w_k * e_j, phi_angles(w_phi, xj + dx, yj + dy), thetas);
    CHECK(q2.dot(k2) == doctest::Approx(direct).epsilon(1e-10));
  }
}

namespace {

ModelConfig small_cfg() {
  ModelConfig cfg;
  cfg.d = 16;
  cfg.n_heads = 2;
  cfg.n_experts = 3;
  cfg.top_k = 2;
  cfg.fourier_feats = 4;
  cfg.d_text = 8;
  cfg.n_layers = 1;
  return cfg;
}

}  // namespace

TEST_CASE("attention layer is invariant to translating all offsets") {
  const ModelConfig cfg = small_cfg();
  const ParamStore<double> store = build_params<double>(cfg, 7);
  Rng rng(54);
  const int n = 5;
  const Mat tokens = random_mat(rng, n, cfg.d);
  Mat offsets = random_mat(rng, n, 2, 0.01);
  const Mat mask = Mat::Zero(n, n);
  const Mat valid = Mat::Ones(n, 1);

  const auto run = [&](const Mat& offs) {
    ad::Tape<double> tape;
    BoundParams<double> params(tape, store);
    const int out = trie_attention(tape, params, cfg, "layer0.trie", tape.constant(tokens),
                                   tape.constant(offs), mask, tape.constant(valid));
    return tape.val(out);
  };

  const Mat base = run(offsets);
  Mat shifted = offsets;
  shifted.col(0).array() += 0.7;
  shifted.col(1).array() -= 1.3;
  CHECK((run(shifted) - base).cwiseAbs().maxCoeff() < 1e-9);

  Mat scaled = offsets * 2.0;
  CHECK((run(scaled) - base).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("attention ignores padded keys and zeroes padded rows") {
  const ModelConfig cfg = small_cfg();
  const ParamStore<double> store = build_params<double>(cfg, 8);
  Rng rng(55);
  const int n = 4;
  const int pad = 2;
  const Mat tokens = random_mat(rng, n, cfg.d);
  const Mat offsets = random_mat(rng, n, 2, 0.01);

  const Mat no_mask = Mat::Zero(n, n);
  const Mat all_valid = Mat::Ones(n, 1);
  ad::Tape<double> t1;
  BoundParams<double> p1(t1, store);
  const int out1 = trie_attention(t1, p1, cfg, "layer0.trie", t1.constant(tokens),
                                  t1.constant(offsets), no_mask, t1.constant(all_valid));

  Mat tokens_pad = Mat::Zero(n + pad, cfg.d);
  tokens_pad.topRows(n) = tokens;
  tokens_pad.bottomRows(pad).setConstant(0.37);
  Mat offsets_pad = Mat::Zero(n + pad, 2);
  offsets_pad.topRows(n) = offsets;
  Mat mask = Mat::Zero(n + pad, n + pad);
  mask.rightCols(pad).setConstant(kPadLogit);
  Mat valid = Mat::Ones(n + pad, 1);
  valid.bottomRows(pad).setZero();

  ad::Tape<double> t2;
  BoundParams<double> p2(t2, store);
  const int out2 = trie_attention(t2, p2, cfg, "layer0.trie", t2.constant(tokens_pad),
                                  t2.constant(offsets_pad), mask, t2.constant(valid));

  const Mat a = t1.val(out1);
  const Mat b = t2.val(out2);
  CHECK((b.topRows(n) - a).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(b.bottomRows(pad).isZero());
}
