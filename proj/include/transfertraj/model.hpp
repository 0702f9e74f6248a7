#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "transfertraj/moe.hpp"
#include "transfertraj/modality.hpp"
#include "transfertraj/nn.hpp"
#include "transfertraj/rng.hpp"
#include "transfertraj/tape.hpp"
#include "transfertraj/trie.hpp"
#include "transfertraj/types.hpp"

namespace transfertraj {

inline constexpr double kLnEps = 1e-5;
inline constexpr double kPadLogit = -1e30;
inline constexpr double kTemporalLossEps = 1e-8;

// Fresh parameter store for the given config. Weight matrices are drawn with
// stddev 1/sqrt(fan_in), embeddings and mask tokens with stddev 0.02, biases
// start at zero and layer-norm gains at one.
template <typename T>
ParamStore<T> build_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, "param-init"));
  ParamStore<T> store;
  const int d = cfg.d;
  const int f = cfg.fourier_feats;
  const int dt = cfg.d_text;
  const int dff = cfg.expert_hidden();
  const auto weight = [&](int rows, int cols) {
    return gaussian_matrix<T>(rng, rows, cols, 1.0 / std::sqrt(static_cast<double>(rows)));
  };
  const auto embed = [&](int rows, int cols) { return gaussian_matrix<T>(rng, rows, cols, 0.02); };
  const auto zeros = [](int rows, int cols) { return ad::Mat<T>::Zero(rows, cols).eval(); };
  const auto ones = [](int rows, int cols) { return ad::Mat<T>::Ones(rows, cols).eval(); };

  store.add("enc.spatial.w", weight(2, d));
  store.add("enc.spatial.b", zeros(1, d));
  // Fourier frequency bandwidth starts matched to the feature ranges (hour,
  // minute, and trip offsets span tens of units); wider inits wrap the
  // cos/sin map many times across the range and stall the readout.
  store.add("enc.fourier.w", gaussian_matrix<T>(rng, 4, f, 0.02));
  store.add("enc.tmlp.w1", weight(2 * f, d));
  store.add("enc.tmlp.b1", zeros(1, d));
  store.add("enc.tmlp.w2", weight(d, d));
  store.add("enc.tmlp.b2", zeros(1, d));
  store.add("enc.poi.w", weight(dt, d));
  store.add("enc.poi.b", zeros(1, d));
  store.add("enc.road.w", weight(dt, d));
  store.add("enc.road.b", zeros(1, d));
  store.add("enc.null.poi", embed(1, dt));
  store.add("enc.null.road", embed(1, dt));

  store.add("mix.mask.s", embed(1, d));
  store.add("mix.mask.t", embed(1, d));
  store.add("mix.mask.p", embed(1, d));
  store.add("mix.mask.r", embed(1, d));
  store.add("mix.mod_type", embed(4, d));
  for (int ml = 0; ml < cfg.mix_layers; ++ml) {
    const std::string p = "mix" + std::to_string(ml);
    store.add(p + ".ln1.g", ones(1, d));
    store.add(p + ".ln1.b", zeros(1, d));
    store.add(p + ".attn.wq", weight(d, d));
    store.add(p + ".attn.wk", weight(d, d));
    store.add(p + ".attn.wv", weight(d, d));
    store.add(p + ".ln2.g", ones(1, d));
    store.add(p + ".ln2.b", zeros(1, d));
    store.add(p + ".ffn.w1", weight(d, 4 * d));
    store.add(p + ".ffn.b1", zeros(1, 4 * d));
    store.add(p + ".ffn.w2", weight(4 * d, d));
    store.add(p + ".ffn.b2", zeros(1, d));
  }

  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l);
    store.add(p + ".trie.wq", weight(d, d));
    store.add(p + ".trie.wk", weight(d, d));
    store.add(p + ".trie.wv", weight(d, d));
    store.add(p + ".trie.wphi", gaussian_matrix<T>(rng, 2, cfg.head_dim() / 2, 1.0));
    store.add(p + ".ln1.g", ones(1, d));
    store.add(p + ".ln1.b", zeros(1, d));
    store.add(p + ".moe.gate.w", weight(d, cfg.n_experts));
    store.add(p + ".moe.noise.w", weight(d, cfg.n_experts));
    for (int j = 0; j < cfg.n_experts; ++j) {
      const std::string ep = p + ".moe.expert" + std::to_string(j);
      store.add(ep + ".w1", weight(d, dff));
      store.add(ep + ".b1", zeros(1, dff));
      store.add(ep + ".w2", weight(dff, d));
      store.add(ep + ".b2", zeros(1, d));
    }
    store.add(p + ".ln2.g", ones(1, d));
    store.add(p + ".ln2.b", zeros(1, d));
  }

  // Output heads start at zero so early predictions sit at the bias (the
  // running target mean) instead of random degree-scale offsets; the readout
  // weights grow only as far as the loss asks them to.
  store.add("pred.xy.w", zeros(d, 2));
  store.add("pred.xy.b", zeros(1, 2));
  store.add("pred.t.w", zeros(d, 4));
  store.add("pred.t.b", zeros(1, 4));
  return store;
}

template <typename T>
struct ForwardResult {
  int xy = -1;     // n x 2 spatial offset predictions
  int t4 = -1;     // n x 4 positive temporal predictions
  int embed = -1;  // n x d mixed modality embedding
  int final = -1;  // n x d output of the last layer
  int aux = -1;    // 1 x 1 routing balance penalty, averaged over layers, or -1
};

namespace detail {

template <typename T>
int ln_affine(ad::Tape<T>& tape, BoundParams<T>& params, const std::string& prefix, int x) {
  const int normed = tape.layer_norm_rows(x, T(kLnEps));
  return tape.add_rowvec(tape.mul_rowvec(normed, params.node(prefix + ".g")),
                         params.node(prefix + ".b"));
}

// One pre-norm transformer layer over the four modality tokens of every
// point. Attention mixes the four states per point; weights are shared across
// points.
template <typename T>
void mix_modalities(ad::Tape<T>& tape, BoundParams<T>& params, const ModelConfig& cfg,
                    const std::string& prefix, int (&mods)[4]) {
  const int d_h = cfg.head_dim();
  int normed[4];
  int qs[4];
  int ks[4];
  int vs[4];
  for (int m = 0; m < 4; ++m) {
    normed[m] = ln_affine(tape, params, prefix + ".ln1", mods[m]);
    qs[m] = tape.matmul(normed[m], params.node(prefix + ".attn.wq"));
    ks[m] = tape.matmul(normed[m], params.node(prefix + ".attn.wk"));
    vs[m] = tape.matmul(normed[m], params.node(prefix + ".attn.wv"));
  }
  const T inv_sqrt_dh = T(1.0 / std::sqrt(static_cast<double>(d_h)));
  for (int a = 0; a < 4; ++a) {
    int attn_out = -1;
    for (int h = 0; h < cfg.n_heads; ++h) {
      const int qa = tape.slice_cols(qs[a], h * d_h, d_h);
      int logits = -1;
      for (int b = 0; b < 4; ++b) {
        const int col =
            tape.scale(tape.rowwise_dot(qa, tape.slice_cols(ks[b], h * d_h, d_h)), inv_sqrt_dh);
        logits = b == 0 ? col : tape.concat_cols(logits, col);
      }
      const int weights = tape.softmax_rows(logits);
      int head_out = -1;
      for (int b = 0; b < 4; ++b) {
        const int term = tape.mul_colvec(tape.slice_cols(vs[b], h * d_h, d_h),
                                         tape.slice_cols(weights, b, 1));
        head_out = b == 0 ? term : tape.add(head_out, term);
      }
      attn_out = h == 0 ? head_out : tape.concat_cols(attn_out, head_out);
    }
    mods[a] = tape.add(mods[a], attn_out);
  }
  for (int m = 0; m < 4; ++m) {
    const int f = ln_affine(tape, params, prefix + ".ln2", mods[m]);
    const int hidden =
        tape.relu(tape.add_rowvec(tape.matmul(f, params.node(prefix + ".ffn.w1")),
                                  params.node(prefix + ".ffn.b1")));
    const int out = tape.add_rowvec(tape.matmul(hidden, params.node(prefix + ".ffn.w2")),
                                    params.node(prefix + ".ffn.b2"));
    mods[m] = tape.add(mods[m], out);
  }
}

}  // namespace detail

// Runs the full model on prepared inputs. `train` enables gate noise (which
// then requires `rng`); `trace` collects per-layer expert selections.
template <typename T>
ForwardResult<T> forward_pass(ad::Tape<T>& tape, BoundParams<T>& params, const ModelConfig& cfg,
                              const ModelInputs& in, bool train, Rng* rng, GateTrace* trace) {
  const int n = in.n_total;
  const auto c = [&](const Eigen::MatrixXd& m) { return tape.constant(m.template cast<T>()); };
  const auto ccol = [&](const Eigen::VectorXd& v) {
    return tape.constant(ad::Mat<T>(v.template cast<T>()));
  };

  const int offsets = c(in.offsets);
  const int keep_s = ccol((1.0 - in.spatial_masked.array()).matrix());
  const int ind_s = ccol(in.spatial_masked);
  const int keep_t = ccol((1.0 - in.temporal_masked.array()).matrix());
  const int ind_t = ccol(in.temporal_masked);

  int e_s = tape.add_rowvec(tape.matmul(offsets, params.node("enc.spatial.w")),
                            params.node("enc.spatial.b"));

  const int four = tape.matmul(c(in.tfeats), params.node("enc.fourier.w"));
  const int z = tape.scale(tape.concat_cols(tape.cos_op(four), tape.sin_op(four)),
                           T(1.0 / std::sqrt(static_cast<double>(cfg.fourier_feats))));
  const int t_hidden = tape.relu(
      tape.add_rowvec(tape.matmul(z, params.node("enc.tmlp.w1")), params.node("enc.tmlp.b1")));
  int e_t = tape.add_rowvec(tape.matmul(t_hidden, params.node("enc.tmlp.w2")),
                            params.node("enc.tmlp.b2"));

  const int poi_ctx =
      tape.add(c(in.poi_pooled), tape.matmul(ccol(in.poi_null), params.node("enc.null.poi")));
  int e_p = tape.add_rowvec(tape.matmul(poi_ctx, params.node("enc.poi.w")),
                            params.node("enc.poi.b"));
  const int road_ctx =
      tape.add(c(in.road_pooled), tape.matmul(ccol(in.road_null), params.node("enc.null.road")));
  int e_r = tape.add_rowvec(tape.matmul(road_ctx, params.node("enc.road.w")),
                            params.node("enc.road.b"));

  // Hidden modalities are swapped for learned mask tokens; the keep factor
  // also removes encoder bias on hidden rows.
  e_s = tape.add(tape.mul_colvec(e_s, keep_s), tape.matmul(ind_s, params.node("mix.mask.s")));
  e_t = tape.add(tape.mul_colvec(e_t, keep_t), tape.matmul(ind_t, params.node("mix.mask.t")));
  e_p = tape.add(tape.mul_colvec(e_p, keep_s), tape.matmul(ind_s, params.node("mix.mask.p")));
  e_r = tape.add(tape.mul_colvec(e_r, keep_s), tape.matmul(ind_s, params.node("mix.mask.r")));

  const int mod_type = params.node("mix.mod_type");
  int mods[4] = {
      tape.add_rowvec(e_s, tape.rows_gather(mod_type, {0})),
      tape.add_rowvec(e_t, tape.rows_gather(mod_type, {1})),
      tape.add_rowvec(e_p, tape.rows_gather(mod_type, {2})),
      tape.add_rowvec(e_r, tape.rows_gather(mod_type, {3})),
  };
  for (int ml = 0; ml < cfg.mix_layers; ++ml) {
    detail::mix_modalities(tape, params, cfg, "mix" + std::to_string(ml), mods);
  }
  const int e0 =
      tape.scale(tape.add(tape.add(mods[0], mods[1]), tape.add(mods[2], mods[3])), T(0.25));

  ad::Mat<T> key_mask = ad::Mat<T>::Zero(n, n);
  for (int j = 0; j < n; ++j) {
    if (in.valid[j] == 0.0) key_mask.col(j).setConstant(T(kPadLogit));
  }
  const int valid = ccol(in.valid);

  if (trace != nullptr) {
    trace->selected.assign(cfg.n_layers, {});
  }
  const bool want_aux = cfg.aux_loss_weight > 0.0;
  int aux_sum = -1;
  int cur = e0;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l);
    const int attn = trie_attention(tape, params, cfg, p + ".trie", cur, offsets, key_mask, valid);
    const int h1 = detail::ln_affine(tape, params, p + ".ln1", tape.add(cur, attn));
    const int u = tape.add(h1, e0);
    MoeResult moe = moe_block(tape, params, cfg, p + ".moe", u, train, rng,
                              trace != nullptr ? &trace->selected[l] : nullptr, want_aux);
    cur = detail::ln_affine(tape, params, p + ".ln2", tape.add(h1, moe.output));
    if (want_aux) {
      aux_sum = aux_sum < 0 ? moe.aux_loss : tape.add(aux_sum, moe.aux_loss);
    }
  }

  ForwardResult<T> res;
  res.embed = e0;
  res.final = cur;
  res.xy = tape.add_rowvec(tape.matmul(cur, params.node("pred.xy.w")), params.node("pred.xy.b"));
  res.t4 = tape.softplus(
      tape.add_rowvec(tape.matmul(cur, params.node("pred.t.w")), params.node("pred.t.b")));
  if (aux_sum >= 0) {
    res.aux = tape.scale(aux_sum, T(1.0 / cfg.n_layers));
  }
  return res;
}

// Masked reconstruction objective: squared spatial error at spatially hidden
// rows plus the Euclidean norm of the temporal error at temporally hidden
// rows, averaged over all hidden positions. The epsilon inside the square
// root keeps the norm differentiable at zero.
template <typename T>
int reconstruction_loss(ad::Tape<T>& tape, const ForwardResult<T>& fwd, const ModelInputs& in,
                        const ModelConfig& cfg) {
  if (in.n_contrib <= 0) throw MissingTarget("instance has no masked positions");
  ad::Mat<T> s_target = in.spatial_target.template cast<T>();
  ad::Mat<T> t_target = in.temporal_target.template cast<T>();
  ad::Mat<T> contrib_s = in.contrib_spatial.template cast<T>();
  ad::Mat<T> contrib_t = in.contrib_temporal.template cast<T>();

  const int s_diff = tape.add_const(fwd.xy, (-s_target).eval());
  const int s_row = tape.matmul(tape.square(s_diff), tape.constant(ad::Mat<T>::Ones(2, 1)));
  const int s_sum = tape.sum_all(tape.mul_const(s_row, std::move(contrib_s)));

  const int t_diff = tape.add_const(fwd.t4, (-t_target).eval());
  const int t_row = tape.matmul(tape.square(t_diff), tape.constant(ad::Mat<T>::Ones(4, 1)));
  const int t_norm = tape.sqrt_eps(t_row, T(kTemporalLossEps));
  const int t_sum = tape.sum_all(tape.mul_const(t_norm, std::move(contrib_t)));

  int loss = tape.scale(tape.add(s_sum, t_sum), T(1.0 / in.n_contrib));
  if (fwd.aux >= 0 && cfg.aux_loss_weight > 0.0) {
    loss = tape.add(loss, tape.scale(fwd.aux, T(cfg.aux_loss_weight)));
  }
  return loss;
}

// Deterministic inference for one instance: returns a prediction per real
// point, with coordinates rebuilt from the instance's spatial anchor.
template <typename T>
std::vector<PointPrediction> predict(const ParamStore<T>& store, const ModelConfig& cfg,
                                     const TaskInstance& inst, const RegionContext& ctx,
                                     GateTrace* trace = nullptr) {
  const ModelInputs in = prepare_inputs(inst, ctx, cfg);
  ad::Tape<T> tape;
  BoundParams<T> params(tape, store);
  const ForwardResult<T> fwd = forward_pass(tape, params, cfg, in, false, nullptr, trace);
  const ad::Mat<T>& xy = tape.val(fwd.xy);
  const ad::Mat<T>& t4 = tape.val(fwd.t4);
  std::vector<PointPrediction> out(in.n_real);
  for (int i = 0; i < in.n_real; ++i) {
    PointPrediction& p = out[i];
    p.x = static_cast<double>(xy(i, 0));
    p.y = static_cast<double>(xy(i, 1));
    p.lng = in.anchor_lng + p.x;
    p.lat = in.anchor_lat + p.y;
    for (int j = 0; j < 4; ++j) p.t4[j] = static_cast<double>(t4(i, j));
  }
  return out;
}

}  // namespace transfertraj
