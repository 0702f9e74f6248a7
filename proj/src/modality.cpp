#include "transfertraj/modality.hpp"

namespace transfertraj {

namespace {

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

std::int64_t floor_mod(std::int64_t a, std::int64_t b) { return a - floor_div(a, b) * b; }

}  // namespace

Eigen::Vector4d temporal_features(std::int64_t t, std::int64_t t_ref) {
  if (t < t_ref) throw NegativeDelta("timestamp precedes its reference time");
  const std::int64_t days = floor_div(t, 86400);
  const std::int64_t sec_of_day = floor_mod(t, 86400);
  // The unix epoch fell on a Thursday; Monday indexes 0.
  const double dow = static_cast<double>(floor_mod(days + 3, 7));
  const double hour = static_cast<double>(sec_of_day / 3600);
  const double minute = static_cast<double>((sec_of_day % 3600) / 60);
  const double dmin = static_cast<double>(t - t_ref) / 60.0;
  return {dow, hour, minute, dmin};
}

ModelInputs prepare_inputs(const TaskInstance& inst, const RegionContext& ctx,
                           const ModelConfig& cfg, int pad_to) {
  validate_instance(inst);
  if (ctx.provider && ctx.provider->dim() != cfg.d_text) {
    throw DimMismatch("embedding provider dim does not match the configured d_text");
  }
  const int n_real = inst.size();
  const int n = pad_to > 0 ? pad_to : n_real;
  if (n < n_real) throw DimMismatch("pad_to is smaller than the instance length");

  ModelInputs in;
  in.n_total = n;
  in.n_real = n_real;
  in.offsets = Eigen::MatrixXd::Zero(n, 2);
  in.tfeats = Eigen::MatrixXd::Zero(n, 4);
  in.poi_pooled = Eigen::MatrixXd::Zero(n, cfg.d_text);
  in.road_pooled = Eigen::MatrixXd::Zero(n, cfg.d_text);
  in.poi_null = Eigen::VectorXd::Zero(n);
  in.road_null = Eigen::VectorXd::Zero(n);
  in.spatial_masked = Eigen::VectorXd::Zero(n);
  in.temporal_masked = Eigen::VectorXd::Zero(n);
  in.valid = Eigen::VectorXd::Zero(n);
  in.spatial_target = Eigen::MatrixXd::Zero(n, 2);
  in.temporal_target = Eigen::MatrixXd::Zero(n, 4);
  in.contrib_spatial = Eigen::VectorXd::Zero(n);
  in.contrib_temporal = Eigen::VectorXd::Zero(n);

  const int anchor = spatial_anchor_index(inst.mask);
  in.anchor_lng = inst.points[anchor].lng;
  in.anchor_lat = inst.points[anchor].lat;
  const int t_anchor = temporal_anchor_index(inst.mask);
  in.t_ref = t_anchor >= 0 ? inst.points[t_anchor].t : 0;

  for (int i = 0; i < n_real; ++i) {
    const MaskKind m = inst.mask[i];
    in.valid[i] = 1.0;
    if (m != MaskKind::None) {
      ++in.n_contrib;
      if (masks_spatial(m)) {
        in.contrib_spatial[i] = 1.0;
        in.spatial_target.row(i) = inst.spatial_target.row(i);
      }
      if (masks_temporal(m)) {
        in.contrib_temporal[i] = 1.0;
        in.temporal_target.row(i) = inst.temporal_target.row(i);
      }
    }
    if (masks_spatial(m)) {
      in.spatial_masked[i] = 1.0;
    } else {
      const auto& p = inst.points[i];
      in.offsets(i, 0) = p.lng - in.anchor_lng;
      in.offsets(i, 1) = p.lat - in.anchor_lat;
      if (auto pooled = pooled_poi_context(ctx, {p.lng, p.lat}, cfg.poi_radius_m)) {
        in.poi_pooled.row(i) = pooled->transpose();
      } else {
        in.poi_null[i] = 1.0;
      }
      if (auto pooled = pooled_road_context(ctx, {p.lng, p.lat}, cfg.road_radius_m)) {
        in.road_pooled.row(i) = pooled->transpose();
      } else {
        in.road_null[i] = 1.0;
      }
    }
    if (masks_temporal(m)) {
      in.temporal_masked[i] = 1.0;
    } else {
      in.tfeats.row(i) = temporal_features(inst.points[i].t, in.t_ref).transpose();
    }
  }
  // Padding rows look fully masked so downstream indicator algebra stays
  // uniform, but they are excluded from loss by `valid`.
  for (int i = n_real; i < n; ++i) {
    in.spatial_masked[i] = 1.0;
    in.temporal_masked[i] = 1.0;
  }
  return in;
}

}  // namespace transfertraj
