#include "transfertraj/tasks.hpp"

#include <algorithm>
#include <cmath>

#include "transfertraj/geo.hpp"
#include "transfertraj/modality.hpp"

namespace transfertraj {

namespace {

// Offsets from the spatial anchor and calendar features from the true first
// timestamp, for every row; the loss only reads the hidden ones.
void fill_targets(TaskInstance& inst, const Trajectory& traj) {
  const int n = static_cast<int>(traj.points.size());
  const int anchor = spatial_anchor_index(inst.mask);
  if (anchor < 0) throw MissingTarget("no spatially visible point to anchor targets");
  inst.spatial_target.resize(n, 2);
  inst.temporal_target.resize(n, 4);
  for (int i = 0; i < n; ++i) {
    inst.spatial_target(i, 0) = traj.points[i].lng - traj.points[anchor].lng;
    inst.spatial_target(i, 1) = traj.points[i].lat - traj.points[anchor].lat;
    inst.temporal_target.row(i) =
        temporal_features(traj.points[i].t, traj.points.front().t).transpose();
  }
}

// Hidden fields are zeroed in the instance so nothing downstream can read
// them by accident; the source trajectory keeps the ground truth.
void blank_hidden_fields(TaskInstance& inst) {
  for (size_t i = 0; i < inst.points.size(); ++i) {
    if (masks_spatial(inst.mask[i])) {
      inst.points[i].lng = 0.0;
      inst.points[i].lat = 0.0;
    }
    if (masks_temporal(inst.mask[i])) inst.points[i].t = 0;
  }
}

}  // namespace

MaskSpan sample_mask_span(int n, Rng& rng) {
  if (n < 2) throw TooShort("need at least 2 points to hide a span");
  int a = 0;
  int b = 0;
  do {
    a = rng.uniform_int(1, n);
    b = rng.uniform_int(1, n);
  } while (a == b);
  return MaskSpan{std::min(a, b), std::max(a, b)};
}

TaskInstance pretrain_mask(const Trajectory& traj, Rng& rng) {
  validate_trajectory(traj);
  const int n = static_cast<int>(traj.points.size());
  if (n < 3) throw TooShort("pretraining needs at least 3 points");

  TaskInstance inst;
  inst.kind = TaskKind::Pretrain;
  inst.source = traj.points;
  while (true) {
    const MaskSpan span = sample_mask_span(n, rng);
    inst.mask.assign(n, MaskKind::None);
    for (int i = span.s - 1; i <= span.e - 1; ++i) inst.mask[i] = MaskKind::Full;
    for (int i = 0; i < n; ++i) {
      if (inst.mask[i] == MaskKind::Full) continue;
      inst.mask[i] = rng.bernoulli(0.5) ? MaskKind::Spatial : MaskKind::Temporal;
    }
    if (spatial_anchor_index(inst.mask) >= 0) break;
  }
  inst.points = traj.points;
  fill_targets(inst, traj);
  blank_hidden_fields(inst);
  validate_instance(inst);
  return inst;
}

TaskInstance make_tp_input(const Trajectory& traj, int horizon) {
  validate_trajectory(traj);
  if (horizon < 1) throw InvalidConfig("prediction horizon must be positive");
  const int n = static_cast<int>(traj.points.size());
  if (n < horizon + 1) throw TooShort("need at least one observed point before the horizon");

  TaskInstance inst;
  inst.kind = TaskKind::Tp;
  inst.source = traj.points;
  inst.points = traj.points;
  inst.mask.assign(n, MaskKind::None);
  for (int i = n - horizon; i < n; ++i) inst.mask[i] = MaskKind::Full;
  fill_targets(inst, traj);
  blank_hidden_fields(inst);
  validate_instance(inst);
  return inst;
}

TaskInstance make_tr_input(const Trajectory& dense_traj, int ratio) {
  validate_trajectory(dense_traj);
  if (ratio < 2) throw InvalidConfig("recovery ratio must be at least 2");
  const int n = static_cast<int>(dense_traj.points.size());
  if (n < ratio) throw TooShort("trajectory shorter than one sampling gap");

  TaskInstance inst;
  inst.kind = TaskKind::Tr;
  inst.rho = ratio;
  inst.source = dense_traj.points;
  inst.points = dense_traj.points;
  inst.mask.assign(n, MaskKind::Full);
  for (int i = 0; i < n; i += ratio) inst.mask[i] = MaskKind::None;
  inst.mask[n - 1] = MaskKind::None;
  fill_targets(inst, dense_traj);
  blank_hidden_fields(inst);
  validate_instance(inst);
  return inst;
}

TaskInstance make_tte_input(const Trajectory& traj) {
  validate_trajectory(traj);
  const int n = static_cast<int>(traj.points.size());
  if (n < 2) throw TooShort("travel time needs a departure and an arrival");

  TaskInstance inst;
  inst.kind = TaskKind::Tte;
  inst.source = traj.points;
  inst.points = {traj.points.front(), traj.points.back()};
  inst.mask = {MaskKind::None, MaskKind::Temporal};
  inst.spatial_target.resize(2, 2);
  inst.temporal_target.resize(2, 4);
  for (int i = 0; i < 2; ++i) {
    inst.spatial_target(i, 0) = inst.points[i].lng - traj.points.front().lng;
    inst.spatial_target(i, 1) = inst.points[i].lat - traj.points.front().lat;
    inst.temporal_target.row(i) =
        temporal_features(inst.points[i].t, traj.points.front().t).transpose();
  }
  blank_hidden_fields(inst);
  validate_instance(inst);
  return inst;
}

double extract_travel_time(const PointPrediction& pred) { return pred.t4[3]; }

double true_travel_time_min(const TaskInstance& inst) {
  if (inst.source.size() < 2) throw MissingTarget("instance has no source trajectory");
  return static_cast<double>(inst.source.back().t - inst.source.front().t) / 60.0;
}

std::vector<GeoPoint> linear_interp_baseline(const TaskInstance& inst) {
  const int n = inst.size();
  validate_instance(inst);
  std::vector<GeoPoint> out(n);
  for (int i = 0; i < n; ++i) {
    if (!masks_spatial(inst.mask[i])) {
      out[i] = {inst.points[i].lng, inst.points[i].lat};
      continue;
    }
    int left = -1;
    for (int j = i - 1; j >= 0; --j) {
      if (!masks_spatial(inst.mask[j])) {
        left = j;
        break;
      }
    }
    int right = -1;
    for (int j = i + 1; j < n; ++j) {
      if (!masks_spatial(inst.mask[j])) {
        right = j;
        break;
      }
    }
    if (left >= 0 && right >= 0) {
      const double f = static_cast<double>(i - left) / static_cast<double>(right - left);
      out[i] = {inst.points[left].lng + f * (inst.points[right].lng - inst.points[left].lng),
                inst.points[left].lat + f * (inst.points[right].lat - inst.points[left].lat)};
    } else {
      const int nearest = left >= 0 ? left : right;
      out[i] = {inst.points[nearest].lng, inst.points[nearest].lat};
    }
  }
  return out;
}

MetricSet metrics_from_errors(const std::vector<double>& errors) {
  if (errors.empty()) throw DataEmpty("no errors to aggregate");
  MetricSet m;
  m.n = static_cast<int>(errors.size());
  double sq = 0.0;
  double abs_sum = 0.0;
  for (const double e : errors) {
    sq += e * e;
    abs_sum += std::abs(e);
  }
  m.rmse = std::sqrt(sq / m.n);
  m.mae = abs_sum / m.n;
  return m;
}

MetricSet metrics_scalar(const std::vector<double>& preds, const std::vector<double>& targets) {
  if (preds.size() != targets.size()) throw DimMismatch("prediction/target length mismatch");
  std::vector<double> errors(preds.size());
  double pct = 0.0;
  for (size_t i = 0; i < preds.size(); ++i) {
    errors[i] = preds[i] - targets[i];
    if (targets[i] <= 0.0) throw ZeroTarget("percentage error undefined for nonpositive target");
    pct += std::abs(errors[i]) / targets[i];
  }
  MetricSet m = metrics_from_errors(errors);
  m.mape = 100.0 * pct / static_cast<double>(preds.size());
  return m;
}

MetricSet metrics_spatial(const std::vector<GeoPoint>& preds,
                          const std::vector<GeoPoint>& targets) {
  if (preds.size() != targets.size()) throw DimMismatch("prediction/target length mismatch");
  std::vector<double> errors(preds.size());
  for (size_t i = 0; i < preds.size(); ++i) errors[i] = haversine_m(preds[i], targets[i]);
  return metrics_from_errors(errors);
}

std::vector<double> spatial_errors_m(const TaskInstance& inst,
                                     const std::vector<PointPrediction>& preds) {
  const int n = inst.size();
  if (static_cast<int>(preds.size()) != n) throw DimMismatch("one prediction per point expected");
  if (static_cast<int>(inst.source.size()) != n && inst.kind != TaskKind::Tte) {
    throw MissingTarget("instance carries no aligned source trajectory");
  }
  std::vector<double> errors;
  for (int i = 0; i < n; ++i) {
    if (!masks_spatial(inst.mask[i])) continue;
    const GeoPoint truth{inst.source[i].lng, inst.source[i].lat};
    errors.push_back(haversine_m({preds[i].lng, preds[i].lat}, truth));
  }
  return errors;
}

}  // namespace transfertraj
