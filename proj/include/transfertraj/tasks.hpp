#pragma once

#include <optional>
#include <vector>

#include "transfertraj/rng.hpp"
#include "transfertraj/types.hpp"

namespace transfertraj {

// 1-based inclusive span of fully hidden points inside a pretraining instance.
struct MaskSpan {
  int s = 0;
  int e = 0;
};

// Draws two distinct indices from U(1, n) and orders them.
MaskSpan sample_mask_span(int n, Rng& rng);

// Pretraining instance: a contiguous span is fully hidden, every other point
// hides exactly one of its two modalities with equal probability. Redrawn
// until at least one spatially visible point remains to anchor predictions.
TaskInstance pretrain_mask(const Trajectory& traj, Rng& rng);

// Travel-point prediction: the final `horizon` points are fully hidden.
TaskInstance make_tp_input(const Trajectory& traj, int horizon = 5);

// Trajectory recovery: keep 0-based indices 0, ratio, 2*ratio, ... plus the
// final point; hide everything between.
TaskInstance make_tr_input(const Trajectory& dense_traj, int ratio);

// Travel-time estimation: a 2-point instance with the departure fully visible
// and the arrival's temporal modality hidden.
TaskInstance make_tte_input(const Trajectory& traj);

// Minutes-since-departure component of a TTE arrival prediction.
double extract_travel_time(const PointPrediction& pred);

// Ground-truth travel time of the instance's source trajectory, in minutes.
double true_travel_time_min(const TaskInstance& inst);

// Per-point linear interpolation baseline: hidden positions are interpolated
// in index space between the nearest visible points (clamped at the ends).
// Visible positions pass through unchanged.
std::vector<GeoPoint> linear_interp_baseline(const TaskInstance& inst);

struct MetricSet {
  double rmse = 0.0;
  double mae = 0.0;
  std::optional<double> mape;
  int n = 0;
};

// Aggregates over per-sample scalar errors.
MetricSet metrics_from_errors(const std::vector<double>& errors);

// Scalar predictions against positive targets; MAPE included.
MetricSet metrics_scalar(const std::vector<double>& preds, const std::vector<double>& targets);

// Haversine errors in meters between prediction/target point pairs.
MetricSet metrics_spatial(const std::vector<GeoPoint>& preds,
                          const std::vector<GeoPoint>& targets);

// Haversine error in meters at every spatially hidden position.
std::vector<double> spatial_errors_m(const TaskInstance& inst,
                                     const std::vector<PointPrediction>& preds);

}  // namespace transfertraj
