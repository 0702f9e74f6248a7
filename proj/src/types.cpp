#include "transfertraj/types.hpp"

namespace transfertraj {

void validate_trajectory(const Trajectory& traj) {
  if (traj.points.empty()) throw EmptyTrajectory("trajectory " + traj.id + " has no points");
  std::int64_t prev = 0;
  bool first = true;
  for (std::size_t i = 0; i < traj.points.size(); ++i) {
    const auto& p = traj.points[i];
    if (p.lng < -180.0 || p.lng > 180.0 || p.lat < -90.0 || p.lat > 90.0) {
      throw OutOfRangeCoordinate("trajectory " + traj.id + " point " + std::to_string(i) +
                                 " has coordinates outside [-180,180]x[-90,90]");
    }
    if (!first && p.t <= prev) {
      throw NonMonotonicTime("trajectory " + traj.id + " point " + std::to_string(i) +
                             " timestamp does not strictly increase");
    }
    prev = p.t;
    first = false;
  }
}

void ModelConfig::validate() const {
  if (d <= 0 || n_layers <= 0 || n_heads <= 0) {
    throw InvalidConfig("d, n_layers and n_heads must be positive");
  }
  if (d % (2 * n_heads) != 0) {
    throw InvalidConfig("d must be divisible by 2*n_heads so each head has an even width");
  }
  if (n_experts <= 0 || top_k < 1 || top_k > n_experts) {
    throw InvalidConfig("need 1 <= top_k <= n_experts");
  }
  if (fourier_feats <= 0 || d_text <= 0 || mix_layers <= 0) {
    throw InvalidConfig("fourier_feats, d_text and mix_layers must be positive");
  }
  if (theta_base <= 1.0) throw InvalidConfig("theta_base must exceed 1");
  if (poi_radius_m <= 0.0 || road_radius_m <= 0.0) {
    throw InvalidConfig("context radii must be positive");
  }
  if (max_len < 2) throw InvalidConfig("max_len must be at least 2");
  if (d_ff < 0 || aux_loss_weight < 0.0) {
    throw InvalidConfig("d_ff and aux_loss_weight must be nonnegative");
  }
}

int spatial_anchor_index(const std::vector<MaskKind>& mask) {
  for (int i = 0; i < static_cast<int>(mask.size()); ++i) {
    if (!masks_spatial(mask[i])) return i;
  }
  return -1;
}

int temporal_anchor_index(const std::vector<MaskKind>& mask) {
  for (int i = 0; i < static_cast<int>(mask.size()); ++i) {
    if (!masks_temporal(mask[i])) return i;
  }
  return -1;
}

void validate_instance(const TaskInstance& inst) {
  const int n = inst.size();
  if (n == 0) throw EmptyTrajectory("task instance has no points");
  if (static_cast<int>(inst.mask.size()) != n) {
    throw DimMismatch("instance mask length does not match point count");
  }
  if (inst.spatial_target.rows() != n || inst.spatial_target.cols() != 2) {
    throw DimMismatch("spatial target must be n x 2");
  }
  if (inst.temporal_target.rows() != n || inst.temporal_target.cols() != 4) {
    throw DimMismatch("temporal target must be n x 4");
  }
  if (spatial_anchor_index(inst.mask) < 0) {
    throw MissingTarget("instance has no spatially visible point to anchor predictions");
  }
}

}  // namespace transfertraj
