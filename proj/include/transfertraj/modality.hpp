#pragma once

#include <Eigen/Core>
#include <cstdint>

#include "transfertraj/geo.hpp"
#include "transfertraj/types.hpp"

namespace transfertraj {

// Calendar features of a UTC timestamp relative to a reference time:
// [day-of-week (Monday = 0), hour 0..23, minute 0..59, minutes since t_ref].
// Throws NegativeDelta if t < t_ref.
Eigen::Vector4d temporal_features(std::int64_t t, std::int64_t t_ref);

// Numeric model inputs distilled from a task instance: everything the forward
// pass consumes, with masked modalities already zeroed so the graph cannot see
// them. Rows past n_real are padding.
struct ModelInputs {
  int n_total = 0;
  int n_real = 0;
  Eigen::MatrixXd offsets;          // n x 2 degree offsets from the spatial anchor
  Eigen::MatrixXd tfeats;           // n x 4 temporal features
  Eigen::MatrixXd poi_pooled;       // n x d_text mean neighbor embedding (zero rows where absent)
  Eigen::MatrixXd road_pooled;      // n x d_text
  Eigen::VectorXd poi_null;         // 1 where spatial is visible but no POI is in range
  Eigen::VectorXd road_null;
  Eigen::VectorXd spatial_masked;   // 1 where the spatial modality is hidden
  Eigen::VectorXd temporal_masked;
  Eigen::VectorXd valid;            // 0 on padding rows
  Eigen::MatrixXd spatial_target;   // n x 2
  Eigen::MatrixXd temporal_target;  // n x 4
  Eigen::VectorXd contrib_spatial;  // valid and spatially masked: spatial loss rows
  Eigen::VectorXd contrib_temporal;
  int n_contrib = 0;                // valid positions with any mask
  double anchor_lng = 0.0;
  double anchor_lat = 0.0;
  std::int64_t t_ref = 0;
};

// Builds ModelInputs from an instance: anchors, offsets, temporal features,
// pooled neighbor context for spatially visible points, mask indicators and
// aligned targets. pad_to = 0 keeps the instance length.
ModelInputs prepare_inputs(const TaskInstance& inst, const RegionContext& ctx,
                           const ModelConfig& cfg, int pad_to = 0);

}  // namespace transfertraj
