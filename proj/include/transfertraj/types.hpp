#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace transfertraj {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

#define TT_DEFINE_ERROR(NAME)                 \
  struct NAME : Error {                       \
    using Error::Error;                       \
  }

TT_DEFINE_ERROR(EmptyTrajectory);
TT_DEFINE_ERROR(NonMonotonicTime);
TT_DEFINE_ERROR(OutOfRangeCoordinate);
TT_DEFINE_ERROR(NegativeDelta);
TT_DEFINE_ERROR(DimMismatch);
TT_DEFINE_ERROR(InvalidConfig);
TT_DEFINE_ERROR(TooShort);
TT_DEFINE_ERROR(MissingTarget);
TT_DEFINE_ERROR(ZeroTarget);
TT_DEFINE_ERROR(ParseError);
TT_DEFINE_ERROR(IoError);
TT_DEFINE_ERROR(InvalidSpec);
TT_DEFINE_ERROR(OutOfRange);
TT_DEFINE_ERROR(DataEmpty);
TT_DEFINE_ERROR(DivergedLoss);
TT_DEFINE_ERROR(IncompatibleCheckpoint);
TT_DEFINE_ERROR(ProviderUnavailable);

#undef TT_DEFINE_ERROR

// ---------------------------------------------------------------------------
// Geographic primitives
// ---------------------------------------------------------------------------

inline constexpr double kEarthRadiusM = 6371000.0;

struct GeoPoint {
  double lng = 0.0;
  double lat = 0.0;
};

struct TrajectoryPoint {
  double lng = 0.0;
  double lat = 0.0;
  std::int64_t t = 0;  // unix seconds, UTC
};

struct Trajectory {
  std::string id;
  std::vector<TrajectoryPoint> points;
};

struct Poi {
  double lng = 0.0;
  double lat = 0.0;
  std::string desc;
};

struct RoadSegment {
  double lng = 0.0;  // segment midpoint
  double lat = 0.0;
  std::string desc;
};

// Throws EmptyTrajectory / NonMonotonicTime / OutOfRangeCoordinate.
void validate_trajectory(const Trajectory& traj);

// ---------------------------------------------------------------------------
// Masking
// ---------------------------------------------------------------------------

enum class MaskKind : std::uint8_t { None = 0, Spatial = 1, Temporal = 2, Full = 3 };

inline bool masks_spatial(MaskKind k) { return k == MaskKind::Spatial || k == MaskKind::Full; }
inline bool masks_temporal(MaskKind k) { return k == MaskKind::Temporal || k == MaskKind::Full; }

// ---------------------------------------------------------------------------
// Model configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
  int d = 128;             // embedding width
  int n_layers = 2;        // stacked rotary-attention + MoE layers
  int n_heads = 4;
  int n_experts = 8;
  int top_k = 4;
  int d_ff = 0;            // expert hidden width; 0 means 4*d
  int fourier_feats = 32;  // random Fourier features for temporal encoding
  int d_text = 64;         // text embedding width
  double theta_base = 10000.0;
  double poi_radius_m = 100.0;
  double road_radius_m = 100.0;
  int max_len = 128;       // maximum training sequence length
  int mix_layers = 1;      // modality-mixing transformer depth
  double aux_loss_weight = 0.0;  // load-balancing term, off by default

  int head_dim() const { return d / n_heads; }
  int expert_hidden() const { return d_ff > 0 ? d_ff : 4 * d; }

  // Throws InvalidConfig if any structural invariant is violated.
  void validate() const;
};

// ---------------------------------------------------------------------------
// Task instances
// ---------------------------------------------------------------------------

enum class TaskKind : std::uint8_t { Pretrain = 0, Tp = 1, Tr = 2, Tte = 3 };

// A masked model input plus recovery targets. Masked fields of `points` hold
// zero placeholders; the forward pass must never read them. `source` keeps the
// ground-truth points for evaluation-side bookkeeping (density labels,
// baselines) and is not a model input.
struct TaskInstance {
  TaskKind kind = TaskKind::Pretrain;
  std::vector<TrajectoryPoint> points;
  std::vector<MaskKind> mask;
  Eigen::MatrixXd spatial_target;   // n x 2 degree offsets; rows live where masks_spatial
  Eigen::MatrixXd temporal_target;  // n x 4 (dow, hour, minute, dmin); rows live where masks_temporal
  std::vector<TrajectoryPoint> source;
  int rho = 0;  // decimation factor for recovery instances

  int size() const { return static_cast<int>(points.size()); }
};

// Index of the first point whose spatial modality is visible, or -1.
int spatial_anchor_index(const std::vector<MaskKind>& mask);
// Index of the first point whose temporal modality is visible, or -1.
int temporal_anchor_index(const std::vector<MaskKind>& mask);

// Structural checks: parallel lengths, targets exactly where masked modalities
// demand them, at least one spatial anchor. Throws DimMismatch / MissingTarget.
void validate_instance(const TaskInstance& inst);

// Per-point model output. (x, y) are degree offsets from the spatial anchor;
// lng/lat are the anchored absolute coordinates; t4 mirrors the temporal
// feature layout.
struct PointPrediction {
  double x = 0.0;
  double y = 0.0;
  double lng = 0.0;
  double lat = 0.0;
  Eigen::Vector4d t4 = Eigen::Vector4d::Zero();
};

}  // namespace transfertraj
