#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "transfertraj/geo.hpp"
#include "transfertraj/model.hpp"
#include "transfertraj/pipeline.hpp"
#include "transfertraj/tasks.hpp"

namespace transfertraj {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class TransferMode { InRegion, ZeroShot, FewShot };

// One experiment: model shape plus everything the training and evaluation
// loops need. Loadable from a flat key=value file with per-flag overrides.
struct ExperimentConfig {
  ModelConfig model;
  TaskKind task = TaskKind::Pretrain;
  TransferMode transfer = TransferMode::InRegion;
  int few_shot_n = 0;   // training trajectories kept in few-shot mode
  int epochs = 30;      // fine-tuning runs typically set 50
  int patience = 10;    // early-stop window, in epochs past the best
  double lr = 1e-3;
  int batch_size = 64;
  int max_steps = 0;    // optimizer step budget; 0 means unlimited
  int tp_horizon = 5;
  int tr_ratio = 4;
  std::uint64_t seed = 0;

  // File locations consumed by the CLI layer.
  std::string data_path;
  std::string poi_store;
  std::string road_store;
  std::string cache_path;
  std::string checkpoint_in;
  std::string checkpoint_out = "checkpoint.bin";
  std::string report_dir = ".";
  std::string data_format = "line-records";
};

// Reads a flat key=value file ('#' comments, blank lines allowed). Unknown
// keys and malformed values raise InvalidConfig. `keys_seen`, when non-null,
// collects every key the file set, so callers can tell defaults apart from
// explicit values.
ExperimentConfig load_config(const std::string& path,
                             std::vector<std::string>* keys_seen = nullptr);

// Applies one key=value override, same key set as the config file.
void apply_override(ExperimentConfig& cfg, const std::string& key, const std::string& value);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  ParamStore<double> params;
};

// Binary container: magic, format version, the model configuration, then the
// named parameter tensors as raw little-endian doubles. Round-trips bit-exact.
void save_checkpoint(const std::string& path, const ModelConfig& config,
                     const ParamStore<double>& params);
Checkpoint load_checkpoint(const std::string& path);

// Throws IncompatibleCheckpoint when the stored model shape cannot host the
// requested one (width, depth, heads, experts, text width, rotary base).
void require_compatible(const ModelConfig& stored, const ModelConfig& requested);

// SHA-256 over the names and raw bytes of every tensor, in store order. Equal
// hashes mean byte-identical parameters.
std::string params_sha256(const ParamStore<double>& params);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

// Everything needed to continue an interrupted run and reproduce it
// bit-identically: parameters, optimizer moments, progress, and the running
// best-validation snapshot. All per-epoch randomness is derived from
// (seed, epoch), so no live generator state needs to survive.
struct TrainState {
  ModelConfig config;
  ParamStore<double> params;
  std::vector<Eigen::MatrixXd> adam_m;
  std::vector<Eigen::MatrixXd> adam_v;
  int adam_steps = 0;
  int epochs_done = 0;
  int best_epoch = -1;
  double best_val = 0.0;
  ParamStore<double> best_params;
};

void save_train_state(const std::string& path, const TrainState& state);
TrainState load_train_state(const std::string& path);

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainResult {
  ParamStore<double> final_params;
  ParamStore<double> best_params;
  int best_epoch = -1;
  double best_val = 0.0;
  std::vector<EpochLog> log;
  int steps = 0;
  int n_train_used = 0;
};

// Shared loop behind pretrain and finetune: per-epoch shuffle, task-specific
// instance construction, batches padded to the longest member, Adam updates,
// validation after each epoch, early stopping on patience.
//
// `init` seeds the parameters (nullptr: fresh initialization from cfg.seed).
// A non-null `state` with epochs_done > 0 resumes that run and ignores
// `init`; on return it always holds the final loop state. Throws DataEmpty
// when no usable training instance exists and DivergedLoss on a non-finite
// training loss.
TrainResult run_training(const ExperimentConfig& cfg, const RegionContext& ctx,
                         const DatasetSplit& data, const ParamStore<double>* init = nullptr,
                         TrainState* state = nullptr);

// run_training with a fresh model and the pretraining objective.
TrainResult pretrain(const ExperimentConfig& cfg, const RegionContext& ctx,
                     const DatasetSplit& data);

// run_training warm-started from a checkpoint; cfg.task picks the adapter.
// With cfg.epochs == 0 this is a no-op returning the checkpoint parameters
// verbatim (the zero-shot path).
TrainResult finetune(const ExperimentConfig& cfg, const RegionContext& ctx,
                     const DatasetSplit& data, const Checkpoint& ckpt);

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

// Expert activation frequencies by context density class. Rows are the
// classes (high, medium, low); each nonempty class row sums to 1.
struct GateStats {
  Eigen::MatrixXd freq;               // 3 x n_experts
  std::array<int, 3> n_points{0, 0, 0};
};

inline constexpr int kDensityHigh = 0;
inline constexpr int kDensityMedium = 1;
inline constexpr int kDensityLow = 2;

struct MetricRow {
  std::string task;
  std::string dataset;
  std::string metric;
  double value = 0.0;
  int n_samples = 0;
  std::uint64_t seed = 0;
};

struct EvalReport {
  std::vector<MetricRow> rows;
  GateStats gates;
  int n_instances = 0;
};

// Runs eval-mode inference over the test trajectories and computes the task's
// metrics (TP: destination and per-point meters; TR: per-point meters plus
// the index-space interpolation baseline; TTE: minutes, MAPE restricted to
// trips of at least one minute; pretraining: mean reconstruction loss under
// seeded masks). Deterministic: same inputs, byte-identical report.
EvalReport evaluate(const ExperimentConfig& cfg, const Checkpoint& ckpt, const RegionContext& ctx,
                    const std::vector<Trajectory>& test, const std::string& dataset_name);

// Tab-separated writers/readers for reports and gate statistics, doubles
// printed round-trip exact.
void write_report(const std::string& path, const std::vector<MetricRow>& rows);
std::vector<MetricRow> read_report(const std::string& path);
void write_gate_stats(const std::string& path, const GateStats& stats);
GateStats read_gate_stats(const std::string& path);

// Static SVG figures for the `report` subcommand.
void write_loss_svg(const std::string& path, const std::vector<EpochLog>& log);
void write_gate_svg(const std::string& path, const GateStats& stats);

// ---------------------------------------------------------------------------
// Assembly helpers
// ---------------------------------------------------------------------------

// RegionContext over a synthetic region with the deterministic offline text
// provider at the configured text width.
RegionContext context_from_region(const SynthRegion& region, const ModelConfig& cfg,
                                  std::shared_ptr<EmbeddingCache> cache = nullptr);

}  // namespace transfertraj
