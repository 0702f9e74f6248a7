#include "transfertraj/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace transfertraj {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

namespace {

[[noreturn]] void bad_value(const std::string& key, const std::string& value) {
  throw InvalidConfig("bad value for " + key + ": \"" + value + "\"");
}

int to_int(const std::string& key, const std::string& value) {
  int v = 0;
  const auto res = std::from_chars(value.data(), value.data() + value.size(), v);
  if (res.ec != std::errc{} || res.ptr != value.data() + value.size()) bad_value(key, value);
  return v;
}

std::uint64_t to_u64(const std::string& key, const std::string& value) {
  std::uint64_t v = 0;
  const auto res = std::from_chars(value.data(), value.data() + value.size(), v);
  if (res.ec != std::errc{} || res.ptr != value.data() + value.size()) bad_value(key, value);
  return v;
}

double to_double(const std::string& key, const std::string& value) {
  double v = 0.0;
  const auto res = std::from_chars(value.data(), value.data() + value.size(), v);
  if (res.ec != std::errc{} || res.ptr != value.data() + value.size()) bad_value(key, value);
  return v;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  size_t b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

const char* task_name(TaskKind k) {
  switch (k) {
    case TaskKind::Pretrain: return "pretrain";
    case TaskKind::Tp: return "tp";
    case TaskKind::Tr: return "tr";
    case TaskKind::Tte: return "tte";
  }
  return "?";
}

}  // namespace

void apply_override(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  ModelConfig& m = cfg.model;
  if (key == "d") m.d = to_int(key, value);
  else if (key == "n_layers") m.n_layers = to_int(key, value);
  else if (key == "n_heads") m.n_heads = to_int(key, value);
  else if (key == "n_experts") m.n_experts = to_int(key, value);
  else if (key == "top_k") m.top_k = to_int(key, value);
  else if (key == "d_ff") m.d_ff = to_int(key, value);
  else if (key == "fourier_feats") m.fourier_feats = to_int(key, value);
  else if (key == "d_text") m.d_text = to_int(key, value);
  else if (key == "theta_base") m.theta_base = to_double(key, value);
  else if (key == "poi_radius_m") m.poi_radius_m = to_double(key, value);
  else if (key == "road_radius_m") m.road_radius_m = to_double(key, value);
  else if (key == "max_len") m.max_len = to_int(key, value);
  else if (key == "mix_layers") m.mix_layers = to_int(key, value);
  else if (key == "aux_loss_weight") m.aux_loss_weight = to_double(key, value);
  else if (key == "task") {
    if (value == "pretrain") cfg.task = TaskKind::Pretrain;
    else if (value == "tp") cfg.task = TaskKind::Tp;
    else if (value == "tr") cfg.task = TaskKind::Tr;
    else if (value == "tte") cfg.task = TaskKind::Tte;
    else bad_value(key, value);
  } else if (key == "transfer") {
    if (value == "in-region") cfg.transfer = TransferMode::InRegion;
    else if (value == "zero-shot") cfg.transfer = TransferMode::ZeroShot;
    else if (value == "few-shot") cfg.transfer = TransferMode::FewShot;
    else bad_value(key, value);
  } else if (key == "few_shot_n") cfg.few_shot_n = to_int(key, value);
  else if (key == "epochs") cfg.epochs = to_int(key, value);
  else if (key == "patience") cfg.patience = to_int(key, value);
  else if (key == "lr") cfg.lr = to_double(key, value);
  else if (key == "batch_size") cfg.batch_size = to_int(key, value);
  else if (key == "max_steps") cfg.max_steps = to_int(key, value);
  else if (key == "tp_horizon") cfg.tp_horizon = to_int(key, value);
  else if (key == "tr_ratio") cfg.tr_ratio = to_int(key, value);
  else if (key == "seed") cfg.seed = to_u64(key, value);
  else if (key == "data_path") cfg.data_path = value;
  else if (key == "poi_store") cfg.poi_store = value;
  else if (key == "road_store") cfg.road_store = value;
  else if (key == "cache_path") cfg.cache_path = value;
  else if (key == "checkpoint_in") cfg.checkpoint_in = value;
  else if (key == "checkpoint_out") cfg.checkpoint_out = value;
  else if (key == "report_dir") cfg.report_dir = value;
  else if (key == "data_format") {
    if (value != "point-rows" && value != "line-records") bad_value(key, value);
    cfg.data_format = value;
  } else {
    throw InvalidConfig("unknown config key: " + key);
  }
}

ExperimentConfig load_config(const std::string& path, std::vector<std::string>* keys_seen) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  ExperimentConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string stripped = trim(line);
    if (stripped.empty()) continue;
    const size_t eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw InvalidConfig("config line " + std::to_string(lineno) + ": expected key=value");
    }
    const std::string key = trim(stripped.substr(0, eq));
    apply_override(cfg, key, trim(stripped.substr(eq + 1)));
    if (keys_seen != nullptr) keys_seen->push_back(key);
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// Binary IO
// ---------------------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[8] = {'T', 'T', 'C', 'K', 'P', 'T', '0', '0'};
constexpr char kStateMagic[8] = {'T', 'T', 'S', 'T', 'A', 'T', '0', '0'};

void put_bytes(std::ostream& out, const void* data, size_t n) {
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

void get_bytes(std::istream& in, void* data, size_t n) {
  in.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(in.gcount()) != n) throw ParseError("truncated binary file");
}

void put_u32(std::ostream& out, std::uint32_t v) { put_bytes(out, &v, 4); }
void put_i32(std::ostream& out, std::int32_t v) { put_bytes(out, &v, 4); }
void put_f64(std::ostream& out, double v) { put_bytes(out, &v, 8); }

std::uint32_t get_u32(std::istream& in) {
  std::uint32_t v = 0;
  get_bytes(in, &v, 4);
  return v;
}

std::int32_t get_i32(std::istream& in) {
  std::int32_t v = 0;
  get_bytes(in, &v, 4);
  return v;
}

double get_f64(std::istream& in) {
  double v = 0.0;
  get_bytes(in, &v, 8);
  return v;
}

void put_str(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  put_bytes(out, s.data(), s.size());
}

std::string get_str(std::istream& in) {
  const std::uint32_t n = get_u32(in);
  if (n > (1u << 20)) throw ParseError("implausible string length");
  std::string s(n, '\0');
  get_bytes(in, s.data(), n);
  return s;
}

void put_mat(std::ostream& out, const Eigen::MatrixXd& m) {
  put_u32(out, static_cast<std::uint32_t>(m.rows()));
  put_u32(out, static_cast<std::uint32_t>(m.cols()));
  put_bytes(out, m.data(), sizeof(double) * static_cast<size_t>(m.size()));
}

Eigen::MatrixXd get_mat(std::istream& in) {
  const std::uint32_t rows = get_u32(in);
  const std::uint32_t cols = get_u32(in);
  if (static_cast<std::uint64_t>(rows) * cols > (1u << 28)) {
    throw ParseError("implausible tensor shape");
  }
  Eigen::MatrixXd m(rows, cols);
  get_bytes(in, m.data(), sizeof(double) * static_cast<size_t>(m.size()));
  return m;
}

void put_store(std::ostream& out, const ParamStore<double>& store) {
  put_u32(out, static_cast<std::uint32_t>(store.count()));
  for (int i = 0; i < store.count(); ++i) {
    put_str(out, store.name(i));
    put_mat(out, store.value(i));
  }
}

ParamStore<double> get_store(std::istream& in) {
  ParamStore<double> store;
  const std::uint32_t n = get_u32(in);
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::string name = get_str(in);
    store.add(name, get_mat(in));
  }
  return store;
}

void put_mats(std::ostream& out, const std::vector<Eigen::MatrixXd>& mats) {
  put_u32(out, static_cast<std::uint32_t>(mats.size()));
  for (const auto& m : mats) put_mat(out, m);
}

std::vector<Eigen::MatrixXd> get_mats(std::istream& in) {
  std::vector<Eigen::MatrixXd> mats(get_u32(in));
  for (auto& m : mats) m = get_mat(in);
  return mats;
}

void put_config(std::ostream& out, const ModelConfig& m) {
  const double fields[] = {
      static_cast<double>(m.d),          static_cast<double>(m.n_layers),
      static_cast<double>(m.n_heads),    static_cast<double>(m.n_experts),
      static_cast<double>(m.top_k),      static_cast<double>(m.d_ff),
      static_cast<double>(m.fourier_feats), static_cast<double>(m.d_text),
      m.theta_base,                      m.poi_radius_m,
      m.road_radius_m,                   static_cast<double>(m.max_len),
      static_cast<double>(m.mix_layers), m.aux_loss_weight,
  };
  put_u32(out, static_cast<std::uint32_t>(std::size(fields)));
  for (const double f : fields) put_f64(out, f);
}

ModelConfig get_config(std::istream& in) {
  if (get_u32(in) != 14) throw ParseError("unexpected config field count");
  ModelConfig m;
  m.d = static_cast<int>(get_f64(in));
  m.n_layers = static_cast<int>(get_f64(in));
  m.n_heads = static_cast<int>(get_f64(in));
  m.n_experts = static_cast<int>(get_f64(in));
  m.top_k = static_cast<int>(get_f64(in));
  m.d_ff = static_cast<int>(get_f64(in));
  m.fourier_feats = static_cast<int>(get_f64(in));
  m.d_text = static_cast<int>(get_f64(in));
  m.theta_base = get_f64(in);
  m.poi_radius_m = get_f64(in);
  m.road_radius_m = get_f64(in);
  m.max_len = static_cast<int>(get_f64(in));
  m.mix_layers = static_cast<int>(get_f64(in));
  m.aux_loss_weight = get_f64(in);
  return m;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelConfig& config,
                     const ParamStore<double>& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  put_bytes(out, kCheckpointMagic, 8);
  put_u32(out, kCheckpointVersion);
  put_config(out, config);
  put_store(out, params);
  if (!out) throw IoError("failed writing " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[8];
  get_bytes(in, magic, 8);
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0) throw ParseError("not a checkpoint file");
  if (get_u32(in) != kCheckpointVersion) throw ParseError("unsupported checkpoint version");
  Checkpoint ckpt;
  ckpt.config = get_config(in);
  ckpt.params = get_store(in);
  return ckpt;
}

void require_compatible(const ModelConfig& stored, const ModelConfig& requested) {
  const auto mismatch = [](const char* field) {
    throw IncompatibleCheckpoint(std::string("checkpoint disagrees on ") + field);
  };
  if (stored.d != requested.d) mismatch("d");
  if (stored.n_layers != requested.n_layers) mismatch("n_layers");
  if (stored.n_heads != requested.n_heads) mismatch("n_heads");
  if (stored.n_experts != requested.n_experts) mismatch("n_experts");
  if (stored.top_k != requested.top_k) mismatch("top_k");
  if (stored.expert_hidden() != requested.expert_hidden()) mismatch("d_ff");
  if (stored.fourier_feats != requested.fourier_feats) mismatch("fourier_feats");
  if (stored.d_text != requested.d_text) mismatch("d_text");
  if (stored.mix_layers != requested.mix_layers) mismatch("mix_layers");
  if (stored.theta_base != requested.theta_base) mismatch("theta_base");
}

std::string params_sha256(const ParamStore<double>& params) {
  std::string bytes;
  for (int i = 0; i < params.count(); ++i) {
    bytes += params.name(i);
    bytes.push_back('\0');
    const auto& m = params.value(i);
    bytes.append(reinterpret_cast<const char*>(m.data()),
                 sizeof(double) * static_cast<size_t>(m.size()));
  }
  return sha256_hex(bytes);
}

void save_train_state(const std::string& path, const TrainState& state) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  put_bytes(out, kStateMagic, 8);
  put_u32(out, kCheckpointVersion);
  put_config(out, state.config);
  put_store(out, state.params);
  put_mats(out, state.adam_m);
  put_mats(out, state.adam_v);
  put_u32(out, static_cast<std::uint32_t>(state.adam_steps));
  put_u32(out, static_cast<std::uint32_t>(state.epochs_done));
  put_i32(out, state.best_epoch);
  put_f64(out, state.best_val);
  put_store(out, state.best_params);
  if (!out) throw IoError("failed writing " + path);
}

TrainState load_train_state(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[8];
  get_bytes(in, magic, 8);
  if (std::memcmp(magic, kStateMagic, 8) != 0) throw ParseError("not a training-state file");
  if (get_u32(in) != kCheckpointVersion) throw ParseError("unsupported training-state version");
  TrainState state;
  state.config = get_config(in);
  state.params = get_store(in);
  state.adam_m = get_mats(in);
  state.adam_v = get_mats(in);
  state.adam_steps = static_cast<int>(get_u32(in));
  state.epochs_done = static_cast<int>(get_u32(in));
  state.best_epoch = get_i32(in);
  state.best_val = get_f64(in);
  state.best_params = get_store(in);
  return state;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

std::optional<TaskInstance> build_instance(const Trajectory& traj, TaskKind task,
                                           const ExperimentConfig& cfg, Rng* mask_rng) {
  try {
    switch (task) {
      case TaskKind::Pretrain: return pretrain_mask(traj, *mask_rng);
      case TaskKind::Tp: return make_tp_input(traj, cfg.tp_horizon);
      case TaskKind::Tr: return make_tr_input(traj, cfg.tr_ratio);
      case TaskKind::Tte: return make_tte_input(traj);
    }
  } catch (const TooShort&) {
  }
  return std::nullopt;
}

double eval_loss(const ParamStore<double>& params, const ModelConfig& mc, const TaskInstance& inst,
                 const RegionContext& ctx) {
  ad::Tape<double> tape;
  BoundParams<double> bound(tape, params);
  const ModelInputs in = prepare_inputs(inst, ctx, mc);
  const ForwardResult<double> fwd = forward_pass(tape, bound, mc, in, false, nullptr, nullptr);
  const int loss = reconstruction_loss(tape, fwd, in, mc);
  return tape.val(loss)(0, 0);
}

}  // namespace

TrainResult run_training(const ExperimentConfig& cfg, const RegionContext& ctx,
                         const DatasetSplit& data, const ParamStore<double>* init,
                         TrainState* state) {
  cfg.model.validate();
  if (cfg.epochs < 0 || cfg.batch_size < 1 || cfg.patience < 1) {
    throw InvalidConfig("epochs must be >= 0, batch_size and patience >= 1");
  }

  // Training pool, optionally subsampled for few-shot transfer.
  std::vector<int> pool(data.train.size());
  std::iota(pool.begin(), pool.end(), 0);
  if (cfg.transfer == TransferMode::FewShot && cfg.few_shot_n > 0 &&
      cfg.few_shot_n < static_cast<int>(pool.size())) {
    Rng rng(derive_seed(cfg.seed, "few-shot"));
    for (int i = 0; i < cfg.few_shot_n; ++i) {
      const int j = static_cast<int>(rng.uniform_int(i, static_cast<int>(pool.size()) - 1));
      std::swap(pool[i], pool[j]);
    }
    pool.resize(cfg.few_shot_n);
  }

  ParamStore<double> params;
  const bool resuming = state != nullptr && state->epochs_done > 0;
  if (resuming) {
    params = state->params;
  } else if (init != nullptr) {
    params = *init;
  } else {
    params = build_params<double>(cfg.model, cfg.seed);
  }

  TrainResult res;
  res.n_train_used = static_cast<int>(pool.size());
  if (cfg.epochs == 0) {
    res.final_params = params;
    res.best_params = params;
    return res;
  }

  Adam<double> adam(params, cfg.lr);
  int best_epoch = -1;
  double best_val = std::numeric_limits<double>::infinity();
  ParamStore<double> best_params = params;
  int start_epoch = 0;
  if (resuming) {
    adam.m() = state->adam_m;
    adam.v() = state->adam_v;
    adam.set_steps(state->adam_steps);
    start_epoch = state->epochs_done;
    best_epoch = state->best_epoch;
    best_val = state->best_val;
    if (state->best_params.count() > 0) best_params = state->best_params;
  }

  // Deterministic adapters produce the same instance every epoch; build once.
  // Instances longer than the training window are dropped.
  std::vector<TaskInstance> fixed_insts;
  if (cfg.task != TaskKind::Pretrain) {
    for (const int idx : pool) {
      auto inst = build_instance(data.train[idx], cfg.task, cfg, nullptr);
      if (inst.has_value() && inst->size() <= cfg.model.max_len) {
        fixed_insts.push_back(std::move(*inst));
      }
    }
  }
  std::vector<TaskInstance> val_insts;
  {
    Rng val_rng(derive_seed(cfg.seed, "val-mask"));
    for (const Trajectory& traj : data.val) {
      auto inst = build_instance(traj, cfg.task, cfg, &val_rng);
      if (inst.has_value() && inst->size() <= cfg.model.max_len) {
        val_insts.push_back(std::move(*inst));
      }
    }
  }

  bool stop = false;
  for (int epoch = start_epoch; epoch < cfg.epochs && !stop; ++epoch) {
    // All per-epoch randomness comes from (seed, epoch), so a resumed run
    // replays the identical stream.
    Rng mask_rng(derive_seed(derive_seed(cfg.seed, "train-mask"), epoch));
    Rng shuffle_rng(derive_seed(derive_seed(cfg.seed, "shuffle"), epoch));
    Rng noise_rng(derive_seed(derive_seed(cfg.seed, "gate-noise"), epoch));

    std::vector<TaskInstance> pretrain_insts;
    if (cfg.task == TaskKind::Pretrain) {
      for (const int idx : pool) {
        auto inst = build_instance(data.train[idx], cfg.task, cfg, &mask_rng);
        if (inst.has_value() && inst->size() <= cfg.model.max_len) {
          pretrain_insts.push_back(std::move(*inst));
        }
      }
    }
    const std::vector<TaskInstance>& insts =
        cfg.task == TaskKind::Pretrain ? pretrain_insts : fixed_insts;
    if (insts.empty()) throw DataEmpty("no usable training instances");

    std::vector<int> order(insts.size());
    std::iota(order.begin(), order.end(), 0);
    for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) {
      std::swap(order[i], order[shuffle_rng.uniform_int(0, i)]);
    }

    double loss_sum = 0.0;
    int loss_n = 0;
    for (size_t pos = 0; pos < order.size(); pos += cfg.batch_size) {
      if (cfg.max_steps > 0 && adam.steps_taken() >= cfg.max_steps) {
        stop = true;
        break;
      }
      const size_t end = std::min(order.size(), pos + cfg.batch_size);
      int pad_to = 0;
      for (size_t b = pos; b < end; ++b) pad_to = std::max(pad_to, insts[order[b]].size());

      std::map<std::string, Eigen::MatrixXd> grads;
      double batch_loss = 0.0;
      for (size_t b = pos; b < end; ++b) {
        const TaskInstance& inst = insts[order[b]];
        ad::Tape<double> tape;
        BoundParams<double> bound(tape, params);
        const ModelInputs in = prepare_inputs(inst, ctx, cfg.model, pad_to);
        const ForwardResult<double> fwd =
            forward_pass(tape, bound, cfg.model, in, true, &noise_rng, nullptr);
        const int loss = reconstruction_loss(tape, fwd, in, cfg.model);
        tape.backward(loss);
        bound.accumulate_grads(grads);
        batch_loss += tape.val(loss)(0, 0);
      }
      const double bn = static_cast<double>(end - pos);
      batch_loss /= bn;
      if (!std::isfinite(batch_loss)) throw DivergedLoss("non-finite training loss");
      for (auto& [name, g] : grads) g /= bn;
      adam.step(params, grads);
      loss_sum += batch_loss * bn;
      loss_n += static_cast<int>(bn);
    }
    if (loss_n == 0) break;  // step budget exhausted before this epoch ran

    const double train_loss = loss_sum / loss_n;
    double val_loss = train_loss;
    if (!val_insts.empty()) {
      double v = 0.0;
      for (const TaskInstance& inst : val_insts) v += eval_loss(params, cfg.model, inst, ctx);
      val_loss = v / static_cast<double>(val_insts.size());
    }
    res.log.push_back({epoch, train_loss, val_loss});

    if (val_loss < best_val) {
      best_val = val_loss;
      best_epoch = epoch;
      best_params = params;
    }
    if (epoch - best_epoch >= cfg.patience) stop = true;

    if (state != nullptr) {
      state->config = cfg.model;
      state->params = params;
      state->adam_m = adam.m();
      state->adam_v = adam.v();
      state->adam_steps = adam.steps_taken();
      state->epochs_done = epoch + 1;
      state->best_epoch = best_epoch;
      state->best_val = best_val;
      state->best_params = best_params;
    }
  }

  res.final_params = std::move(params);
  res.best_params = std::move(best_params);
  res.best_epoch = best_epoch;
  res.best_val = best_val;
  res.steps = adam.steps_taken();
  return res;
}

TrainResult pretrain(const ExperimentConfig& cfg, const RegionContext& ctx,
                     const DatasetSplit& data) {
  ExperimentConfig pre_cfg = cfg;
  pre_cfg.task = TaskKind::Pretrain;
  return run_training(pre_cfg, ctx, data);
}

TrainResult finetune(const ExperimentConfig& cfg, const RegionContext& ctx,
                     const DatasetSplit& data, const Checkpoint& ckpt) {
  require_compatible(ckpt.config, cfg.model);
  return run_training(cfg, ctx, data, &ckpt.params);
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

namespace {

int density_class(const RegionContext& ctx, const GeoPoint& p, const ModelConfig& mc) {
  const int count = static_cast<int>(poi_neighbors(ctx, p, mc.poi_radius_m).size() +
                                     road_neighbors(ctx, p, mc.road_radius_m).size());
  if (count > 15) return kDensityHigh;
  if (count >= 5) return kDensityMedium;
  return kDensityLow;
}

void accumulate_gates(GateStats& stats, const GateTrace& trace, const TaskInstance& inst,
                      const RegionContext& ctx, const ModelConfig& mc) {
  const int n_tokens = inst.size();
  for (int i = 0; i < n_tokens; ++i) {
    const TrajectoryPoint& src = inst.kind == TaskKind::Tte
                                     ? (i == 0 ? inst.source.front() : inst.source.back())
                                     : inst.source[i];
    const int cls = density_class(ctx, {src.lng, src.lat}, mc);
    ++stats.n_points[cls];
    for (const auto& layer : trace.selected) {
      if (i >= static_cast<int>(layer.size())) continue;
      for (const int expert : layer[i]) stats.freq(cls, expert) += 1.0;
    }
  }
}

MetricRow make_row(TaskKind task, const std::string& dataset, const std::string& metric,
                   double value, int n, std::uint64_t seed) {
  return {task_name(task), dataset, metric, value, n, seed};
}

}  // namespace

EvalReport evaluate(const ExperimentConfig& cfg, const Checkpoint& ckpt, const RegionContext& ctx,
                    const std::vector<Trajectory>& test, const std::string& dataset_name) {
  const ModelConfig& mc = ckpt.config;
  mc.validate();
  if (ctx.provider && ctx.provider->dim() != mc.d_text) {
    throw IncompatibleCheckpoint("context embedding width disagrees with checkpoint");
  }

  EvalReport report;
  report.gates.freq = Eigen::MatrixXd::Zero(3, mc.n_experts);

  Rng mask_rng(derive_seed(cfg.seed, "eval-mask"));
  std::vector<double> dest_errs;        // TP: final-point haversine error
  std::vector<double> point_errs;       // TP/TR: pooled per-point errors
  std::vector<double> interp_errs;      // TR baseline
  std::vector<double> tte_pred, tte_true;
  double loss_sum = 0.0;

  for (const Trajectory& traj : test) {
    const auto maybe = build_instance(traj, cfg.task, cfg, &mask_rng);
    if (!maybe.has_value()) continue;
    const TaskInstance& inst = *maybe;
    ++report.n_instances;

    GateTrace trace;
    if (cfg.task == TaskKind::Pretrain) {
      // One eval-mode pass yields both the loss and the gate trace.
      ad::Tape<double> tape;
      BoundParams<double> bound(tape, ckpt.params);
      const ModelInputs in = prepare_inputs(inst, ctx, mc);
      const ForwardResult<double> fwd = forward_pass(tape, bound, mc, in, false, nullptr, &trace);
      loss_sum += tape.val(reconstruction_loss(tape, fwd, in, mc))(0, 0);
    } else {
      const std::vector<PointPrediction> preds = predict(ckpt.params, mc, inst, ctx, &trace);
      if (cfg.task == TaskKind::Tp) {
        const TrajectoryPoint& goal = inst.source.back();
        dest_errs.push_back(
            haversine_m({preds.back().lng, preds.back().lat}, {goal.lng, goal.lat}));
        for (const double e : spatial_errors_m(inst, preds)) point_errs.push_back(e);
      } else if (cfg.task == TaskKind::Tr) {
        for (const double e : spatial_errors_m(inst, preds)) point_errs.push_back(e);
        const std::vector<GeoPoint> base = linear_interp_baseline(inst);
        for (int i = 0; i < inst.size(); ++i) {
          if (!masks_spatial(inst.mask[i])) continue;
          interp_errs.push_back(
              haversine_m(base[i], {inst.source[i].lng, inst.source[i].lat}));
        }
      } else {
        tte_pred.push_back(extract_travel_time(preds.back()));
        tte_true.push_back(true_travel_time_min(inst));
      }
    }
    accumulate_gates(report.gates, trace, inst, ctx, mc);
  }

  for (int c = 0; c < 3; ++c) {
    const double total = report.gates.freq.row(c).sum();
    if (total > 0.0) report.gates.freq.row(c) /= total;
  }

  const auto push = [&](const std::string& metric, double value, int n) {
    report.rows.push_back(make_row(cfg.task, dataset_name, metric, value, n, cfg.seed));
  };
  switch (cfg.task) {
    case TaskKind::Pretrain: {
      if (report.n_instances == 0) throw DataEmpty("no evaluable instances");
      push("loss", loss_sum / report.n_instances, report.n_instances);
      break;
    }
    case TaskKind::Tp: {
      const MetricSet dest = metrics_from_errors(dest_errs);
      push("dest_rmse_m", dest.rmse, dest.n);
      push("dest_mae_m", dest.mae, dest.n);
      const MetricSet point = metrics_from_errors(point_errs);
      push("point_rmse_m", point.rmse, point.n);
      push("point_mae_m", point.mae, point.n);
      break;
    }
    case TaskKind::Tr: {
      const MetricSet point = metrics_from_errors(point_errs);
      push("rmse_m", point.rmse, point.n);
      push("mae_m", point.mae, point.n);
      const MetricSet base = metrics_from_errors(interp_errs);
      push("interp_rmse_m", base.rmse, base.n);
      push("interp_mae_m", base.mae, base.n);
      break;
    }
    case TaskKind::Tte: {
      std::vector<double> errs(tte_pred.size());
      for (size_t i = 0; i < tte_pred.size(); ++i) errs[i] = tte_pred[i] - tte_true[i];
      const MetricSet mins = metrics_from_errors(errs);
      push("rmse_min", mins.rmse, mins.n);
      push("mae_min", mins.mae, mins.n);
      // MAPE only over trips of at least a minute; shorter ones explode the
      // ratio without saying anything about the model.
      std::vector<double> p_keep, t_keep;
      for (size_t i = 0; i < tte_true.size(); ++i) {
        if (tte_true[i] >= 1.0) {
          p_keep.push_back(tte_pred[i]);
          t_keep.push_back(tte_true[i]);
        }
      }
      if (!p_keep.empty()) {
        const MetricSet pct = metrics_scalar(p_keep, t_keep);
        push("mape_pct", *pct.mape, pct.n);
      }
      break;
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

void write_report(const std::string& path, const std::vector<MetricRow>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << "task\tdataset\tmetric\tvalue\tn_samples\tseed\n";
  char buf[64];
  for (const MetricRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.17g", r.value);
    out << r.task << '\t' << r.dataset << '\t' << r.metric << '\t' << buf << '\t' << r.n_samples
        << '\t' << r.seed << '\n';
  }
  if (!out) throw IoError("failed writing " + path);
}

std::vector<MetricRow> read_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<MetricRow> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 || line.empty()) continue;
    std::istringstream is(line);
    MetricRow r;
    std::string value, n, seed;
    if (!std::getline(is, r.task, '\t') || !std::getline(is, r.dataset, '\t') ||
        !std::getline(is, r.metric, '\t') || !std::getline(is, value, '\t') ||
        !std::getline(is, n, '\t') || !std::getline(is, seed, '\t')) {
      throw ParseError("line " + std::to_string(lineno) + ": expected six report columns");
    }
    r.value = to_double("value", value);
    r.n_samples = to_int("n_samples", n);
    r.seed = to_u64("seed", seed);
    rows.push_back(std::move(r));
  }
  return rows;
}

namespace {
const char* const kClassNames[3] = {"high", "medium", "low"};
}

void write_gate_stats(const std::string& path, const GateStats& stats) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << "class";
  for (int e = 0; e < stats.freq.cols(); ++e) out << "\texpert_" << e;
  out << "\tn_points\n";
  char buf[64];
  for (int c = 0; c < 3; ++c) {
    out << kClassNames[c];
    for (int e = 0; e < stats.freq.cols(); ++e) {
      std::snprintf(buf, sizeof(buf), "%.17g", stats.freq(c, e));
      out << '\t' << buf;
    }
    out << '\t' << stats.n_points[c] << '\n';
  }
  if (!out) throw IoError("failed writing " + path);
}

GateStats read_gate_stats(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string header;
  if (!std::getline(in, header)) throw ParseError("empty gate-stats file");
  const int n_cols = static_cast<int>(std::count(header.begin(), header.end(), '\t')) - 1;
  if (n_cols < 1) throw ParseError("gate-stats header has no expert columns");
  GateStats stats;
  stats.freq = Eigen::MatrixXd::Zero(3, n_cols);
  std::string line;
  for (int c = 0; c < 3; ++c) {
    if (!std::getline(in, line)) throw ParseError("gate-stats file ends early");
    std::istringstream is(line);
    std::string tok;
    std::getline(is, tok, '\t');
    if (tok != kClassNames[c]) throw ParseError("unexpected gate-stats row: " + tok);
    for (int e = 0; e < n_cols; ++e) {
      if (!std::getline(is, tok, '\t')) throw ParseError("gate-stats row too short");
      stats.freq(c, e) = to_double("freq", tok);
    }
    if (!std::getline(is, tok, '\t')) throw ParseError("gate-stats row missing n_points");
    stats.n_points[c] = to_int("n_points", tok);
  }
  return stats;
}

// ---------------------------------------------------------------------------
// SVG figures
// ---------------------------------------------------------------------------

namespace {

constexpr int kSvgW = 640;
constexpr int kSvgH = 360;
constexpr int kSvgPad = 48;

std::string svg_open() {
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kSvgW << "\" height=\"" << kSvgH
     << "\" viewBox=\"0 0 " << kSvgW << ' ' << kSvgH << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  return os.str();
}

void svg_axes(std::ostringstream& os) {
  os << "<line x1=\"" << kSvgPad << "\" y1=\"" << kSvgH - kSvgPad << "\" x2=\"" << kSvgW - kSvgPad
     << "\" y2=\"" << kSvgH - kSvgPad << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << kSvgPad << "\" y1=\"" << kSvgPad << "\" x2=\"" << kSvgPad << "\" y2=\""
     << kSvgH - kSvgPad << "\" stroke=\"black\"/>\n";
}

}  // namespace

void write_loss_svg(const std::string& path, const std::vector<EpochLog>& log) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  std::ostringstream os;
  os << svg_open();
  svg_axes(os);
  if (!log.empty()) {
    double lo = log[0].train_loss, hi = log[0].train_loss;
    for (const EpochLog& e : log) {
      lo = std::min({lo, e.train_loss, e.val_loss});
      hi = std::max({hi, e.train_loss, e.val_loss});
    }
    if (hi <= lo) hi = lo + 1.0;
    const double x_span = std::max<size_t>(1, log.size() - 1);
    const auto px = [&](size_t i) {
      return kSvgPad + (kSvgW - 2.0 * kSvgPad) * static_cast<double>(i) / x_span;
    };
    const auto py = [&](double v) {
      return kSvgH - kSvgPad - (kSvgH - 2.0 * kSvgPad) * (v - lo) / (hi - lo);
    };
    for (int series = 0; series < 2; ++series) {
      os << "<polyline fill=\"none\" stroke=\"" << (series == 0 ? "#1f77b4" : "#d62728")
         << "\" stroke-width=\"1.5\" points=\"";
      for (size_t i = 0; i < log.size(); ++i) {
        const double v = series == 0 ? log[i].train_loss : log[i].val_loss;
        os << px(i) << ',' << py(v) << ' ';
      }
      os << "\"/>\n";
    }
    os << "<text x=\"" << kSvgW - kSvgPad - 100 << "\" y=\"" << kSvgPad
       << "\" fill=\"#1f77b4\" font-size=\"12\">train loss</text>\n"
       << "<text x=\"" << kSvgW - kSvgPad - 100 << "\" y=\"" << kSvgPad + 16
       << "\" fill=\"#d62728\" font-size=\"12\">val loss</text>\n";
  }
  os << "<text x=\"" << kSvgW / 2 << "\" y=\"" << kSvgH - 12
     << "\" font-size=\"12\" text-anchor=\"middle\">epoch</text>\n</svg>\n";
  out << os.str();
  if (!out) throw IoError("failed writing " + path);
}

void write_gate_svg(const std::string& path, const GateStats& stats) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  std::ostringstream os;
  os << svg_open();
  svg_axes(os);
  const int n_experts = static_cast<int>(stats.freq.cols());
  const char* const colors[3] = {"#1f77b4", "#ff7f0e", "#2ca02c"};
  if (n_experts > 0) {
    double hi = 0.0;
    for (int c = 0; c < 3; ++c) hi = std::max(hi, stats.freq.row(c).maxCoeff());
    if (hi <= 0.0) hi = 1.0;
    const double group_w = (kSvgW - 2.0 * kSvgPad) / n_experts;
    const double bar_w = group_w / 4.0;
    for (int e = 0; e < n_experts; ++e) {
      for (int c = 0; c < 3; ++c) {
        const double h = (kSvgH - 2.0 * kSvgPad) * stats.freq(c, e) / hi;
        os << "<rect x=\"" << kSvgPad + e * group_w + c * bar_w << "\" y=\""
           << kSvgH - kSvgPad - h << "\" width=\"" << bar_w * 0.9 << "\" height=\"" << h
           << "\" fill=\"" << colors[c] << "\"/>\n";
      }
      os << "<text x=\"" << kSvgPad + (e + 0.4) * group_w << "\" y=\"" << kSvgH - kSvgPad + 14
         << "\" font-size=\"10\" text-anchor=\"middle\">" << e << "</text>\n";
    }
    for (int c = 0; c < 3; ++c) {
      os << "<rect x=\"" << kSvgW - kSvgPad - 90 << "\" y=\"" << kSvgPad + 16 * c
         << "\" width=\"10\" height=\"10\" fill=\"" << colors[c] << "\"/>\n"
         << "<text x=\"" << kSvgW - kSvgPad - 76 << "\" y=\"" << kSvgPad + 16 * c + 9
         << "\" font-size=\"12\">" << kClassNames[c] << " density</text>\n";
    }
  }
  os << "<text x=\"" << kSvgW / 2 << "\" y=\"" << kSvgH - 12
     << "\" font-size=\"12\" text-anchor=\"middle\">expert</text>\n</svg>\n";
  out << os.str();
  if (!out) throw IoError("failed writing " + path);
}

// ---------------------------------------------------------------------------
// Assembly helpers
// ---------------------------------------------------------------------------

RegionContext context_from_region(const SynthRegion& region, const ModelConfig& cfg,
                                  std::shared_ptr<EmbeddingCache> cache) {
  auto provider = std::make_shared<StubTextProvider>(cfg.d_text);
  return build_region_context(region.pois, region.roads, cfg.poi_radius_m, cfg.road_radius_m,
                              std::move(provider), std::move(cache));
}

}  // namespace transfertraj
