#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "transfertraj/pipeline.hpp"
#include "transfertraj/trainer.hpp"

namespace fs = std::filesystem;
using namespace transfertraj;

namespace {

// Options shared by the training and evaluation subcommands. Dedicated flags
// win over --set pairs, which win over the --config file.
struct CommonOpts {
  std::string config_path;
  std::vector<std::string> sets;
  CLI::Option* opt_seed = nullptr;
  std::uint64_t seed = 0;
  CLI::Option* opt_epochs = nullptr;
  int epochs = 0;
  CLI::Option* opt_lr = nullptr;
  double lr = 0.0;
  CLI::Option* opt_batch = nullptr;
  int batch_size = 0;
  CLI::Option* opt_steps = nullptr;
  int max_steps = 0;
  std::string task;
  std::string transfer;
  CLI::Option* opt_few = nullptr;
  int few_shot_n = 0;
  std::string data_dir;
  std::string pois;
  std::string roads;
  std::string cache;
  std::string checkpoint_in;
  std::string checkpoint_out;
  std::string report_dir;
  std::string state_path;
};

void add_common_flags(CLI::App* sub, CommonOpts& o) {
  sub->add_option("--config", o.config_path, "key=value config file applied first");
  sub->add_option("--set", o.sets, "extra key=value override (repeatable)")
      ->check([](const std::string& s) {
        return s.find('=') == std::string::npos ? "expected key=value" : std::string{};
      });
  o.opt_seed = sub->add_option("--seed", o.seed, "run seed; drives every random draw");
  o.opt_epochs = sub->add_option("--epochs", o.epochs, "training epochs");
  o.opt_lr = sub->add_option("--lr", o.lr, "Adam learning rate");
  o.opt_batch = sub->add_option("--batch-size", o.batch_size, "trajectories per batch");
  o.opt_steps = sub->add_option("--max-steps", o.max_steps, "stop after this many updates");
  sub->add_option("--transfer", o.transfer, "in-region, zero-shot, or few-shot")
      ->check(CLI::IsMember({"in-region", "zero-shot", "few-shot"}));
  o.opt_few = sub->add_option("--few-shot-n", o.few_shot_n, "training trajectories to keep");
  sub->add_option("--data", o.data_dir, "split directory produced by prep");
  sub->add_option("--pois", o.pois, "POI store file");
  sub->add_option("--roads", o.roads, "road store file");
  sub->add_option("--cache", o.cache, "text-embedding cache file");
  sub->add_option("--report-dir", o.report_dir, "directory for reports and logs");
  sub->add_option("--state", o.state_path, "training-state file for resumable runs");
}

ExperimentConfig build_cfg(const CommonOpts& o, int default_epochs) {
  ExperimentConfig cfg;
  cfg.epochs = default_epochs;
  if (!o.config_path.empty()) {
    std::vector<std::string> keys;
    cfg = load_config(o.config_path, &keys);
    if (std::find(keys.begin(), keys.end(), "epochs") == keys.end()) {
      cfg.epochs = default_epochs;
    }
  }
  for (const std::string& s : o.sets) {
    const size_t eq = s.find('=');
    apply_override(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
  if (o.opt_seed->count() > 0) cfg.seed = o.seed;
  if (o.opt_epochs->count() > 0) cfg.epochs = o.epochs;
  if (o.opt_lr->count() > 0) cfg.lr = o.lr;
  if (o.opt_batch->count() > 0) cfg.batch_size = o.batch_size;
  if (o.opt_steps->count() > 0) cfg.max_steps = o.max_steps;
  if (!o.task.empty()) apply_override(cfg, "task", o.task);
  if (!o.transfer.empty()) apply_override(cfg, "transfer", o.transfer);
  if (o.opt_few->count() > 0) cfg.few_shot_n = o.few_shot_n;
  if (!o.data_dir.empty()) cfg.data_path = o.data_dir;
  if (!o.pois.empty()) cfg.poi_store = o.pois;
  if (!o.roads.empty()) cfg.road_store = o.roads;
  if (!o.cache.empty()) cfg.cache_path = o.cache;
  if (!o.checkpoint_in.empty()) cfg.checkpoint_in = o.checkpoint_in;
  if (!o.checkpoint_out.empty()) cfg.checkpoint_out = o.checkpoint_out;
  if (!o.report_dir.empty()) cfg.report_dir = o.report_dir;
  cfg.model.validate();
  return cfg;
}

RegionContext make_context(const ExperimentConfig& cfg) {
  std::vector<Poi> pois;
  std::vector<RoadSegment> roads;
  if (!cfg.poi_store.empty()) pois = load_poi_store(cfg.poi_store);
  if (!cfg.road_store.empty()) roads = load_road_store(cfg.road_store);
  std::shared_ptr<EmbeddingCache> cache;
  if (!cfg.cache_path.empty()) {
    cache = std::make_shared<EmbeddingCache>();
    if (fs::exists(cfg.cache_path)) cache->load(cfg.cache_path);
  }
  std::shared_ptr<const TextEmbeddingProvider> provider =
      RemoteTextProvider::from_env(cfg.model.d_text);
  if (!provider) provider = std::make_shared<StubTextProvider>(cfg.model.d_text);
  return build_region_context(std::move(pois), std::move(roads), cfg.model.poi_radius_m,
                              cfg.model.road_radius_m, std::move(provider), std::move(cache));
}

void save_cache(const ExperimentConfig& cfg, const RegionContext& ctx) {
  if (!cfg.cache_path.empty() && ctx.cache) ctx.cache->save(cfg.cache_path);
}

DatasetSplit load_split(const std::string& dir, bool test_only) {
  DatasetSplit split;
  if (!test_only) {
    split.train = ingest(dir + "/train.txt", IngestFormat::LineRecords);
    split.val = ingest(dir + "/val.txt", IngestFormat::LineRecords);
  }
  split.test = ingest(dir + "/test.txt", IngestFormat::LineRecords);
  return split;
}

void write_losses(const std::string& path, const std::vector<EpochLog>& log) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << "epoch\ttrain_loss\tval_loss\n";
  char buf[64];
  for (const EpochLog& e : log) {
    out << e.epoch;
    std::snprintf(buf, sizeof(buf), "%.17g", e.train_loss);
    out << '\t' << buf;
    std::snprintf(buf, sizeof(buf), "%.17g", e.val_loss);
    out << '\t' << buf << '\n';
  }
}

std::vector<EpochLog> read_losses(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<EpochLog> log;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 || line.empty()) continue;
    EpochLog e;
    if (std::sscanf(line.c_str(), "%d\t%lg\t%lg", &e.epoch, &e.train_loss, &e.val_loss) != 3) {
      throw ParseError("line " + std::to_string(lineno) + ": expected epoch, train, val");
    }
    log.push_back(e);
  }
  return log;
}

// Runs the shared training loop, optionally resumable through a state file,
// then writes the best-validation checkpoint and the per-epoch loss log.
int run_train_command(const ExperimentConfig& cfg, const ParamStore<double>* init,
                      const std::string& state_path) {
  if (cfg.data_path.empty()) throw InvalidConfig("training needs --data");
  const RegionContext ctx = make_context(cfg);
  const DatasetSplit data = load_split(cfg.data_path, false);

  TrainState state;
  bool resumed = false;
  if (!state_path.empty() && fs::exists(state_path)) {
    state = load_train_state(state_path);
    require_compatible(state.config, cfg.model);
    resumed = state.epochs_done > 0;
  }

  if (!cfg.report_dir.empty()) fs::create_directories(cfg.report_dir);
  const fs::path ckpt_parent = fs::path(cfg.checkpoint_out).parent_path();
  if (!ckpt_parent.empty()) fs::create_directories(ckpt_parent);

  const TrainResult res =
      run_training(cfg, ctx, data, init, state_path.empty() ? nullptr : &state);
  if (!state_path.empty()) save_train_state(state_path, state);
  save_checkpoint(cfg.checkpoint_out, cfg.model, res.best_params);
  write_losses(cfg.report_dir + "/losses.tsv", res.log);
  save_cache(cfg, ctx);

  if (resumed) {
    std::printf("resumed after %d finished epochs, ran %d more\n",
                state.epochs_done - static_cast<int>(res.log.size()),
                static_cast<int>(res.log.size()));
  } else {
    std::printf("trained %d epochs (%d updates) on %d trajectories\n",
                static_cast<int>(res.log.size()), res.steps, res.n_train_used);
  }
  if (!res.log.empty()) {
    std::printf("best val loss %.6g at epoch %d\n", res.best_val, res.best_epoch);
  }
  std::printf("checkpoint written to %s\n", cfg.checkpoint_out.c_str());
  return 0;
}

int cmd_pretrain(const CommonOpts& o) {
  ExperimentConfig cfg = build_cfg(o, 30);
  cfg.task = TaskKind::Pretrain;
  return run_train_command(cfg, nullptr, o.state_path);
}

int cmd_finetune(const CommonOpts& o) {
  ExperimentConfig cfg = build_cfg(o, 50);
  if (cfg.task == TaskKind::Pretrain) {
    throw InvalidConfig("finetune needs --task tp, tr, or tte");
  }
  const Checkpoint ckpt = load_checkpoint(cfg.checkpoint_in);
  require_compatible(ckpt.config, cfg.model);
  return run_train_command(cfg, &ckpt.params, o.state_path);
}

int cmd_eval(const CommonOpts& o) {
  ExperimentConfig cfg = build_cfg(o, 0);
  if (cfg.data_path.empty()) throw InvalidConfig("eval needs --data");
  const Checkpoint ckpt = load_checkpoint(cfg.checkpoint_in);
  cfg.model = ckpt.config;  // the checkpoint defines the network and radii
  const RegionContext ctx = make_context(cfg);
  const DatasetSplit data = load_split(cfg.data_path, true);

  const EvalReport report = evaluate(cfg, ckpt, ctx, data.test, cfg.data_path);
  if (!cfg.report_dir.empty()) fs::create_directories(cfg.report_dir);
  write_report(cfg.report_dir + "/report.tsv", report.rows);
  write_gate_stats(cfg.report_dir + "/gate_stats.tsv", report.gates);
  save_cache(cfg, ctx);

  std::printf("%-10s %-24s %-16s %14s %10s\n", "task", "dataset", "metric", "value", "n");
  for (const MetricRow& r : report.rows) {
    std::printf("%-10s %-24s %-16s %14.6g %10d\n", r.task.c_str(), r.dataset.c_str(),
                r.metric.c_str(), r.value, r.n_samples);
  }
  std::printf("report written to %s/report.tsv (%d instances)\n", cfg.report_dir.c_str(),
              report.n_instances);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"trajectory learning across regions: synthesis, training, evaluation"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic region");
  SynthRegionSpec spec;
  std::string synth_out;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--seed", spec.seed, "region seed");
  synth->add_option("--trajectories", spec.n_trajectories, "trips to generate");
  synth->add_option("--pois", spec.n_pois, "points of interest");
  synth->add_option("--roads", spec.n_roads, "road segments");
  synth->add_option("--grid-m", spec.grid_spacing_m, "street grid spacing in meters");
  synth->add_option("--dense-speed", spec.dense_speed_mps, "dense-district speed, m/s");
  synth->add_option("--sparse-speed", spec.sparse_speed_mps, "sparse-district speed, m/s");
  synth->add_option("--interval-s", spec.sampling_interval_s, "sampling interval, seconds");
  synth->add_option("--lng-min", spec.lng_min, "western boundary");
  synth->add_option("--lng-max", spec.lng_max, "eastern boundary");
  synth->add_option("--lat-min", spec.lat_min, "southern boundary");
  synth->add_option("--lat-max", spec.lat_max, "northern boundary");

  // prep
  auto* prep = app.add_subcommand("prep", "ingest, resample, filter, and split trajectories");
  std::string prep_in, prep_out, prep_format = "line-records";
  int prep_min = 5, prep_max = 120, r_train = 8, r_val = 1, r_test = 1;
  bool no_resample = false;
  prep->add_option("--in", prep_in, "raw trajectory file")->required();
  prep->add_option("--out", prep_out, "output directory for the splits")->required();
  prep->add_option("--format", prep_format, "input layout")
      ->check(CLI::IsMember({"point-rows", "line-records"}));
  prep->add_option("--min-len", prep_min, "drop trajectories shorter than this");
  prep->add_option("--max-len", prep_max, "drop trajectories longer than this");
  prep->add_flag("--no-resample", no_resample, "keep every point instead of every third");
  prep->add_option("--train-ratio", r_train, "train share");
  prep->add_option("--val-ratio", r_val, "validation share");
  prep->add_option("--test-ratio", r_test, "test share");

  // training and evaluation
  auto* pre = app.add_subcommand("pretrain", "train from scratch with masked recovery");
  CommonOpts pre_opts;
  add_common_flags(pre, pre_opts);
  pre->add_option("--out", pre_opts.checkpoint_out, "checkpoint output path");

  auto* fine = app.add_subcommand("finetune", "adapt a checkpoint to a downstream task");
  CommonOpts fine_opts;
  add_common_flags(fine, fine_opts);
  fine->add_option("--checkpoint", fine_opts.checkpoint_in, "pretrained checkpoint")->required();
  fine->add_option("--out", fine_opts.checkpoint_out, "checkpoint output path");
  fine->add_option("--task", fine_opts.task, "downstream task")
      ->required()
      ->check(CLI::IsMember({"tp", "tr", "tte"}));

  auto* ev = app.add_subcommand("eval", "score a checkpoint on a test split");
  CommonOpts ev_opts;
  add_common_flags(ev, ev_opts);
  ev->add_option("--checkpoint", ev_opts.checkpoint_in, "checkpoint to score")->required();
  ev->add_option("--task", ev_opts.task, "task to evaluate")
      ->required()
      ->check(CLI::IsMember({"pretrain", "tp", "tr", "tte"}));

  // report
  auto* rep = app.add_subcommand("report", "render tables and plots from result files");
  std::string rep_losses, rep_gates, rep_metrics, rep_dir = ".";
  rep->add_option("--losses", rep_losses, "losses.tsv from a training run");
  rep->add_option("--gates", rep_gates, "gate_stats.tsv from an evaluation");
  rep->add_option("--metrics", rep_metrics, "report.tsv to print as a table");
  rep->add_option("--report-dir", rep_dir, "directory for the rendered SVG files");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (synth->parsed()) {
      spec.validate();
      const SynthRegion region = generate_region(spec);
      fs::create_directories(synth_out);
      write_trajectories(synth_out + "/trajectories.txt", region.trajectories,
                         IngestFormat::LineRecords);
      save_poi_store(synth_out + "/pois.tsv", region.pois);
      save_road_store(synth_out + "/roads.tsv", region.roads);
      std::printf("wrote %zu trajectories, %zu POIs, %zu roads to %s\n",
                  region.trajectories.size(), region.pois.size(), region.roads.size(),
                  synth_out.c_str());
      return 0;
    }
    if (prep->parsed()) {
      const IngestFormat fmt = prep_format == "point-rows" ? IngestFormat::PointRows
                                                           : IngestFormat::LineRecords;
      std::vector<Trajectory> trajs = ingest(prep_in, fmt);
      const size_t raw = trajs.size();
      if (!no_resample) {
        for (Trajectory& t : trajs) t = three_hop_resample(t);
      }
      trajs = filter_lengths(trajs, prep_min, prep_max);
      const DatasetSplit split = chronological_split(trajs, r_train, r_val, r_test);
      fs::create_directories(prep_out);
      write_trajectories(prep_out + "/train.txt", split.train, IngestFormat::LineRecords);
      write_trajectories(prep_out + "/val.txt", split.val, IngestFormat::LineRecords);
      write_trajectories(prep_out + "/test.txt", split.test, IngestFormat::LineRecords);
      std::printf("ingested %zu trajectories, kept %zu: train %zu, val %zu, test %zu\n", raw,
                  trajs.size(), split.train.size(), split.val.size(), split.test.size());
      return 0;
    }
    if (pre->parsed()) return cmd_pretrain(pre_opts);
    if (fine->parsed()) return cmd_finetune(fine_opts);
    if (ev->parsed()) return cmd_eval(ev_opts);
    if (rep->parsed()) {
      if (rep_losses.empty() && rep_gates.empty() && rep_metrics.empty()) {
        std::cerr << "report needs at least one of --losses, --gates, --metrics\n";
        return 1;
      }
      fs::create_directories(rep_dir);
      if (!rep_losses.empty()) {
        write_loss_svg(rep_dir + "/loss.svg", read_losses(rep_losses));
        std::printf("wrote %s/loss.svg\n", rep_dir.c_str());
      }
      if (!rep_gates.empty()) {
        write_gate_svg(rep_dir + "/gates.svg", read_gate_stats(rep_gates));
        std::printf("wrote %s/gates.svg\n", rep_dir.c_str());
      }
      if (!rep_metrics.empty()) {
        std::printf("%-10s %-24s %-16s %14s %10s %12s\n", "task", "dataset", "metric", "value",
                    "n", "seed");
        for (const MetricRow& r : read_report(rep_metrics)) {
          std::printf("%-10s %-24s %-16s %14.6g %10d %12llu\n", r.task.c_str(),
                      r.dataset.c_str(), r.metric.c_str(), r.value, r.n_samples,
                      static_cast<unsigned long long>(r.seed));
        }
      }
      return 0;
    }
  } catch (const InvalidConfig& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
