// Python bindings for the trajectory-learning core: region synthesis, task
// adapters, training, evaluation, and checkpoints.

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "transfertraj/pipeline.hpp"
#include "transfertraj/trainer.hpp"

namespace py = pybind11;
using namespace transfertraj;

namespace {

RegionContext make_context(const SynthRegion& region, const ModelConfig& cfg) {
  return context_from_region(region, cfg);
}

}  // namespace

PYBIND11_MODULE(_transfertraj, m) {
  m.doc() = "Trajectory learning: rotary-attention encoder with sparse expert routing";

  py::register_exception<Error>(m, "TransferTrajError");

  py::class_<GeoPoint>(m, "GeoPoint")
      .def(py::init<>())
      .def(py::init([](double lng, double lat) {
             return GeoPoint{lng, lat};
           }),
           py::arg("lng"), py::arg("lat"))
      .def_readwrite("lng", &GeoPoint::lng)
      .def_readwrite("lat", &GeoPoint::lat)
      .def("__repr__", [](const GeoPoint& p) {
        return "GeoPoint(lng=" + std::to_string(p.lng) + ", lat=" + std::to_string(p.lat) + ")";
      });

  py::class_<TrajectoryPoint>(m, "TrajectoryPoint")
      .def(py::init<>())
      .def(py::init([](double lng, double lat, std::int64_t t) {
             return TrajectoryPoint{lng, lat, t};
           }),
           py::arg("lng"), py::arg("lat"), py::arg("t"))
      .def_readwrite("lng", &TrajectoryPoint::lng)
      .def_readwrite("lat", &TrajectoryPoint::lat)
      .def_readwrite("t", &TrajectoryPoint::t);

  py::class_<Trajectory>(m, "Trajectory")
      .def(py::init<>())
      .def_readwrite("id", &Trajectory::id)
      .def_readwrite("points", &Trajectory::points)
      .def("__len__", [](const Trajectory& t) { return t.points.size(); });

  py::class_<Poi>(m, "Poi")
      .def(py::init<>())
      .def_readwrite("lng", &Poi::lng)
      .def_readwrite("lat", &Poi::lat)
      .def_readwrite("desc", &Poi::desc);

  py::class_<RoadSegment>(m, "RoadSegment")
      .def(py::init<>())
      .def_readwrite("lng", &RoadSegment::lng)
      .def_readwrite("lat", &RoadSegment::lat)
      .def_readwrite("desc", &RoadSegment::desc);

  py::enum_<MaskKind>(m, "MaskKind")
      .value("NONE", MaskKind::None)
      .value("SPATIAL", MaskKind::Spatial)
      .value("TEMPORAL", MaskKind::Temporal)
      .value("FULL", MaskKind::Full);

  py::enum_<TaskKind>(m, "TaskKind")
      .value("PRETRAIN", TaskKind::Pretrain)
      .value("TP", TaskKind::Tp)
      .value("TR", TaskKind::Tr)
      .value("TTE", TaskKind::Tte);

  py::enum_<TransferMode>(m, "TransferMode")
      .value("IN_REGION", TransferMode::InRegion)
      .value("ZERO_SHOT", TransferMode::ZeroShot)
      .value("FEW_SHOT", TransferMode::FewShot);

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("d", &ModelConfig::d)
      .def_readwrite("n_layers", &ModelConfig::n_layers)
      .def_readwrite("n_heads", &ModelConfig::n_heads)
      .def_readwrite("n_experts", &ModelConfig::n_experts)
      .def_readwrite("top_k", &ModelConfig::top_k)
      .def_readwrite("d_ff", &ModelConfig::d_ff)
      .def_readwrite("fourier_feats", &ModelConfig::fourier_feats)
      .def_readwrite("d_text", &ModelConfig::d_text)
      .def_readwrite("theta_base", &ModelConfig::theta_base)
      .def_readwrite("poi_radius_m", &ModelConfig::poi_radius_m)
      .def_readwrite("road_radius_m", &ModelConfig::road_radius_m)
      .def_readwrite("max_len", &ModelConfig::max_len)
      .def_readwrite("mix_layers", &ModelConfig::mix_layers)
      .def_readwrite("aux_loss_weight", &ModelConfig::aux_loss_weight)
      .def("head_dim", &ModelConfig::head_dim)
      .def("expert_hidden", &ModelConfig::expert_hidden)
      .def("validate", &ModelConfig::validate);

  py::class_<TaskInstance>(m, "TaskInstance")
      .def(py::init<>())
      .def_readonly("kind", &TaskInstance::kind)
      .def_readonly("points", &TaskInstance::points)
      .def_readonly("mask", &TaskInstance::mask)
      .def_readonly("spatial_target", &TaskInstance::spatial_target)
      .def_readonly("temporal_target", &TaskInstance::temporal_target)
      .def_readonly("source", &TaskInstance::source)
      .def_readonly("rho", &TaskInstance::rho)
      .def("__len__", &TaskInstance::size);

  py::class_<PointPrediction>(m, "PointPrediction")
      .def_readonly("x", &PointPrediction::x)
      .def_readonly("y", &PointPrediction::y)
      .def_readonly("lng", &PointPrediction::lng)
      .def_readonly("lat", &PointPrediction::lat)
      .def_readonly("t4", &PointPrediction::t4);

  py::class_<SynthRegionSpec>(m, "SynthRegionSpec")
      .def(py::init<>())
      .def_readwrite("seed", &SynthRegionSpec::seed)
      .def_readwrite("lng_min", &SynthRegionSpec::lng_min)
      .def_readwrite("lng_max", &SynthRegionSpec::lng_max)
      .def_readwrite("lat_min", &SynthRegionSpec::lat_min)
      .def_readwrite("lat_max", &SynthRegionSpec::lat_max)
      .def_readwrite("grid_spacing_m", &SynthRegionSpec::grid_spacing_m)
      .def_readwrite("n_pois", &SynthRegionSpec::n_pois)
      .def_readwrite("n_roads", &SynthRegionSpec::n_roads)
      .def_readwrite("n_trajectories", &SynthRegionSpec::n_trajectories)
      .def_readwrite("dense_speed_mps", &SynthRegionSpec::dense_speed_mps)
      .def_readwrite("sparse_speed_mps", &SynthRegionSpec::sparse_speed_mps)
      .def_readwrite("sampling_interval_s", &SynthRegionSpec::sampling_interval_s)
      .def("validate", &SynthRegionSpec::validate);

  py::class_<SynthRegion>(m, "SynthRegion")
      .def(py::init<>())
      .def_readwrite("pois", &SynthRegion::pois)
      .def_readwrite("roads", &SynthRegion::roads)
      .def_readwrite("trajectories", &SynthRegion::trajectories);

  py::class_<DatasetSplit>(m, "DatasetSplit")
      .def(py::init<>())
      .def_readwrite("train", &DatasetSplit::train)
      .def_readwrite("val", &DatasetSplit::val)
      .def_readwrite("test", &DatasetSplit::test);

  py::class_<RegionContext>(m, "RegionContext");

  py::class_<ParamStore<double>>(m, "ParamStore")
      .def("count", &ParamStore<double>::count)
      .def("name", &ParamStore<double>::name, py::arg("i"))
      .def("tensor",
           [](const ParamStore<double>& store, const std::string& name) {
             return store.at(name);
           },
           py::arg("name"));

  py::class_<ExperimentConfig>(m, "ExperimentConfig")
      .def(py::init<>())
      .def_readwrite("model", &ExperimentConfig::model)
      .def_readwrite("task", &ExperimentConfig::task)
      .def_readwrite("transfer", &ExperimentConfig::transfer)
      .def_readwrite("few_shot_n", &ExperimentConfig::few_shot_n)
      .def_readwrite("epochs", &ExperimentConfig::epochs)
      .def_readwrite("patience", &ExperimentConfig::patience)
      .def_readwrite("lr", &ExperimentConfig::lr)
      .def_readwrite("batch_size", &ExperimentConfig::batch_size)
      .def_readwrite("max_steps", &ExperimentConfig::max_steps)
      .def_readwrite("tp_horizon", &ExperimentConfig::tp_horizon)
      .def_readwrite("tr_ratio", &ExperimentConfig::tr_ratio)
      .def_readwrite("seed", &ExperimentConfig::seed);

  py::class_<EpochLog>(m, "EpochLog")
      .def_readonly("epoch", &EpochLog::epoch)
      .def_readonly("train_loss", &EpochLog::train_loss)
      .def_readonly("val_loss", &EpochLog::val_loss);

  py::class_<TrainResult>(m, "TrainResult")
      .def_readonly("final_params", &TrainResult::final_params)
      .def_readonly("best_params", &TrainResult::best_params)
      .def_readonly("best_epoch", &TrainResult::best_epoch)
      .def_readonly("best_val", &TrainResult::best_val)
      .def_readonly("log", &TrainResult::log)
      .def_readonly("steps", &TrainResult::steps)
      .def_readonly("n_train_used", &TrainResult::n_train_used);

  py::class_<Checkpoint>(m, "Checkpoint")
      .def(py::init<>())
      .def_readwrite("config", &Checkpoint::config)
      .def_readwrite("params", &Checkpoint::params);

  py::class_<GateStats>(m, "GateStats")
      .def_readonly("freq", &GateStats::freq)
      .def_property_readonly("n_points", [](const GateStats& g) {
        return std::vector<int>(g.n_points.begin(), g.n_points.end());
      });

  py::class_<MetricRow>(m, "MetricRow")
      .def_readonly("task", &MetricRow::task)
      .def_readonly("dataset", &MetricRow::dataset)
      .def_readonly("metric", &MetricRow::metric)
      .def_readonly("value", &MetricRow::value)
      .def_readonly("n_samples", &MetricRow::n_samples)
      .def_readonly("seed", &MetricRow::seed)
      .def("__repr__", [](const MetricRow& r) {
        return r.task + "/" + r.metric + "=" + std::to_string(r.value);
      });

  py::class_<EvalReport>(m, "EvalReport")
      .def_readonly("rows", &EvalReport::rows)
      .def_readonly("gates", &EvalReport::gates)
      .def_readonly("n_instances", &EvalReport::n_instances);

  m.attr("EARTH_RADIUS_M") = kEarthRadiusM;

  m.def("haversine_m", &haversine_m, py::arg("a"), py::arg("b"),
        "Great-circle distance in meters.");
  m.def("generate_region", &generate_region, py::arg("spec"),
        "Deterministic synthetic region: same spec, bit-identical output.");
  m.def("translate_region", &translate_region, py::arg("region"), py::arg("dlng"),
        py::arg("dlat"), "Shifts every coordinate in the region by a fixed offset.");
  m.def("three_hop_resample", &three_hop_resample, py::arg("traj"),
        "Keeps every third point plus the endpoints.");
  m.def("filter_lengths", &filter_lengths, py::arg("trajs"), py::arg("min_len") = 5,
        py::arg("max_len") = 120, "Keeps trajectories whose length is inside the bounds.");
  m.def("chronological_split", &chronological_split, py::arg("trajs"), py::arg("r_train") = 8,
        py::arg("r_val") = 1, py::arg("r_test") = 1,
        "Orders by departure time and partitions at the cumulative ratios.");
  m.def("make_context", &make_context, py::arg("region"), py::arg("config"),
        "Spatially indexed neighbor stores plus a deterministic text embedder.");

  m.def("make_tp_input", &make_tp_input, py::arg("traj"), py::arg("horizon") = 5,
        "Prediction instance: the last `horizon` points are fully hidden.");
  m.def("make_tr_input", &make_tr_input, py::arg("traj"), py::arg("ratio"),
        "Recovery instance: keeps every `ratio`-th point plus the tail.");
  m.def("make_tte_input", &make_tte_input, py::arg("traj"),
        "Travel-time instance: origin and destination, arrival time hidden.");
  m.def(
      "pretrain_mask",
      [](const Trajectory& traj, std::uint64_t seed) {
        Rng rng(seed);
        return pretrain_mask(traj, rng);
      },
      py::arg("traj"), py::arg("seed"),
      "Span-masked pretraining instance drawn from the given seed.");
  m.def("true_travel_time_min", &true_travel_time_min, py::arg("inst"));
  m.def("linear_interp_baseline", &linear_interp_baseline, py::arg("inst"),
        "Index-space linear interpolation at hidden positions.");

  m.def(
      "init_params",
      [](const ModelConfig& cfg, std::uint64_t seed) { return build_params<double>(cfg, seed); },
      py::arg("config"), py::arg("seed"), "Fresh parameter tensors for the given model shape.");
  m.def("run_training",
        [](const ExperimentConfig& cfg, const RegionContext& ctx, const DatasetSplit& data) {
          return run_training(cfg, ctx, data);
        },
        py::arg("config"), py::arg("context"), py::arg("data"),
        "Trains from a fresh initialization; returns final and best parameters.");
  m.def("finetune", &finetune, py::arg("config"), py::arg("context"), py::arg("data"),
        py::arg("checkpoint"),
        "Warm-starts from a checkpoint; epochs=0 returns its parameters verbatim.");
  m.def(
      "predict",
      [](const ParamStore<double>& params, const ModelConfig& cfg, const TaskInstance& inst,
         const RegionContext& ctx) { return predict(params, cfg, inst, ctx); },
      py::arg("params"), py::arg("config"), py::arg("instance"), py::arg("context"),
      "Eval-mode forward pass; one prediction per real point.");
  m.def("evaluate", &evaluate, py::arg("config"), py::arg("checkpoint"), py::arg("context"),
        py::arg("test"), py::arg("dataset_name"),
        "Task metrics plus expert routing statistics over a test set.");

  m.def("save_checkpoint", &save_checkpoint, py::arg("path"), py::arg("config"),
        py::arg("params"));
  m.def("load_checkpoint", &load_checkpoint, py::arg("path"));
  m.def("params_sha256", &params_sha256, py::arg("params"),
        "Equal hashes mean byte-identical parameters.");
}
