"""Trajectory learning: rotary-attention encoder with sparse expert routing.

The heavy lifting lives in the compiled extension; this package re-exports
its surface under a stable name. Installed wheels carry the extension inside
the package; in a plain CMake build tree it sits next to the package on
PYTHONPATH instead.
"""

try:
    from . import _transfertraj as _ext
except ImportError:
    import _transfertraj as _ext

__all__ = [
    "EARTH_RADIUS_M",
    "Checkpoint",
    "DatasetSplit",
    "EpochLog",
    "EvalReport",
    "ExperimentConfig",
    "GateStats",
    "GeoPoint",
    "MaskKind",
    "MetricRow",
    "ModelConfig",
    "ParamStore",
    "Poi",
    "PointPrediction",
    "RegionContext",
    "RoadSegment",
    "SynthRegion",
    "SynthRegionSpec",
    "TaskInstance",
    "TaskKind",
    "TrainResult",
    "Trajectory",
    "TrajectoryPoint",
    "TransferMode",
    "TransferTrajError",
    "chronological_split",
    "evaluate",
    "filter_lengths",
    "finetune",
    "generate_region",
    "haversine_m",
    "init_params",
    "linear_interp_baseline",
    "load_checkpoint",
    "make_context",
    "make_tp_input",
    "make_tr_input",
    "make_tte_input",
    "params_sha256",
    "predict",
    "pretrain_mask",
    "run_training",
    "save_checkpoint",
    "three_hop_resample",
    "translate_region",
    "true_travel_time_min",
]

for _name in __all__:
    globals()[_name] = getattr(_ext, _name)
del _name, _ext
