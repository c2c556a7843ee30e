"""Query-based knowledge transfer simulator (C++ core)."""

from ._core import (
    CheckpointError,
    ConfigError,
    DataError,
    Model,
    NoCompetentTeacherError,
    average_accuracy,
    build_mask,
    canonical_config,
    config_hash,
    forgetting,
    generate_synthetic,
    load_model,
    make_mlp,
    probe,
    query_acc_gain,
    run_experiment,
    uniform_accuracy,
)

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DataError",
    "Model",
    "NoCompetentTeacherError",
    "average_accuracy",
    "build_mask",
    "canonical_config",
    "config_hash",
    "forgetting",
    "generate_synthetic",
    "load_model",
    "make_mlp",
    "probe",
    "query_acc_gain",
    "run_experiment",
    "uniform_accuracy",
]
