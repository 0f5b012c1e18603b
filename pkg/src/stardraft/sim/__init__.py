"""Discrete-event simulator of the star topology."""

from .config import (
    ConfigError,
    ModelAcceptance,
    Sampler,
    SimConfig,
    config_from_dict,
    fixed_config,
    load_config,
)
from .engine import EventKind, InvariantError, IterationRecord, SimEvent, run_sim, to_ticks
from .metrics import (
    RECORD_COLUMNS,
    MetricsError,
    RunMetrics,
    check_record_order,
    check_work_conservation,
    compute_metrics,
    drop_warmup,
    read_records_csv,
    records_to_csv,
    save_metrics_json,
    simulate,
    sweep,
    write_records_csv,
)
from .validate import ValidationReport, validate_against_analytics

__all__ = [
    "ConfigError",
    "EventKind",
    "InvariantError",
    "IterationRecord",
    "MetricsError",
    "ModelAcceptance",
    "RECORD_COLUMNS",
    "RunMetrics",
    "Sampler",
    "SimConfig",
    "SimEvent",
    "ValidationReport",
    "check_record_order",
    "check_work_conservation",
    "compute_metrics",
    "config_from_dict",
    "drop_warmup",
    "fixed_config",
    "load_config",
    "read_records_csv",
    "records_to_csv",
    "run_sim",
    "save_metrics_json",
    "simulate",
    "sweep",
    "to_ticks",
    "validate_against_analytics",
    "write_records_csv",
]
