"""Dataset IO, the end-to-end runner, evaluation and the command line."""

from .dataset import (
    Dataset,
    DatasetError,
    EncRecord,
    GtRecord,
    ImuRecord,
    ScanRecord,
    Trajectory,
    read_dataset,
    read_trajectory,
    write_dataset,
    write_trajectory,
)
from .evaluate import ErrorReport, EvaluationError, evaluate
from .runner import MODES, RunConfig, RunResult, parse_config, run_slam

__all__ = [
    "Dataset",
    "DatasetError",
    "EncRecord",
    "ErrorReport",
    "EvaluationError",
    "GtRecord",
    "ImuRecord",
    "MODES",
    "RunConfig",
    "RunResult",
    "ScanRecord",
    "Trajectory",
    "evaluate",
    "parse_config",
    "read_dataset",
    "read_trajectory",
    "run_slam",
    "write_dataset",
    "write_trajectory",
]
