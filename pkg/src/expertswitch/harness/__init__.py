from .config import ExperimentConfig
from .data import FormatError, load_idx, load_mnist
from .evaluate import AccuracyMatrix, acc_from_log, evaluate
from .experiment import (ExperimentResult, StageError, evaluate_checkpoint, load_checkpoint, run_experiment,
                         run_sweep, sweep_prune_capacity)
from .streams import ConfigError, StreamSpec, TaskStream, build_stream

__all__ = [
    "AccuracyMatrix", "ConfigError", "ExperimentConfig", "ExperimentResult", "FormatError", "StageError",
    "StreamSpec", "TaskStream", "acc_from_log", "build_stream", "evaluate", "evaluate_checkpoint", "load_checkpoint",
    "load_idx", "load_mnist",
    "run_experiment", "run_sweep", "sweep_prune_capacity",
]
