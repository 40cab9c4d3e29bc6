"""Task-agnostic continual learning with a pool of loss-switched experts."""
from .buffers import ReservoirBuffer
from .drift import DetectorConfig, LossDetector, get_threshold, is_deviation, update_smoothed
from .experts import ExpertPool, StepReport, run_stream
from .selection import PruneConfig, Selector, predict, prune_l1, retrain_pruned, train_selector

__version__ = "0.1.0"
