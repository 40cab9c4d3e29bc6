"""Loss-based task-switch detection: EWMA smoothing against a mean + 3 sigma
control limit computed over a sliding window of raw batch losses."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional


@dataclass(frozen=True)
class DetectorConfig:
    alpha: float = 0.2
    window_size: int = 100
    min_fill: Optional[int] = None  # defaults to window_size
    sigmas: float = 3.0

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must be in [0, 1]")
        if self.window_size < 2:
            raise ValueError("window_size must be >= 2")
        if self.min_fill is None:
            object.__setattr__(self, "min_fill", self.window_size)
        if not 2 <= self.min_fill <= self.window_size:
            raise ValueError("min_fill must be in [2, window_size]")


def update_smoothed(smoothed: Optional[float], loss: float, alpha: float) -> float:
    """One EWMA step; the first observation initialises the average."""
    if not math.isfinite(loss):
        raise ValueError(f"loss must be finite, got {loss}")
    if loss < 0:
        raise ValueError(f"loss must be non-negative, got {loss}")
    if smoothed is None:
        return float(loss)
    # written as an increment so a constant stream stays exactly constant
    return smoothed + alpha * (loss - smoothed)


def get_threshold(window, min_fill: int = 2, sigmas: float = 3.0) -> Optional[float]:
    """mean + 3 * population std of the window, or None while it holds fewer
    than ``min_fill`` values."""
    n = len(window)
    if n < max(min_fill, 1):
        return None
    # correctly rounded sums: the result does not depend on window order
    mean = math.fsum(window) / n
    var = math.fsum((v - mean) ** 2 for v in window) / n
    return mean + sigmas * math.sqrt(var)


@dataclass
class LossDetector:
    """Detector state owned by one expert: smoothed loss plus raw-loss window."""

    config: DetectorConfig = field(default_factory=DetectorConfig)
    smoothed: Optional[float] = None
    window: deque = None

    def __post_init__(self):
        if self.window is None:
            self.window = deque(maxlen=self.config.window_size)
        elif self.window.maxlen != self.config.window_size:
            self.window = deque(self.window, maxlen=self.config.window_size)

    @property
    def ready(self) -> bool:
        return len(self.window) >= self.config.min_fill

    def threshold(self) -> Optional[float]:
        return get_threshold(self.window, self.config.min_fill, self.config.sigmas)

    def candidate(self, loss: float) -> float:
        """Smoothed value this loss would produce, without committing it."""
        return update_smoothed(self.smoothed, loss, self.config.alpha)

    def observe(self, loss: float) -> float:
        self.smoothed = self.candidate(loss)
        return self.smoothed

    def record(self, loss: float) -> None:
        self.window.append(float(loss))

    def is_deviation(self, value: Optional[float] = None) -> bool:
        value = self.smoothed if value is None else value
        thr = self.threshold()
        if thr is None or value is None:
            return False
        return value > thr

    def accepts(self, loss: float) -> bool:
        """Whether ``loss`` would keep this detector under its control limit."""
        thr = self.threshold()
        if thr is None or self.smoothed is None:
            return False
        return self.candidate(loss) < thr

    def snapshot(self) -> tuple[Optional[float], tuple[float, ...]]:
        return self.smoothed, tuple(self.window)


def is_deviation(smoothed: Optional[float], window, config: DetectorConfig) -> bool:
    if smoothed is None:
        return False
    thr = get_threshold(window, config.min_fill, config.sigmas)
    return thr is not None and smoothed > thr
