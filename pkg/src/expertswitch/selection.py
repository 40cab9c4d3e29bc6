"""Selector training, magnitude pruning with masked retraining, and routed
prediction."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .buffers import ReservoirBuffer, stack_samples
from .nn import Network, SgdConfig, fit

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PruneConfig:
    expert_rate: float = 0.98
    selector_rate: float = 0.50
    retrain_epochs: int = 30
    # momentum is not given for retraining; the training schedule's Nesterov 0.9 is reused
    retrain_sgd: SgdConfig = SgdConfig(learning_rate=0.1, momentum=0.9, nesterov=True,
                                       weight_decay=1e-4, batch_size=128)

    def __post_init__(self):
        for rate in (self.expert_rate, self.selector_rate):
            if not 0 <= rate < 1:
                raise ValueError("pruning rates must be in [0, 1)")
        if self.retrain_epochs < 0:
            raise ValueError("retrain_epochs must be >= 0")


def surviving_count(n: int, rate: float) -> int:
    """Weights kept when pruning a fraction ``rate`` of ``n``: ceil(n * (1 - rate))."""
    # round away float noise such as 100 * (1 - 0.98) == 2.0000000000000018
    return min(n, math.ceil(round(n * (1.0 - rate), 9)))


def prune_l1(net: Network, rate: float) -> Network:
    """Copy of ``net`` with the smallest-magnitude weights of every weighted
    layer zeroed and masked. Biases are left alone."""
    if not 0 <= rate < 1:
        raise ValueError("rate must be in [0, 1)")
    out = net.copy()
    if rate == 0:
        return out
    for i, layer in out.weighted_layers():
        w = layer.weight
        keep = surviving_count(w.size, rate)
        order = np.argsort(np.abs(w).ravel(), kind="stable")
        mask = np.ones(w.size, dtype=bool)
        mask[order[:w.size - keep]] = False
        mask = mask.reshape(w.shape)
        if i in out.masks:
            mask &= out.masks[i]
        out.masks[i] = mask
    out.apply_masks()
    return out


def sparsity(net: Network) -> dict[int, float]:
    return {i: float(np.mean(layer.weight == 0)) for i, layer in net.weighted_layers()}


def retrain_pruned(net: Network, samples: Sequence, cfg: PruneConfig,
                   rng: np.random.Generator) -> Network:
    """Masked SGD on buffered ``(x, label)`` samples. Trains ``net`` in place."""
    if not samples:
        log.warning("empty retraining buffer, keeping pruned weights as they are")
        return net
    x, y = stack_samples(samples)
    fit(net, x, y, cfg.retrain_sgd, cfg.retrain_epochs, rng)
    return net


@dataclass
class Selector:
    net: Network
    n_experts: int

    def route(self, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        return predict_classes(self.net, x, batch_size)


def train_selector(samples: Sequence, n_experts: int, factory: Callable[[int], Network],
                   sgd: SgdConfig, epochs: int, rng: np.random.Generator) -> Selector:
    """Fit a fresh selector on ``(x, expert_id)`` samples."""
    if not samples:
        raise ValueError("selector buffer is empty, cannot train a selector")
    x, ids = stack_samples(samples)
    if ids.min() < 0 or ids.max() >= n_experts:
        raise ValueError(f"expert ids must lie in [0, {n_experts})")
    net = factory(n_experts).init_params(rng)
    if n_experts > 1:
        fit(net, x, ids, sgd, epochs, rng)
    return Selector(net, n_experts)


def prune_and_retrain_selector(selector: Selector, samples: Sequence, cfg: PruneConfig,
                               rng: np.random.Generator) -> Selector:
    net = prune_l1(selector.net, cfg.selector_rate)
    if selector.n_experts > 1:
        retrain_pruned(net, samples, cfg, rng)
    return Selector(net, selector.n_experts)


def predict_classes(net: Network, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    out = np.empty(len(x), dtype=np.int64)
    for start in range(0, len(x), batch_size):
        out[start:start + batch_size] = net.forward(x[start:start + batch_size]).argmax(axis=1)
    return out


def predict(selector: Selector, experts: Sequence[Network], x: np.ndarray,
            label_maps: dict[int, Sequence[int]], batch_size: int = 1024,
            routes: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """Route each sample to an expert and map its local prediction to a global
    class. Returns ``(expert_ids, global_predictions)``; experts without a
    label map predict -1.

    ``routes`` overrides the selector, e.g. with ground-truth routing.
    """
    if routes is None:
        routes = selector.route(x, batch_size)
    preds = np.full(len(x), -1, dtype=np.int64)
    for eid in np.unique(routes):
        idx = np.flatnonzero(routes == eid)
        local = predict_classes(experts[eid], x[idx], batch_size)
        lmap = label_maps.get(int(eid))
        if lmap is not None:
            preds[idx] = np.asarray(lmap)[local]
    return routes, preds


def prune_experts(experts: Sequence[Network], buffers: dict[int, ReservoirBuffer], cfg: PruneConfig,
                  rng: np.random.Generator) -> list[Network]:
    """Prune every expert and retrain it on its own buffer."""
    out = []
    for eid, net in enumerate(experts):
        pruned = prune_l1(net, cfg.expert_rate)
        buf = buffers.get(eid)
        retrain_pruned(pruned, buf.drain() if buf is not None else [], cfg, rng)
        out.append(pruned)
    return out
