from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import Network


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    batch_size: int = 128

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def sgd_step(net: Network, grads: list[np.ndarray], cfg: SgdConfig,
             velocity: list[np.ndarray] | None = None) -> list[np.ndarray]:
    """Apply one SGD update to ``net`` in place and return the new velocity.

    Weight decay is added to the gradient before momentum. With Nesterov the
    step direction is ``d + momentum * v`` where ``v = momentum * v + d``.
    Gradients of pruned weights are zeroed so masks survive training.
    """
    params = net.params()
    if len(grads) != len(params):
        raise ValueError(f"expected {len(params)} gradient arrays, got {len(grads)}")
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    masks = net.param_masks()
    lr = net.dtype.type(cfg.learning_rate)
    mu = net.dtype.type(cfg.momentum)
    wd = net.dtype.type(cfg.weight_decay)
    for p, g, v, m in zip(params, grads, velocity, masks):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        d = g + wd * p if cfg.weight_decay else g.copy()
        if m is not None:
            d *= m
        if cfg.momentum:
            v *= mu
            v += d
            d = d + mu * v if cfg.nesterov else v
        p -= lr * d
        if m is not None:
            p *= m
    return velocity


class Sgd:
    """Holds the per-parameter velocity for one network."""

    def __init__(self, net: Network, cfg: SgdConfig):
        self.net = net
        self.cfg = cfg
        self.velocity: list[np.ndarray] | None = None

    def step(self, grads: list[np.ndarray]) -> None:
        self.velocity = sgd_step(self.net, grads, self.cfg, self.velocity)

    def train_batch(self, x, y) -> float:
        loss, grads = self.net.loss_and_grads(x, y)
        self.step(grads)
        return loss


def fit(net: Network, x: np.ndarray, y: np.ndarray, cfg: SgdConfig, epochs: int,
        rng: np.random.Generator) -> list[float]:
    """Shuffled minibatch training over an in-memory dataset; returns per-epoch mean loss.

    The last partial batch is kept so that small buffers still contribute
    every sample.
    """
    opt = Sgd(net, cfg)
    history = []
    n = len(x)
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            losses.append(opt.train_batch(x[idx], y[idx]))
        history.append(float(np.mean(losses)) if losses else float("nan"))
    return history
