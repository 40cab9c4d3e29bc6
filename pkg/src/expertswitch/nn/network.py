from __future__ import annotations

import copy
from typing import Sequence

import numpy as np

from .layers import LAYER_NAMES, Conv2d, Dense, Flatten, Layer, MaxPool2d, ReLU, ShapeError, Sigmoid


INIT_GAIN = float(np.sqrt(1.0 / 3.0))


class Network:
    """Sequential stack of layers ending in a sigmoid head.

    The training loss is softmax cross-entropy evaluated on the sigmoid
    outputs, which bounds the per-sample loss to [log(1 + (K-1)/e), log(1 + (K-1)e)]
    for K classes and keeps the loss from spiking when a fresh task arrives.
    """

    def __init__(self, layers: Sequence[Layer], input_shape: Sequence[int], dtype=np.float32):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.dtype = np.dtype(dtype)
        if not self.layers or not isinstance(self.layers[-1], Sigmoid):
            raise ValueError("network must end with a sigmoid layer")
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        if len(shape) != 1:
            raise ShapeError(f"network output must be flat, got per-sample shape {shape}")
        self.output_dim = shape[0]
        # layer index -> boolean keep-mask over that layer's weight
        self.masks: dict[int, np.ndarray] = {}

    def init_params(self, rng: np.random.Generator, gain: float = INIT_GAIN) -> "Network":
        """Kaiming-uniform fan-in weights, bound ``gain * sqrt(3 / fan_in)``, and zero biases.

        The default gain gives the ``1/sqrt(fan_in)`` bound. The full ReLU gain
        (sqrt 2) saturates the sigmoid head under lr 0.1 with Nesterov momentum
        and leaves many fresh experts stuck at a constant loss.
        """
        for layer in self.layers:
            if layer.has_params:
                bound = gain * np.sqrt(3.0 / layer.fan_in)
                layer.weight[...] = rng.uniform(-bound, bound, size=layer.weight.shape)
                layer.bias[...] = 0
        self.apply_masks()
        return self

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"expected batch of shape (N, {self.input_shape}), got {x.shape}")
        return x.astype(self.dtype, copy=False)

    def forward(self, x: np.ndarray) -> np.ndarray:
        out = self._check_input(x)
        for layer in self.layers:
            out = layer.forward(out)
        return out

    __call__ = forward

    def _check_labels(self, y) -> np.ndarray:
        y = np.asarray(y)
        if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
            raise ValueError("labels must be a 1-d integer array")
        if y.size and (y.min() < 0 or y.max() >= self.output_dim):
            raise ValueError(f"labels must lie in [0, {self.output_dim})")
        return y

    def loss(self, x: np.ndarray, y) -> float:
        """Mean loss on a batch, forward pass only."""
        y = self._check_labels(y)
        scores = self.forward(x)
        if len(y) != len(scores):
            raise ShapeError("batch and label counts differ")
        return float(_softmax_xent(scores, y)[0])

    def loss_and_grads(self, x: np.ndarray, y) -> tuple[float, list[np.ndarray]]:
        """Mean loss and gradients aligned with ``self.params()``.

        The returned gradient arrays are the layers' own buffers and are
        overwritten by the next call.
        """
        y = self._check_labels(y)
        scores = self.forward(x)
        if len(y) != len(scores):
            raise ShapeError("batch and label counts differ")
        loss, grad = _softmax_xent(scores, y)
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return float(loss), self.grads()

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def grads(self) -> list[np.ndarray]:
        return [g for layer in self.layers for g in layer.grads()]

    def param_masks(self) -> list[np.ndarray | None]:
        """Keep-masks aligned with ``params()``; ``None`` means unmasked."""
        out = []
        for i, layer in enumerate(self.layers):
            if layer.has_params:
                out.append(self.masks.get(i))
                out.append(None)
        return out

    def apply_masks(self) -> None:
        for i, mask in self.masks.items():
            self.layers[i].weight *= mask

    def weighted_layers(self) -> list[tuple[int, Layer]]:
        return [(i, layer) for i, layer in enumerate(self.layers) if layer.has_params]

    def param_count(self, surviving_only: bool = False) -> int:
        total = 0
        for i, layer in self.weighted_layers():
            if surviving_only and i in self.masks:
                total += int(self.masks[i].sum())
            else:
                total += layer.weight.size
            total += layer.bias.size
        return total

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def describe(self) -> list[tuple[str, tuple[int, ...]]]:
        names = {v: k for k, v in LAYER_NAMES.items()}
        return [(names[type(layer)], layer.dims()) for layer in self.layers]


def _softmax_xent(scores: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = len(y)
    shifted = scores - scores.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    loss = np.mean(np.log(total[:, 0]) - shifted[rows, y])
    grad = exp / total
    grad[rows, y] -= 1
    grad /= n
    return loss, grad.astype(scores.dtype, copy=False)


def mlp(input_dim: int, hidden: Sequence[int], output_dim: int, dtype=np.float32) -> Network:
    layers: list[Layer] = []
    prev = input_dim
    for width in hidden:
        layers += [Dense(prev, width, dtype=dtype), ReLU()]
        prev = width
    layers += [Dense(prev, output_dim, dtype=dtype), Sigmoid()]
    return Network(layers, (input_dim,), dtype=dtype)


def conv_expert(input_shape: Sequence[int], output_dim: int, channels=(16, 32), hidden: int = 100,
                kernel: int = 3, dtype=np.float32) -> Network:
    """conv-relu-pool x2, then flatten-dense-relu-dense-sigmoid."""
    c, h, w = input_shape
    c1, c2 = channels
    layers: list[Layer] = [
        Conv2d(c, c1, kernel, dtype=dtype), ReLU(), MaxPool2d(2),
        Conv2d(c1, c2, kernel, dtype=dtype), ReLU(), MaxPool2d(2),
        Flatten(),
    ]
    shape = tuple(input_shape)
    for layer in layers:
        shape = layer.out_shape(shape)
    layers += [Dense(shape[0], hidden, dtype=dtype), ReLU(), Dense(hidden, output_dim, dtype=dtype), Sigmoid()]
    return Network(layers, input_shape, dtype=dtype)
