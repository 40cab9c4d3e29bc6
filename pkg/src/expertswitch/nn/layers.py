"""Layer primitives with explicit forward/backward passes.

Every layer caches what it needs for ``backward`` during ``forward``; a layer
is therefore not reentrant, call ``backward`` right after the matching
``forward``. Activations are NCHW for image tensors and (N, features) for
dense tensors.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Input tensor does not fit what the layer expects."""


class Layer:
    tag = 0
    has_params = False

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def out_shape(self, in_shape: tuple) -> tuple:
        """Per-sample output shape for a per-sample input shape."""
        return in_shape

    def dims(self) -> tuple[int, ...]:
        return ()

    def params(self) -> list[np.ndarray]:
        return []

    def grads(self) -> list[np.ndarray]:
        return []


class Dense(Layer):
    tag = 1
    has_params = True

    def __init__(self, in_features: int, out_features: int, dtype=np.float32):
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.weight = np.zeros((self.out_features, self.in_features), dtype=dtype)
        self.bias = np.zeros(self.out_features, dtype=dtype)
        self.dweight = np.zeros_like(self.weight)
        self.dbias = np.zeros_like(self.bias)
        self._x = None

    @property
    def fan_in(self) -> int:
        return self.in_features

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"dense expects (N, {self.in_features}), got {x.shape}")
        self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, grad):
        x = self._x
        self.dweight[...] = grad.T @ x
        self.dbias[...] = grad.sum(axis=0)
        return grad @ self.weight

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(f"dense expects ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def dims(self):
        return (self.in_features, self.out_features)

    def params(self):
        return [self.weight, self.bias]

    def grads(self):
        return [self.dweight, self.dbias]


class Conv2d(Layer):
    """Valid (unpadded) stride-1 convolution computed through im2col."""

    tag = 2
    has_params = True

    def __init__(self, in_channels: int, out_channels: int, kernel: int, dtype=np.float32):
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel = int(kernel)
        k = self.kernel
        self.weight = np.zeros((self.out_channels, self.in_channels, k, k), dtype=dtype)
        self.bias = np.zeros(self.out_channels, dtype=dtype)
        self.dweight = np.zeros_like(self.weight)
        self.dbias = np.zeros_like(self.bias)
        self._cols = None
        self._in_shape = None

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel * self.kernel

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"conv2d expects (N, {self.in_channels}, H, W), got {x.shape}")
        n, c, h, w = x.shape
        k = self.kernel
        if h < k or w < k:
            raise ShapeError(f"input {h}x{w} smaller than kernel {k}")
        ho, wo = h - k + 1, w - k + 1
        win = sliding_window_view(x, (k, k), axis=(2, 3))  # (N, C, Ho, Wo, k, k)
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        self._cols = cols
        self._in_shape = x.shape
        out = cols @ self.weight.reshape(self.out_channels, -1).T + self.bias
        return out.reshape(n, ho, wo, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, grad):
        n, c, h, w = self._in_shape
        k = self.kernel
        ho, wo = h - k + 1, w - k + 1
        g2 = grad.transpose(0, 2, 3, 1).reshape(n * ho * wo, self.out_channels)
        self.dweight[...] = (g2.T @ self._cols).reshape(self.weight.shape)
        self.dbias[...] = g2.sum(axis=0)
        dcols = (g2 @ self.weight.reshape(self.out_channels, -1)).reshape(n, ho, wo, c, k, k)
        dx = np.zeros(self._in_shape, dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dx

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ShapeError(f"conv2d expects ({self.in_channels}, H, W), got {in_shape}")
        _, h, w = in_shape
        return (self.out_channels, h - self.kernel + 1, w - self.kernel + 1)

    def dims(self):
        return (self.in_channels, self.out_channels, self.kernel)

    def params(self):
        return [self.weight, self.bias]

    def grads(self):
        return [self.dweight, self.dbias]


class ReLU(Layer):
    tag = 3

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        return grad * self._mask


class MaxPool2d(Layer):
    """Non-overlapping k x k max pooling; trailing rows/cols that do not fill a
    window are dropped."""

    tag = 4

    def __init__(self, kernel: int = 2):
        self.kernel = int(kernel)

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"maxpool2d expects NCHW input, got {x.shape}")
        k = self.kernel
        n, c, h, w = x.shape
        ho, wo = h // k, w // k
        xc = x[:, :, :ho * k, :wo * k]
        blocks = xc.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
        idx = blocks.argmax(axis=-1)
        self._idx = idx
        self._in_shape = x.shape
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        k = self.kernel
        n, c, h, w = self._in_shape
        ho, wo = h // k, w // k
        blocks = np.zeros((n, c, ho, wo, k * k), dtype=grad.dtype)
        np.put_along_axis(blocks, self._idx[..., None], grad[..., None], axis=-1)
        dx = np.zeros(self._in_shape, dtype=grad.dtype)
        dx[:, :, :ho * k, :wo * k] = (
            blocks.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
        )
        return dx

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"maxpool2d expects (C, H, W), got {in_shape}")
        c, h, w = in_shape
        return (c, h // self.kernel, w // self.kernel)

    def dims(self):
        return (self.kernel,)


class Flatten(Layer):
    tag = 5

    def forward(self, x):
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._in_shape)

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


class Sigmoid(Layer):
    tag = 6

    def forward(self, x):
        # split by sign so exp never overflows
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self._out = out
        return out

    def backward(self, grad):
        s = self._out
        return grad * s * (1.0 - s)


LAYER_TYPES = {cls.tag: cls for cls in (Dense, Conv2d, ReLU, MaxPool2d, Flatten, Sigmoid)}
LAYER_NAMES = {
    "dense": Dense,
    "conv2d": Conv2d,
    "relu": ReLU,
    "maxpool2d": MaxPool2d,
    "flatten": Flatten,
    "sigmoid": Sigmoid,
}


def make_layer(tag: int, dims: tuple[int, ...], dtype=np.float32) -> Layer:
    cls = LAYER_TYPES.get(tag)
    if cls is None:
        raise ValueError(f"unknown layer tag {tag}")
    if cls.has_params:
        return cls(*dims, dtype=dtype)
    return cls(*dims)
