"""Little-endian binary network checkpoints.

Layout::

    b"TAME" | version u32 | layer count u32 | input ndim u32 | input dims u32...
    per layer: tag u8 | dim count u8 | dims u32...
    f32 payload: weight then bias for every parametrised layer, in layer order
    mask section: mask count u32, then per mask: layer index u32 | byte count u32 | packed bits

Version 1 files carry an empty mask section (count 0); pruned networks list
one bit-packed keep-mask per pruned layer.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .layers import make_layer
from .network import Network

MAGIC = b"TAME"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dump_network(net: Network) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(net.layers)))
    buf.write(struct.pack("<I", len(net.input_shape)))
    buf.write(struct.pack(f"<{len(net.input_shape)}I", *net.input_shape))
    for layer in net.layers:
        dims = layer.dims()
        buf.write(struct.pack("<BB", layer.tag, len(dims)))
        buf.write(struct.pack(f"<{len(dims)}I", *dims))
    for p in net.params():
        buf.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
    buf.write(struct.pack("<I", len(net.masks)))
    for idx in sorted(net.masks):
        bits = np.packbits(net.masks[idx].astype(np.uint8).ravel())
        buf.write(struct.pack("<II", idx, bits.size))
        buf.write(bits.tobytes())
    return buf.getvalue()


def load_network(data: bytes) -> Network:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = view[pos:pos + n]
        pos += n
        return out

    def u32(count=1):
        vals = struct.unpack(f"<{count}I", take(4 * count))
        return vals if count != 1 else vals[0]

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad magic")
    version = u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    n_layers = u32()
    ndim = u32()
    input_shape = tuple(u32(ndim)) if ndim != 1 else (u32(),)
    layers = []
    for _ in range(n_layers):
        tag, n_dims = struct.unpack("<BB", take(2))
        dims = struct.unpack(f"<{n_dims}I", take(4 * n_dims))
        try:
            layers.append(make_layer(tag, dims))
        except (ValueError, TypeError) as exc:
            raise CheckpointError(str(exc)) from exc
    net = Network(layers, input_shape)
    for p in net.params():
        raw = take(4 * p.size)
        p[...] = np.frombuffer(raw, dtype="<f4").reshape(p.shape)
    n_masks = u32()
    for _ in range(n_masks):
        idx, n_bytes = u32(2)
        if idx >= len(net.layers) or not net.layers[idx].has_params:
            raise CheckpointError(f"mask for non-weighted layer {idx}")
        weight = net.layers[idx].weight
        bits = np.frombuffer(take(n_bytes), dtype=np.uint8)
        mask = np.unpackbits(bits)[:weight.size].astype(bool).reshape(weight.shape)
        net.masks[idx] = mask
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint")
    return net


def save_network(net: Network, path) -> None:
    Path(path).write_bytes(dump_network(net))


def read_network(path) -> Network:
    return load_network(Path(path).read_bytes())
