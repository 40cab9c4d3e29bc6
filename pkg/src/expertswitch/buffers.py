"""Fixed-capacity uniform subsampling of a stream via random priorities.

Each offered item gets an i.i.d. standard-normal priority and the buffer keeps
the ``capacity`` highest priorities seen so far, which is a uniform random
subset of everything offered.
"""
from __future__ import annotations

import heapq
import io
import struct
from pathlib import Path
from typing import Any, Optional

import numpy as np


class ReservoirBuffer:
    def __init__(self, capacity: int, seed=None):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = int(capacity)
        self.rng = np.random.default_rng(seed)
        # min-heap of (priority, -insertion index, payload); among equal
        # priorities the most recent offer is evicted first
        self._heap: list[tuple[float, int, Any]] = []
        self._offered = 0

    def __len__(self) -> int:
        return len(self._heap)

    @property
    def offered(self) -> int:
        return self._offered

    def offer(self, payload, priority: Optional[float] = None) -> bool:
        """Insert ``payload``; evict the lowest priority if over capacity.

        Returns True when the payload is still stored afterwards.
        """
        if priority is None:
            priority = float(self.rng.standard_normal())
        entry = (float(priority), -self._offered, payload)
        self._offered += 1
        if self.capacity == 0:
            return False
        if len(self._heap) < self.capacity:
            heapq.heappush(self._heap, entry)
            return True
        if entry[:2] <= self._heap[0][:2]:
            return False
        heapq.heapreplace(self._heap, entry)
        return True

    def offer_many(self, payloads, priorities=None) -> np.ndarray:
        if priorities is None:
            priorities = self.rng.standard_normal(len(payloads))
        return np.array([self.offer(p, float(q)) for p, q in zip(payloads, priorities)], dtype=bool)

    def drain(self) -> list:
        """Stored payloads, highest priority first. The buffer is not modified."""
        return [e[2] for e in sorted(self._heap, reverse=True, key=lambda e: e[:2])]

    def entries(self) -> list[tuple[float, Any]]:
        return [(e[0], e[2]) for e in sorted(self._heap, reverse=True, key=lambda e: e[:2])]

    def min_priority(self) -> Optional[float]:
        return self._heap[0][0] if self._heap else None

    def truncated(self, capacity: int) -> "ReservoirBuffer":
        """Buffer holding what a ``capacity``-sized buffer would hold had it
        seen the same offers with the same priorities."""
        if capacity > self.capacity:
            raise ValueError("can only truncate to a smaller capacity")
        out = ReservoirBuffer(capacity)
        out._offered = self._offered
        keep = sorted(self._heap, reverse=True, key=lambda e: e[:2])[:capacity]
        out._heap = list(keep)
        heapq.heapify(out._heap)
        return out


def stack_samples(samples) -> tuple[np.ndarray, np.ndarray]:
    """Turn a list of (x, label) payloads into stacked arrays."""
    if not samples:
        raise ValueError("no samples")
    xs = np.stack([np.asarray(s[0]) for s in samples])
    ys = np.array([int(s[1]) for s in samples], dtype=np.int64)
    return xs, ys


def dump_buffer(buf: ReservoirBuffer) -> bytes:
    """Snapshot: capacity u32 | count u32 | per entry: priority f32 | ndim u32 |
    dims u32... | f32 data | label u32. Payloads must be (array, int) pairs."""
    out = io.BytesIO()
    entries = buf.entries()
    out.write(struct.pack("<II", buf.capacity, len(entries)))
    for priority, (x, label) in entries:
        x = np.asarray(x, dtype="<f4")
        out.write(struct.pack("<fI", priority, x.ndim))
        out.write(struct.pack(f"<{x.ndim}I", *x.shape))
        out.write(x.tobytes())
        out.write(struct.pack("<I", int(label)))
    return out.getvalue()


def load_buffer(data: bytes, seed=None) -> ReservoirBuffer:
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise ValueError("truncated buffer snapshot")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    capacity, count = take("<II")
    if count > capacity:
        raise ValueError("snapshot holds more entries than its capacity")
    buf = ReservoirBuffer(capacity, seed=seed)
    for _ in range(count):
        priority, ndim = take("<fI")
        shape = take(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        if pos + 4 * n > len(data):
            raise ValueError("truncated buffer snapshot")
        x = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
        (label,) = take("<I")
        buf.offer((x, label), priority)
    if pos != len(data):
        raise ValueError("trailing bytes after buffer snapshot")
    return buf


def save_buffer(buf: ReservoirBuffer, path) -> None:
    Path(path).write_bytes(dump_buffer(buf))


def read_buffer(path, seed=None) -> ReservoirBuffer:
    return load_buffer(Path(path).read_bytes(), seed=seed)
