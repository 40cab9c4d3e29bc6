"""Task streams: ordered segments of labelled batches whose task identity is
kept on the evaluation side only."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .data import load_mnist

KINDS = ("split_mnist", "permuted_mnist", "split_synthetic", "custom_sequence")


class ConfigError(ValueError):
    pass


class Task:
    """One stationary distribution. Local labels are 0..k-1 and ``classes[k]``
    is the global class of local label k."""

    index: int
    classes: tuple[int, ...]
    input_shape: tuple[int, ...]

    def train_data(self, occurrence: int) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def test_data(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def transform(self, x: np.ndarray) -> np.ndarray:
        return x

    @property
    def n_classes(self) -> int:
        return len(self.classes)


class ArrayTask(Task):
    def __init__(self, index, classes, train_x, train_y, test_x, test_y, perm=None):
        self.index = index
        self.classes = tuple(int(c) for c in classes)
        self._train = (train_x, train_y)
        self._test = (test_x, test_y)
        self.perm = None if perm is None else np.asarray(perm)
        self.input_shape = tuple(train_x.shape[1:])

    def train_data(self, occurrence):
        return self._train

    def test_data(self):
        x, y = self._test
        return self.transform(x), y

    def transform(self, x):
        if self.perm is None:
            return x
        flat = x.reshape(len(x), -1)[:, self.perm]
        return flat.reshape(x.shape)


class SyntheticTask(Task):
    """Gaussian clusters, one per class, around task-specific centres.

    Every occurrence of the task in a stream draws fresh training samples
    from the same distribution.
    """

    def __init__(self, index, classes, means, noise, n_train, n_test, seed, label_noise=0.0):
        self.index = index
        self.classes = tuple(int(c) for c in classes)
        self.means = np.asarray(means, dtype=np.float64)
        self.noise = float(noise)
        self.label_noise = float(label_noise)
        self.n_train = int(n_train)
        self.n_test = int(n_test)
        self.seed = seed
        self.input_shape = (self.means.shape[1],)

    def _sample(self, n, stream_id):
        rng = np.random.default_rng([self.seed, self.index, stream_id])
        k, d = self.means.shape
        y = rng.integers(0, k, size=n)
        x = self.means[y] + self.noise * rng.standard_normal((n, d))
        if self.label_noise:
            flip = rng.random(n) < self.label_noise
            y = np.where(flip, rng.integers(0, k, size=n), y)
        return x.astype(np.float32), y.astype(np.int64)

    def train_data(self, occurrence):
        return self._sample(self.n_train, occurrence + 1)

    def test_data(self):
        return self._sample(self.n_test, 0)


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    task: int
    segment: int
    epoch: int


@dataclass
class TaskStream:
    tasks: list[Task]
    order: list[int]
    epochs: int = 10
    batch_size: int = 128
    seed: int = 0
    _data_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.order:
            raise ConfigError("stream has no segments")
        for t in self.order:
            if not 0 <= t < len(self.tasks):
                raise ConfigError(f"segment refers to unknown task {t}")

    def _segment_data(self, segment: int):
        task = self.tasks[self.order[segment]]
        occurrence = self.order[:segment].count(task.index)
        return task.train_data(occurrence)

    def segment_lengths(self) -> list[int]:
        out = []
        for s in range(len(self.order)):
            n = len(self._segment_data(s)[1])
            out.append((n // self.batch_size) * self.epochs)
        return out

    def __len__(self) -> int:
        return sum(self.segment_lengths())

    def batches(self) -> Iterator[Batch]:
        for segment, task_index in enumerate(self.order):
            task = self.tasks[task_index]
            x, y = self._segment_data(segment)
            rng = np.random.default_rng([self.seed, segment])
            n_full = len(y) // self.batch_size
            for epoch in range(self.epochs):
                perm = rng.permutation(len(y))
                for b in range(n_full):
                    idx = perm[b * self.batch_size:(b + 1) * self.batch_size]
                    yield Batch(task.transform(x[idx]), y[idx], task_index, segment, epoch)

    def training_batches(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """What the learner gets to see: inputs and local labels, nothing else."""
        for batch in self.batches():
            yield batch.x, batch.y

    def label_maps(self) -> dict[int, tuple[int, ...]]:
        return {t.index: t.classes for t in self.tasks}

    def distinct_tasks(self) -> list[int]:
        seen = []
        for t in self.order:
            if t not in seen:
                seen.append(t)
        return seen


@dataclass
class StreamSpec:
    kind: str = "split_synthetic"
    task_classes: Optional[list[list[int]]] = None
    n_tasks: int = 5
    order: Optional[list[int]] = None
    base_kind: str = "split_synthetic"
    epochs: int = 10
    batch_size: int = 128
    seed: int = 0
    data_dir: Optional[str] = None
    classes_per_task: int = 2
    synthetic_dim: int = 20
    synthetic_separation: float = 4.0
    synthetic_noise: float = 1.0
    synthetic_label_noise: float = 0.0
    synthetic_train: int = 2560
    synthetic_test: int = 1000


def default_pairs(n_tasks: int, per_task: int = 2) -> list[list[int]]:
    return [list(range(t * per_task, (t + 1) * per_task)) for t in range(n_tasks)]


def check_disjoint(groups: Sequence[Sequence[int]]) -> None:
    seen: set[int] = set()
    for g in groups:
        if len(set(g)) != len(g):
            raise ConfigError(f"class set {list(g)} repeats a class")
        overlap = seen.intersection(g)
        if overlap:
            raise ConfigError(f"class sets overlap on {sorted(overlap)}")
        seen.update(g)


def synthetic_tasks(spec: StreamSpec) -> list[Task]:
    groups = spec.task_classes or default_pairs(spec.n_tasks, spec.classes_per_task)
    check_disjoint(groups)
    rng = np.random.default_rng([spec.seed, 7919])
    d = spec.synthetic_dim
    n_classes = sum(len(g) for g in groups)
    if n_classes <= d:
        # mutually orthogonal class directions, so no two tasks share a decision rule
        q, _ = np.linalg.qr(rng.standard_normal((d, n_classes)))
        all_dirs = q.T
    else:
        all_dirs = rng.standard_normal((n_classes, d))
        all_dirs /= np.linalg.norm(all_dirs, axis=1, keepdims=True)
    tasks = []
    start = 0
    for t, classes in enumerate(groups):
        dirs = all_dirs[start:start + len(classes)]
        start += len(classes)
        means = spec.synthetic_separation * dirs
        tasks.append(SyntheticTask(t, classes, means, spec.synthetic_noise, spec.synthetic_train,
                                   spec.synthetic_test, spec.seed, spec.synthetic_label_noise))
    return tasks


def split_tasks(groups, train, test) -> list[Task]:
    check_disjoint(groups)
    (xtr, ytr), (xte, yte) = train, test
    tasks = []
    for t, classes in enumerate(groups):
        lookup = {c: k for k, c in enumerate(classes)}
        mtr = np.isin(ytr, classes)
        mte = np.isin(yte, classes)
        local_tr = np.array([lookup[c] for c in ytr[mtr]], dtype=np.int64)
        local_te = np.array([lookup[c] for c in yte[mte]], dtype=np.int64)
        tasks.append(ArrayTask(t, classes, xtr[mtr], local_tr, xte[mte], local_te))
    return tasks


def permuted_tasks(n_tasks, train, test, seed) -> list[Task]:
    (xtr, ytr), (xte, yte) = train, test
    n_pix = int(np.prod(xtr.shape[1:]))
    rng = np.random.default_rng([seed, 104729])
    classes = tuple(range(int(ytr.max()) + 1))
    return [ArrayTask(t, classes, xtr, ytr, xte, yte, perm=rng.permutation(n_pix)) for t in range(n_tasks)]


def build_stream(spec: StreamSpec, data=None) -> TaskStream:
    """``data`` is ``((train_x, train_y), (test_x, test_y))`` for the MNIST
    kinds; when omitted it is read from ``spec.data_dir``."""
    kind = spec.kind
    if kind not in KINDS:
        raise ConfigError(f"unknown stream kind {kind!r}, expected one of {KINDS}")
    if kind == "custom_sequence":
        if not spec.order:
            raise ConfigError("custom_sequence needs an explicit order")
        kind = spec.base_kind
        if kind not in KINDS or kind == "custom_sequence":
            raise ConfigError(f"bad base_kind {kind!r}")
    if kind == "split_synthetic":
        tasks = synthetic_tasks(spec)
    else:
        if data is None:
            if not spec.data_dir:
                raise ConfigError(f"{kind} needs data_dir")
            data = (load_mnist(spec.data_dir, "train"), load_mnist(spec.data_dir, "test"))
        if kind == "split_mnist":
            groups = spec.task_classes or default_pairs(spec.n_tasks, spec.classes_per_task)
            tasks = split_tasks(groups, *data)
        else:
            tasks = permuted_tasks(spec.n_tasks, *data, seed=spec.seed)
    order = list(spec.order) if spec.order else list(range(len(tasks)))
    return TaskStream(tasks, order, epochs=spec.epochs, batch_size=spec.batch_size, seed=spec.seed)
