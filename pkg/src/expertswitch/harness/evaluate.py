"""Test-time evaluation. Task identities are used here, and only here, to
label test sets and to attach a class map to each expert."""
from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..nn import Network
from ..selection import Selector, predict
from .streams import TaskStream


def expert_task_map(active_experts: Sequence[int], batch_tasks: Sequence[int]) -> dict[int, int]:
    """Majority ground-truth task among the training batches each expert saw."""
    votes: dict[int, Counter] = {}
    for eid, task in zip(active_experts, batch_tasks):
        votes.setdefault(int(eid), Counter())[int(task)] += 1
    # ties go to the task seen first
    return {eid: max(c, key=lambda t: (c[t], -list(c).index(t))) for eid, c in votes.items()}


def spurious_experts(task_of_expert: dict[int, int]) -> int:
    """Experts whose majority task already belongs to an earlier expert."""
    return len(task_of_expert) - len(set(task_of_expert.values()))


def expert_label_maps(task_of_expert: dict[int, int], stream: TaskStream) -> dict[int, tuple[int, ...]]:
    return {eid: stream.tasks[t].classes for eid, t in task_of_expert.items()}


def test_sets(stream: TaskStream, tasks: Optional[Sequence[int]] = None) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Test inputs with GLOBAL labels per task."""
    out = {}
    for t in (stream.distinct_tasks() if tasks is None else tasks):
        task = stream.tasks[t]
        x, y_local = task.test_data()
        out[t] = (x, np.asarray(task.classes)[y_local])
    return out


@dataclass
class Evaluation:
    per_task: dict[int, float]
    log: list[dict] = field(default_factory=list)

    @property
    def acc(self) -> float:
        return float(np.mean(list(self.per_task.values()))) if self.per_task else float("nan")


def evaluate(selector: Optional[Selector], experts: Sequence[Network], label_maps: dict,
             sets: dict[int, tuple[np.ndarray, np.ndarray]], routing: Optional[dict[int, int]] = None,
             keep_log: bool = False) -> Evaluation:
    """Per-task accuracy of routed predictions.

    ``routing`` (task -> expert id) replaces the selector with ground-truth
    routing for ablations.
    """
    per_task = {}
    log = []
    for t, (x, y) in sets.items():
        routes = None
        if routing is not None:
            routes = np.full(len(x), routing.get(t, 0), dtype=np.int64)
        eids, preds = predict(selector, experts, x, label_maps, routes=routes)
        correct = preds == y
        per_task[t] = float(correct.mean()) if len(y) else float("nan")
        if keep_log:
            log.extend(
                {"task": t, "index": i, "label": int(y[i]), "expert": int(eids[i]),
                 "prediction": int(preds[i]), "correct": int(correct[i])}
                for i in range(len(y))
            )
    return Evaluation(per_task, log)


def acc_from_log(log: Sequence[dict]) -> float:
    """ACC recomputed by counting correct predictions per task in a prediction log."""
    hits: dict[int, int] = {}
    totals: dict[int, int] = {}
    for row in log:
        t = row["task"]
        totals[t] = totals.get(t, 0) + 1
        hits[t] = hits.get(t, 0) + (1 if row["prediction"] == row["label"] else 0)
    return sum(hits[t] / totals[t] for t in totals) / len(totals)


class AccuracyMatrix:
    """R[j][i]: accuracy on task i after segment j; None before task i first appears."""

    def __init__(self, tasks: Sequence[int], n_segments: int):
        self.tasks = list(tasks)
        self.rows: list[list[Optional[float]]] = [[None] * len(self.tasks) for _ in range(n_segments)]

    def set_row(self, segment: int, per_task: dict[int, float]) -> None:
        self.rows[segment] = [per_task.get(t) for t in self.tasks]

    def final_acc(self) -> float:
        vals = [v for v in self.rows[-1] if v is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["segment"] + [f"task_{t}" for t in self.tasks] + ["acc"])
            for j, row in enumerate(self.rows):
                vals = [v for v in row if v is not None]
                acc = np.mean(vals) if vals else None
                w.writerow([j] + [_fmt(v) for v in row] + [_fmt(acc)])


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6g}"
