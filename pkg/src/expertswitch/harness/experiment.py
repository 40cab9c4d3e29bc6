"""End-to-end runs: stream training, selector, pruning, evaluation, files."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from ..buffers import ReservoirBuffer, save_buffer
from ..experts import CREATE, SWITCH, ExpertPool, StepReport, dump_pool
from ..nn import Dense, Flatten, Network, ReLU, Sigmoid, conv_expert, mlp, read_network, save_network
from ..selection import Selector, prune_and_retrain_selector, prune_experts, train_selector
from .config import ALIASES, ExperimentConfig, format_value, parse_value
from .evaluate import (AccuracyMatrix, Evaluation, evaluate, expert_label_maps, expert_task_map,
                       spurious_experts, test_sets)
from .streams import ConfigError, TaskStream, build_stream

log = logging.getLogger(__name__)

TRACE_COLUMNS = ["step", "active_expert", "raw_loss", "smoothed_loss", "threshold", "fired", "event",
                 "segment", "task"]

# per-stage generator keys, so each stage's randomness is independent of the others
_SELECTOR, _SELECTOR_RETRAIN, _EXPERT_RETRAIN, _INTERIM = 11, 12, 13, 20


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"stage {stage!r} failed: {exc}")
        self.stage = stage


def expert_factory(cfg: ExperimentConfig, input_shape, n_classes: int) -> Callable[[], Network]:
    arch = cfg.expert_arch
    if arch == "auto":
        arch = "conv" if len(input_shape) == 3 else "mlp"
    if arch == "conv":
        return lambda: conv_expert(input_shape, n_classes, channels=tuple(cfg.expert_channels),
                                   hidden=cfg.expert_hidden, kernel=cfg.expert_kernel)
    if arch == "mlp":
        flat = int(np.prod(input_shape))
        if len(input_shape) == 1:
            return lambda: mlp(flat, [cfg.expert_hidden], n_classes)
        return lambda: _flat_mlp(input_shape, cfg.expert_hidden, n_classes)
    raise ValueError(f"unknown expert_arch {cfg.expert_arch!r}")


def selector_factory(cfg: ExperimentConfig, input_shape) -> Callable[[int], Network]:
    """Two-layer MLP over the flattened input."""
    return lambda n_experts: _flat_mlp(input_shape, cfg.selector_hidden, n_experts)


def _flat_mlp(input_shape, hidden: int, out: int) -> Network:
    flat = int(np.prod(input_shape))
    layers = [Dense(flat, hidden), ReLU(), Dense(hidden, out), Sigmoid()]
    if len(input_shape) > 1:
        layers.insert(0, Flatten())
    return Network(layers, input_shape)


def _stage_rng(cfg: ExperimentConfig, stage: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, stage, *extra])


@dataclass
class StreamRun:
    stream: TaskStream
    pool: ExpertPool
    trace: list[StepReport]
    batch_tasks: list[int]
    batch_segments: list[int]
    matrix: AccuracyMatrix
    seconds: float = 0.0

    def task_of_expert(self) -> dict[int, int]:
        return expert_task_map([r.active_expert for r in self.trace], self.batch_tasks)


def train_on_stream(cfg: ExperimentConfig, stream: TaskStream,
                    on_step: Optional[Callable[[StepReport], None]] = None) -> StreamRun:
    """Run the online loop over the whole stream.

    Ground-truth task ids ride along only for the evaluation side (the matrix
    rows after each segment and the trace's task column).
    """
    task0 = stream.tasks[stream.order[0]]
    factory = expert_factory(cfg, task0.input_shape, task0.n_classes)
    pool = ExpertPool(factory, cfg.detector(), cfg.sgd(), cfg.selector_capacity, cfg.prune_capacity,
                      seed=cfg.seed, rollback_on_switch=cfg.rollback_on_switch)
    matrix = AccuracyMatrix(stream.distinct_tasks(), len(stream.order))
    run = StreamRun(stream, pool, [], [], [], matrix)
    t0 = time.perf_counter()
    segment = None
    for batch in stream.batches():
        if segment is not None and batch.segment != segment and cfg.eval_each_segment:
            _interim_row(cfg, run, segment)
        segment = batch.segment
        report = pool.step(batch.x, batch.y)
        run.trace.append(report)
        run.batch_tasks.append(batch.task)
        run.batch_segments.append(batch.segment)
        if on_step is not None:
            on_step(report)
        if report.event in (CREATE, SWITCH):
            log.info("step %d (segment %d): %s -> expert %d", report.step, batch.segment, report.event,
                     report.active_expert)
    run.seconds = time.perf_counter() - t0
    return run


def _interim_row(cfg: ExperimentConfig, run: StreamRun, segment: int) -> None:
    """Accuracy row after ``segment`` using a selector fitted on the buffer so
    far and the unpruned experts."""
    pool, stream = run.pool, run.stream
    seen = list(dict.fromkeys(stream.order[:segment + 1]))
    sel = train_selector(pool.selector_buffer.drain(), pool.n_experts,
                         selector_factory(cfg, pool.experts[0].net.input_shape), cfg.sgd(),
                         cfg.selector_epochs, _stage_rng(cfg, _INTERIM, segment))
    maps = expert_label_maps(run.task_of_expert(), stream)
    ev = evaluate(sel, [e.net for e in pool.experts], maps, test_sets(stream, seen))
    run.matrix.set_row(segment, ev.per_task)


@dataclass
class Finished:
    selector: Selector
    pruned_selector: Selector
    experts: list[Network]
    label_maps: dict[int, tuple[int, ...]]
    task_of_expert: dict[int, int]
    pre_prune: Evaluation
    final: Evaluation
    oracle: Evaluation
    selector_accuracy: float
    seconds: dict = field(default_factory=dict)


def finish(cfg: ExperimentConfig, run: StreamRun,
           prune_buffers: Optional[dict[int, ReservoirBuffer]] = None,
           selector: Optional[Selector] = None, keep_log: bool = False) -> Finished:
    """Selector training, pruning/retraining and final evaluation."""
    pool, stream = run.pool, run.stream
    times = {}
    input_shape = pool.experts[0].net.input_shape
    task_of_expert = run.task_of_expert()
    maps = expert_label_maps(task_of_expert, stream)
    sets = test_sets(stream)
    raw_experts = [e.net for e in pool.experts]

    t = time.perf_counter()
    if selector is None:
        selector = train_selector(pool.selector_buffer.drain(), pool.n_experts,
                                  selector_factory(cfg, input_shape), cfg.sgd(), cfg.selector_epochs,
                                  _stage_rng(cfg, _SELECTOR))
    times["selector"] = time.perf_counter() - t
    pre = evaluate(selector, raw_experts, maps, sets)

    t = time.perf_counter()
    prune_cfg = cfg.prune()
    pruned_sel = prune_and_retrain_selector(selector, pool.selector_buffer.drain(), prune_cfg,
                                            _stage_rng(cfg, _SELECTOR_RETRAIN))
    experts = prune_experts(raw_experts, prune_buffers or pool.prune_buffers, prune_cfg,
                            _stage_rng(cfg, _EXPERT_RETRAIN))
    times["prune"] = time.perf_counter() - t

    final = evaluate(pruned_sel, experts, maps, sets, keep_log=keep_log)
    # ground-truth routing: each task goes to the expert that trained on it most
    routing = {}
    for eid, task in sorted(task_of_expert.items()):
        routing.setdefault(task, eid)
    oracle = evaluate(None, experts, maps, sets, routing=routing)
    sel_acc = _selector_accuracy(pruned_sel, sets, routing)
    return Finished(selector, pruned_sel, experts, maps, task_of_expert, pre, final, oracle, sel_acc, times)


def _selector_accuracy(selector: Selector, sets, routing: dict[int, int]) -> float:
    hits = total = 0
    for t, (x, _) in sets.items():
        if t not in routing:
            continue
        hits += int(np.sum(selector.route(x) == routing[t]))
        total += len(x)
    return hits / total if total else float("nan")


@dataclass
class ExperimentResult:
    summary: dict
    matrix: AccuracyMatrix
    run: StreamRun
    finished: Finished
    out_dir: Optional[Path]


def run_experiment(cfg: ExperimentConfig, data=None, write: bool = True) -> ExperimentResult:
    """Full pipeline; ``data`` optionally supplies preloaded MNIST arrays."""
    t0 = time.perf_counter()
    try:
        stream = build_stream(cfg.stream_spec(), data)
    except Exception as exc:
        raise StageError("build_stream", exc) from exc
    try:
        run = train_on_stream(cfg, stream)
    except Exception as exc:
        raise StageError("run_stream", exc) from exc
    try:
        done = finish(cfg, run, keep_log=True)
    except Exception as exc:
        raise StageError("selector/pruning/evaluation", exc) from exc
    run.matrix.set_row(len(stream.order) - 1, done.final.per_task)
    summary = make_summary(cfg, run, done, time.perf_counter() - t0)
    out = None
    if write:
        try:
            out = write_outputs(cfg, run, done, summary)
        except Exception as exc:
            raise StageError("write_outputs", exc) from exc
    return ExperimentResult(summary, run.matrix, run, done, out)


def make_summary(cfg: ExperimentConfig, run: StreamRun, done: Finished, seconds: float) -> dict:
    pool = run.pool
    events = [r.event for r in run.trace]
    n_distinct = len(run.stream.distinct_tasks())
    return {
        "acc": done.final.acc,
        "acc_pre_prune": done.pre_prune.acc,
        "acc_oracle_routing": done.oracle.acc,
        "selector_accuracy": done.selector_accuracy,
        "per_task_acc": {str(k): v for k, v in done.final.per_task.items()},
        "n_experts": pool.n_experts,
        "n_tasks": n_distinct,
        "spurious_experts": spurious_experts(done.task_of_expert),
        "creates": events.count(CREATE),
        "switches": events.count(SWITCH),
        "steps": len(run.trace),
        "expert_task": {str(k): v for k, v in done.task_of_expert.items()},
        "params_total": sum(e.net.param_count() for e in pool.experts) + done.selector.net.param_count(),
        "params_surviving": sum(n.param_count(surviving_only=True) for n in done.experts)
        + done.pruned_selector.net.param_count(surviving_only=True),
        "wall_time_s": seconds,
        "stream_time_s": run.seconds,
        "seed": cfg.seed,
        "selector_capacity": cfg.selector_capacity,
        "prune_capacity": cfg.prune_capacity,
    }


def write_trace(path, trace: Sequence[StepReport], segments=None, tasks=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for i, r in enumerate(trace):
            w.writerow([
                r.step, r.active_expert, f"{r.raw_loss:.6g}", f"{r.smoothed_loss:.6g}",
                "" if r.threshold is None else f"{r.threshold:.6g}", int(r.fired), r.event,
                "" if segments is None else segments[i], "" if tasks is None else tasks[i],
            ])


def write_outputs(cfg: ExperimentConfig, run: StreamRun, done: Finished, summary: dict) -> Path:
    out = Path(cfg.out)
    ckpt = out / "checkpoints"
    ckpt.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    write_trace(out / "trace.csv", run.trace, run.batch_segments, run.batch_tasks)
    run.matrix.write_csv(out / "acc_matrix.csv")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["task", "index", "label", "expert", "prediction", "correct"])
        w.writeheader()
        w.writerows(done.final.log)

    (ckpt / "pool.bin").write_bytes(dump_pool(run.pool))
    save_network(done.pruned_selector.net, ckpt / "selector.bin")
    for i, net in enumerate(done.experts):
        save_network(net, ckpt / f"expert_{i}.bin")
    if cfg.save_buffers:
        save_buffer(run.pool.selector_buffer, ckpt / "selector.buf")
        for i, buf in run.pool.prune_buffers.items():
            save_buffer(buf, ckpt / f"prune_{i}.buf")
    perms = [t.perm.tolist() for t in run.stream.tasks if getattr(t, "perm", None) is not None]
    meta = {
        "n_experts": run.pool.n_experts,
        "label_maps": {str(k): list(v) for k, v in done.label_maps.items()},
        "expert_task": {str(k): v for k, v in done.task_of_expert.items()},
        "tasks": run.stream.distinct_tasks(),
    }
    (ckpt / "meta.json").write_text(json.dumps(meta))
    if perms:
        np.save(ckpt / "permutations.npy", np.array(perms, dtype=np.int32))
    return out


def sweep_prune_capacity(cfg: ExperimentConfig, values: Sequence[int], data=None) -> list[dict]:
    """One stream pass with the largest capacity, then prune/retrain/evaluate
    per value on truncated buffers.

    Buffers keep the highest shared priorities, so the top-``c`` entries of a
    larger buffer are exactly what a ``c``-sized buffer would have kept, and
    the selector buffer does not depend on ``prune_capacity``. Each row is
    therefore identical to an independent run with that capacity.
    """
    values = list(values)
    big = cfg.replace(prune_capacity=max(values))
    stream = build_stream(big.stream_spec(), data)
    run = train_on_stream(big, stream)
    selector = None
    rows = []
    for c in values:
        t0 = time.perf_counter()
        cfg_c = cfg.replace(prune_capacity=c)
        buffers = {i: b.truncated(c) for i, b in run.pool.prune_buffers.items()}
        done = finish(cfg_c, run, prune_buffers=buffers, selector=selector)
        selector = done.selector
        summary = make_summary(cfg_c, run, done, run.seconds + time.perf_counter() - t0)
        rows.append(summary)
    return rows


def load_checkpoint(ckpt_dir) -> tuple[Selector, list[Network], dict]:
    ckpt = Path(ckpt_dir)
    if (ckpt / "checkpoints").is_dir():
        ckpt = ckpt / "checkpoints"
    meta = json.loads((ckpt / "meta.json").read_text())
    n = meta["n_experts"]
    experts = [read_network(ckpt / f"expert_{i}.bin") for i in range(n)]
    selector = Selector(read_network(ckpt / "selector.bin"), n)
    if (ckpt / "permutations.npy").exists():
        meta["permutations"] = np.load(ckpt / "permutations.npy")
    return selector, experts, meta


def evaluate_checkpoint(ckpt_dir, data_dir=None) -> tuple[dict[int, float], float]:
    """Per-task accuracy and ACC of a saved run on the test sets of its stream.

    The stream is rebuilt from the ``config.txt`` saved next to the
    checkpoints; ``data_dir`` overrides where the image files are read from.
    """
    ckpt = Path(ckpt_dir)
    root = ckpt.parent if ckpt.name == "checkpoints" else ckpt
    cfg = ExperimentConfig.from_file(root / "config.txt")
    if data_dir is not None:
        cfg = cfg.replace(data_dir=str(data_dir))
    selector, experts, meta = load_checkpoint(root)
    stream = build_stream(cfg.stream_spec())
    maps = {int(k): tuple(v) for k, v in meta["label_maps"].items()}
    ev = evaluate(selector, experts, maps, test_sets(stream, meta["tasks"]))
    return ev.per_task, ev.acc


SWEEP_COLUMNS = ["param", "value", "acc", "acc_pre_prune", "acc_oracle_routing", "selector_accuracy", "n_experts",
                 "creates", "switches", "params_surviving", "wall_time_s"]


def run_sweep(cfg: ExperimentConfig, param: str, values: Sequence, data=None, write: bool = True) -> list[dict]:
    """One row per value. ``prune_capacity`` uses the single-pass shortcut;
    any other key gets an independent run per value under ``out/<param>=<value>``."""
    key = ALIASES.get(param, param)
    if key not in {f.name for f in fields(ExperimentConfig)}:
        raise ConfigError(f"unknown sweep parameter {param!r}")
    parsed = [parse_value(key, v) if isinstance(v, str) else v for v in values]
    if key == "prune_capacity":
        summaries = sweep_prune_capacity(cfg, parsed, data)
    else:
        summaries = []
        for v in parsed:
            sub = cfg.replace(**{key: v, "out": str(Path(cfg.out) / f"{key}={format_value(v)}")})
            summaries.append(run_experiment(sub, data, write=write).summary)
    rows = [{"param": key, "value": format_value(v), **{c: s[c] for c in SWEEP_COLUMNS[2:]}}
            for v, s in zip(parsed, summaries)]
    if write:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "sweep.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, SWEEP_COLUMNS)
            w.writeheader()
            for r in rows:
                w.writerow({k: f"{v:.6g}" if isinstance(v, float) else v for k, v in r.items()})
    return rows
