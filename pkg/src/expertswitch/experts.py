"""Online expert pool driven by loss deviations.

One expert is active at a time and trains on every incoming batch. When the
active expert's smoothed loss rises above its control limit, the existing
experts are probed in creation order and the first one that would stay under
its own limit takes over; if none does, a fresh expert is created.

The pool never sees task identities: the only thing it consumes from the
labels is the loss value.
"""
from __future__ import annotations

import io
import logging
import math
import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from .buffers import ReservoirBuffer
from .drift import DetectorConfig, LossDetector
from .nn import Network, Sgd, SgdConfig, dump_network, load_network

log = logging.getLogger(__name__)

NONE, SWITCH, CREATE = "none", "switch", "create"


@dataclass
class Expert:
    id: int
    net: Network
    detector: LossDetector
    opt: Sgd


@dataclass(frozen=True)
class Decision:
    kind: str  # "stay" | "switch" | "create"
    expert_id: Optional[int] = None


@dataclass
class StepReport:
    step: int
    active_expert: int
    raw_loss: float
    smoothed_loss: float
    threshold: Optional[float]
    fired: bool
    event: str

    def row(self) -> dict:
        return {
            "step": self.step,
            "active_expert": self.active_expert,
            "raw_loss": self.raw_loss,
            "smoothed_loss": self.smoothed_loss,
            "threshold": self.threshold,
            "fired": int(self.fired),
            "event": self.event,
        }


class ExpertPool:
    """Expert networks plus the selector and prune buffers they feed.

    ``factory`` builds an uninitialised network; the pool initialises it from
    its own generator so runs are reproducible from ``seed``.
    ``rollback_on_switch`` restores the departing expert's smoothed loss to
    its value before the batch that triggered the switch, so dormant experts
    keep a smoothed loss that reflects their own task.
    """

    def __init__(self, factory: Callable[[], Network], detector: DetectorConfig = DetectorConfig(),
                 sgd: SgdConfig = SgdConfig(), selector_capacity: int = 2500,
                 prune_capacity: int = 1000, seed: int = 0, rollback_on_switch: bool = True,
                 create_first: bool = True):
        self.factory = factory
        self.detector_cfg = detector
        self.sgd_cfg = sgd
        self.selector_capacity = selector_capacity
        self.prune_capacity = prune_capacity
        self.rollback_on_switch = rollback_on_switch
        init_seq, prio_seq = np.random.SeedSequence(seed).spawn(2)
        self.init_rng = np.random.default_rng(init_seq)
        self.priority_rng = np.random.default_rng(prio_seq)
        self.experts: list[Expert] = []
        self.active_id: Optional[int] = None
        self.selector_buffer = ReservoirBuffer(selector_capacity)
        self.prune_buffers: dict[int, ReservoirBuffer] = {}
        self.steps = 0
        if create_first:
            self.add_expert()

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def active(self) -> Expert:
        return self.experts[self.active_id]

    def add_expert(self, net: Optional[Network] = None) -> Expert:
        if net is None:
            net = self.factory().init_params(self.init_rng)
        expert = Expert(
            id=self.n_experts,
            net=net,
            detector=LossDetector(self.detector_cfg),
            opt=Sgd(net, self.sgd_cfg),
        )
        self.experts.append(expert)
        self.prune_buffers[expert.id] = ReservoirBuffer(self.prune_capacity)
        self.active_id = expert.id
        return expert

    def probe(self, x, y, known: Optional[dict[int, float]] = None) -> Optional[int]:
        """First expert (creation order) whose candidate smoothed loss on this
        batch stays under its threshold. Read-only on every expert."""
        known = known or {}
        for e in self.experts:
            if e.detector.smoothed is None or not e.detector.ready:
                continue
            loss = known[e.id] if e.id in known else e.net.loss(x, y)
            if e.detector.accepts(loss):
                return e.id
        return None

    def probe_and_switch(self, x, y, known: Optional[dict[int, float]] = None) -> Decision:
        """Decide what to do with a batch on which the active expert deviates.

        Expects the active expert's smoothed loss to be updated already.
        Does not change the pool.
        """
        if not self.active.detector.is_deviation():
            return Decision("stay")
        chosen = self.probe(x, y, known)
        if chosen is None:
            return Decision("create")
        if chosen == self.active_id:
            return Decision("stay")
        return Decision("switch", chosen)

    def step(self, x, y) -> StepReport:
        """One pass of the online loop on a single batch."""
        x = np.asarray(x)
        y = np.asarray(y)
        current = self.active
        loss, grads = current.net.loss_and_grads(x, y)
        threshold = current.detector.threshold()
        before = current.detector.smoothed
        current.detector.observe(loss)
        fired = current.detector.is_deviation()
        event = NONE
        if fired:
            decision = self.probe_and_switch(x, y, known={current.id: loss})
            if decision.kind != "stay" and self.rollback_on_switch:
                current.detector.smoothed = before
            if decision.kind == "switch":
                self.active_id = decision.expert_id
                event = SWITCH
            elif decision.kind == "create":
                self.add_expert()
                event = CREATE

        trainer = self.active
        if trainer is current:
            raw = loss
        else:
            raw, grads = trainer.net.loss_and_grads(x, y)
            trainer.detector.observe(raw)
        trainer.opt.step(grads)
        trainer.detector.record(raw)
        self._fill_buffers(x, y, trainer.id)

        report = StepReport(
            step=self.steps,
            active_expert=trainer.id,
            raw_loss=raw,
            smoothed_loss=trainer.detector.smoothed,
            threshold=threshold,
            fired=fired,
            event=event,
        )
        self.steps += 1
        return report

    def _fill_buffers(self, x, y, expert_id: int) -> None:
        # one priority per sample, shared by the selector and prune buffer
        priorities = self.priority_rng.standard_normal(len(x))
        sel = self.selector_buffer
        prune = self.prune_buffers[expert_id]
        for i, p in enumerate(priorities):
            p = float(p)
            if _would_accept(sel, p) or _would_accept(prune, p):
                xi = np.array(x[i], dtype=np.float32)
            else:
                xi = x[i]
            sel.offer((xi, expert_id), p)
            prune.offer((xi, int(y[i])), p)

    def detector_states(self) -> list[tuple[Optional[float], tuple[float, ...]]]:
        return [e.detector.snapshot() for e in self.experts]


def _would_accept(buf: ReservoirBuffer, priority: float) -> bool:
    if len(buf) < buf.capacity:
        return True
    m = buf.min_priority()
    return m is not None and priority > m


def run_stream(pool: ExpertPool, batches: Iterable, on_step: Optional[Callable] = None) -> list[StepReport]:
    """Feed ``(x, y)`` batches through the pool; returns the per-step trace."""
    trace = []
    for x, y in batches:
        report = pool.step(x, y)
        trace.append(report)
        if on_step is not None:
            on_step(report)
        if report.event == CREATE:
            log.info("step %d: created expert %d", report.step, report.active_expert)
        elif report.event == SWITCH:
            log.info("step %d: switched to expert %d", report.step, report.active_expert)
    return trace


POOL_MAGIC = b"TPOL"
POOL_VERSION = 1


def dump_pool(pool: ExpertPool) -> bytes:
    """Pool header (N_e, active id, steps) followed by per-expert detector
    state and network checkpoint. Optimizer velocity is not stored."""
    buf = io.BytesIO()
    buf.write(POOL_MAGIC)
    buf.write(struct.pack("<IIIQ", POOL_VERSION, pool.n_experts, pool.active_id, pool.steps))
    for e in pool.experts:
        smoothed, window = e.detector.snapshot()
        buf.write(struct.pack("<dI", math.nan if smoothed is None else smoothed, len(window)))
        buf.write(np.asarray(window, dtype="<f8").tobytes())
        blob = dump_network(e.net)
        buf.write(struct.pack("<Q", len(blob)))
        buf.write(blob)
    return buf.getvalue()


def load_pool(data: bytes, factory: Optional[Callable[[], Network]] = None,
              detector: DetectorConfig = DetectorConfig(), sgd: SgdConfig = SgdConfig(),
              **kwargs) -> ExpertPool:
    if data[:4] != POOL_MAGIC:
        raise ValueError("bad pool checkpoint magic")
    version, n_experts, active_id, steps = struct.unpack_from("<IIIQ", data, 4)
    if version != POOL_VERSION:
        raise ValueError(f"unsupported pool checkpoint version {version}")
    pos = 4 + struct.calcsize("<IIIQ")
    pool = ExpertPool(factory, detector, sgd, create_first=False, **kwargs)
    for _ in range(n_experts):
        smoothed, n_window = struct.unpack_from("<dI", data, pos)
        pos += struct.calcsize("<dI")
        window = np.frombuffer(data, dtype="<f8", count=n_window, offset=pos)
        pos += 8 * n_window
        (size,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        net = load_network(data[pos:pos + size])
        pos += size
        expert = pool.add_expert(net)
        expert.detector.smoothed = None if math.isnan(smoothed) else float(smoothed)
        expert.detector.window.extend(float(v) for v in window)
    if pos != len(data):
        raise ValueError("trailing bytes after pool checkpoint")
    if n_experts and not 0 <= active_id < n_experts:
        raise ValueError("active expert id out of range")
    pool.active_id = active_id if n_experts else None
    pool.steps = steps
    return pool
