"""HTTP front end: live learning sessions and background experiment jobs."""
from __future__ import annotations

import logging
import threading
import uuid
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException

from .. import __version__
from ..drift import DetectorConfig
from ..experts import ExpertPool
from ..harness import ExperimentConfig, run_experiment, run_sweep
from ..harness.experiment import expert_factory, selector_factory
from ..nn import SgdConfig
from ..selection import PruneConfig, Selector, predict, prune_and_retrain_selector, prune_experts, train_selector
from .schemas import (BatchRequest, ExperimentRequest, ExperimentStatus, FinalizeRequest, HealthResponse,
                      PredictRequest, PredictResponse, SessionCreate, SessionState, StepResponse)

log = logging.getLogger(__name__)


@dataclass
class Session:
    spec: SessionCreate
    pool: ExpertPool
    selector: Optional[Selector] = None
    experts: Optional[list] = None
    lock: threading.Lock = field(default_factory=threading.Lock)


def _reshape(rows: list[list[float]], shape: tuple[int, ...]) -> np.ndarray:
    x = np.asarray(rows, dtype=np.float32)
    flat = int(np.prod(shape))
    if x.ndim != 2 or x.shape[1] != flat:
        raise HTTPException(422, f"each row must have {flat} values")
    return x.reshape((len(x),) + shape)


def create_app() -> FastAPI:
    app = FastAPI(title="expertswitch", version=__version__)
    sessions: dict[str, Session] = {}
    jobs: dict[str, ExperimentStatus] = {}
    jobs_lock = threading.Lock()

    def get_session(session_id: str) -> Session:
        s = sessions.get(session_id)
        if s is None:
            raise HTTPException(404, f"no session {session_id}")
        return s

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(version=__version__)

    @app.post("/sessions", response_model=SessionState, status_code=201)
    def create_session(req: SessionCreate):
        cfg = ExperimentConfig(kind="split_synthetic", expert_arch=req.expert_arch, expert_hidden=req.expert_hidden)
        shape = tuple(req.input_shape)
        if req.expert_arch == "conv" and len(shape) != 3:
            raise HTTPException(422, "conv experts need a (channels, height, width) input shape")
        try:
            detector = DetectorConfig(alpha=req.alpha, window_size=req.window_size)
            sgd = SgdConfig(learning_rate=req.lr, momentum=req.momentum, weight_decay=req.weight_decay)
        except ValueError as exc:
            raise HTTPException(422, str(exc))
        pool = ExpertPool(expert_factory(cfg, shape, req.n_classes), detector, sgd, req.selector_capacity,
                          req.prune_capacity, seed=req.seed)
        sid = uuid.uuid4().hex[:12]
        sessions[sid] = Session(req, pool)
        return _state(sid, sessions[sid])

    @app.get("/sessions/{session_id}", response_model=SessionState)
    def session_state(session_id: str):
        return _state(session_id, get_session(session_id))

    @app.delete("/sessions/{session_id}", status_code=204)
    def drop_session(session_id: str):
        get_session(session_id)
        del sessions[session_id]

    @app.post("/sessions/{session_id}/batches", response_model=StepResponse)
    def feed_batch(session_id: str, req: BatchRequest):
        s = get_session(session_id)
        x = _reshape(req.x, tuple(s.spec.input_shape))
        y = np.asarray(req.y, dtype=np.int64)
        if y.min() < 0 or y.max() >= s.spec.n_classes:
            raise HTTPException(422, f"labels must lie in [0, {s.spec.n_classes})")
        with s.lock:
            r = s.pool.step(x, y)
            s.selector = s.experts = None
        return StepResponse(step=r.step, active_expert=r.active_expert, raw_loss=r.raw_loss,
                            smoothed_loss=r.smoothed_loss, threshold=r.threshold, fired=r.fired, event=r.event)

    @app.post("/sessions/{session_id}/finalize", response_model=SessionState)
    def finalize(session_id: str, req: FinalizeRequest):
        s = get_session(session_id)
        cfg = ExperimentConfig(kind="split_synthetic", selector_hidden=req.selector_hidden)
        prune = PruneConfig(req.expert_prune_rate, req.selector_prune_rate, req.retrain_epochs)
        rng = np.random.default_rng([s.spec.seed, 11])
        with s.lock:
            pool = s.pool
            samples = pool.selector_buffer.drain()
            try:
                sel = train_selector(samples, pool.n_experts, selector_factory(cfg, tuple(s.spec.input_shape)),
                                     pool.sgd_cfg, req.selector_epochs, rng)
            except ValueError as exc:
                raise HTTPException(409, str(exc))
            s.selector = prune_and_retrain_selector(sel, samples, prune, rng)
            s.experts = prune_experts([e.net for e in pool.experts], pool.prune_buffers, prune, rng)
        return _state(session_id, s)

    @app.post("/sessions/{session_id}/predict", response_model=PredictResponse)
    def session_predict(session_id: str, req: PredictRequest):
        s = get_session(session_id)
        if s.selector is None:
            raise HTTPException(409, "session is not finalized")
        x = _reshape(req.x, tuple(s.spec.input_shape))
        identity = {i: tuple(range(s.spec.n_classes)) for i in range(len(s.experts))}
        routes, local = predict(s.selector, s.experts, x, identity)
        return PredictResponse(expert_ids=routes.tolist(), local_predictions=local.tolist())

    def _run_job(job_id: str, cfg: ExperimentConfig, req: ExperimentRequest):
        with jobs_lock:
            jobs[job_id].state = "running"
        try:
            if req.sweep_param:
                rows = run_sweep(cfg, req.sweep_param, req.sweep_values or [])
                update = dict(rows=rows)
            else:
                res = run_experiment(cfg)
                update = dict(summary=res.summary)
            with jobs_lock:
                jobs[job_id] = jobs[job_id].model_copy(update=dict(state="done", **update))
        except Exception as exc:  # reported through the status endpoint
            log.exception("experiment %s failed", job_id)
            with jobs_lock:
                jobs[job_id] = jobs[job_id].model_copy(update=dict(state="failed", error=str(exc)))

    @app.post("/experiments", response_model=ExperimentStatus, status_code=202)
    def submit_experiment(req: ExperimentRequest):
        try:
            cfg = ExperimentConfig.from_mapping({k: _as_text(v) for k, v in req.config.items()})
        except (ValueError, TypeError) as exc:
            raise HTTPException(422, str(exc))
        if req.sweep_param and not req.sweep_values:
            raise HTTPException(422, "sweep_values required with sweep_param")
        job_id = uuid.uuid4().hex[:12]
        with jobs_lock:
            jobs[job_id] = ExperimentStatus(experiment_id=job_id, state="queued", out_dir=cfg.out)
        threading.Thread(target=_run_job, args=(job_id, cfg, req), daemon=True).start()
        return jobs[job_id]

    @app.get("/experiments/{experiment_id}", response_model=ExperimentStatus)
    def experiment_status(experiment_id: str):
        with jobs_lock:
            job = jobs.get(experiment_id)
        if job is None:
            raise HTTPException(404, f"no experiment {experiment_id}")
        return job

    return app


def _as_text(v) -> Optional[str]:
    if isinstance(v, bool):
        return "true" if v else "false"
    return None if v is None else str(v)


def _state(sid: str, s: Session) -> SessionState:
    pool = s.pool
    return SessionState(
        session_id=sid,
        steps=pool.steps,
        n_experts=pool.n_experts,
        active_expert=pool.active_id,
        smoothed_losses=[e.detector.smoothed for e in pool.experts],
        selector_buffer=len(pool.selector_buffer),
        prune_buffers={i: len(b) for i, b in pool.prune_buffers.items()},
        finalized=s.selector is not None,
    )


app = create_app()
