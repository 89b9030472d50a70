"""HTTP front end over the decision engine, simulator and task kernels.

Run with ``uvicorn fldec.api:app``. The federated roles stay on their own TCP
protocol; this service only answers stateless questions.
"""

from __future__ import annotations

import json
import math
import tempfile
import time
from dataclasses import replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException

from . import decision, runtime, sim
from .nn import ShapeError
from .report import version
from .schemas import (
    DecideRequest,
    DecideResponse,
    EnergyRequest,
    EnergyResponse,
    SimulateRequest,
    SimulateResponse,
    TaskBody,
    TaskResponse,
)
from .timing import energy

app = FastAPI(title="fldec", version=version())

# kernels run in-process, so keep requests small enough not to stall the server
MAX_MATMUL = 400
MAX_ELEMENTS = 5_000_000


@lru_cache(maxsize=1)
def _models():
    return decision.load_reference_models()


@app.get("/health")
def health() -> dict:
    return {"status": "ok", "version": version()}


@app.post("/decide", response_model=DecideResponse)
def decide(body: DecideRequest) -> dict:
    try:
        d = decision.TaskDescriptor(
            decision.parse_task(body.task), body.magnitude, decision.parse_preference(body.preference)
        )
    except ValueError as exc:
        raise HTTPException(422, str(exc)) from None
    s1, s2 = _models()
    window = None if body.window is None else np.asarray(body.window, dtype=np.float64)
    if window is not None and window.ndim == 2 and len(window) > decision.SEQ_LEN:
        window = window[-decision.SEQ_LEN:]
    if window is None and decision.predict_intensive(s1, d) == decision.Stage1.Intensive:
        raise HTTPException(422, "intensive task: a window of network snapshots is required")
    try:
        return decision.decide(d, window, s1, s2).as_dict()
    except ShapeError as exc:
        raise HTTPException(422, str(exc)) from None


@app.post("/simulate", response_model=SimulateResponse)
def simulate(body: SimulateRequest) -> dict:
    c = body.config
    try:
        cfg = sim.SimConfig(
            link_mbps=c.link_mbps,
            task_bits=tuple(c.task_bits),
            service_rate=math.inf if c.service_rate is None else c.service_rate,
            per_user_rate=c.per_user_rate,
            queueing=c.queueing,
            power_w=c.power_w,
            n_tasks=c.n_tasks,
            replications=c.replications,
            seed=c.seed,
        )
        results = [sim.simulate(replace(cfg, users=u)) for u in body.users]
    except sim.UnstableSystem as exc:
        raise HTTPException(422, {"error": str(exc), "utilization": exc.utilization}) from None
    except ValueError as exc:
        raise HTTPException(422, str(exc)) from None
    return json.loads(sim.results_json(cfg, results))


@app.post("/energy", response_model=EnergyResponse)
def device_energy(body: EnergyRequest) -> dict:
    return {"seconds": body.seconds, "power_w": body.power_w, "joules": energy(body.power_w, body.seconds)}


def _request(body: TaskBody) -> runtime.TaskRequest:
    t = decision.parse_task(body.task)
    pref = decision.parse_preference(body.preference)
    if t in runtime.CALC_TYPES:
        if body.a is None or body.b is None:
            raise ValueError("calculator tasks need operands a and b")
        return runtime.TaskRequest.calculator(t, body.a, body.b, pref=pref)
    n = body.magnitude
    if n is None:
        raise ValueError("magnitude is required")
    if t == decision.TaskType.MatrixMultiply:
        if n > MAX_MATMUL:
            raise ValueError(f"matrix order above {MAX_MATMUL} is not served here")
        return runtime.TaskRequest.matmul(n, seed_a=body.seed + 1, seed_b=body.seed + 2, pref=pref)
    if n > MAX_ELEMENTS:
        raise ValueError(f"magnitude above {MAX_ELEMENTS} is not served here")
    if t == decision.TaskType.FileCreate:
        return runtime.TaskRequest.file(n, seed=body.seed, pref=pref)
    if t == decision.TaskType.Sort:
        return runtime.TaskRequest.sort(n, seed=body.seed, pref=pref)
    return runtime.TaskRequest.search(n, seed=body.seed, pref=pref)


@app.post("/tasks", response_model=TaskResponse)
def run_task(body: TaskBody) -> dict:
    try:
        req = _request(body)
    except ValueError as exc:
        raise HTTPException(422, str(exc)) from None
    with tempfile.TemporaryDirectory() as tmp:
        t0 = time.perf_counter()
        res = runtime.run_task(req, Path(tmp))
        elapsed = time.perf_counter() - t0
    return {"task": runtime.describe(req), "ok": res.ok, "digest": f"{res.digest:016x}", "body": res.body, "seconds": elapsed}
