"""Monte-Carlo response time and device energy for many users sharing one edge.

Each task is transmitted over the link, waits in a single-server FIFO queue
and is served. Waiting times follow Lindley's recursion, evaluated in closed
form as ``W_k = P_k - min_{j<=k} P_j`` over the partial sums ``P`` of
``service - interarrival``. All randomness is drawn as unit-rate variates and
then scaled, so changing the user count keeps the same sample path.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .timing import DEFAULT_POWER_W, energy


class UnstableSystem(ValueError):
    def __init__(self, utilization: float):
        super().__init__(f"arrival rate exceeds service capacity (utilization {utilization:.3f})")
        self.utilization = utilization


@dataclass(frozen=True)
class SimConfig:
    users: int = 100
    link_mbps: float = 1000.0
    task_bits: tuple[float, float] = (10_000.0, 50_000.0)
    service_rate: float = 0.31944  # tasks/s at the edge; math.inf means zero service time
    per_user_rate: float = 6.944e-5  # tasks/s issued by each user
    queueing: str = "mm1"
    power_w: float = DEFAULT_POWER_W
    n_tasks: int = 200_000
    replications: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.users < 1:
            raise ValueError("users must be >= 1")
        lo, hi = self.task_bits
        if not 0 <= lo <= hi:
            raise ValueError("task size range must satisfy 0 <= min <= max")
        if self.link_mbps <= 0 or self.service_rate <= 0 or self.per_user_rate <= 0:
            raise ValueError("rates must be positive")
        if self.queueing not in ("mm1", "deterministic"):
            raise ValueError(f"unknown queueing mode {self.queueing!r}")
        if self.n_tasks < 10_000:
            raise ValueError("average over at least 10^4 tasks")

    @property
    def arrival_rate(self) -> float:
        return self.users * self.per_user_rate

    @property
    def utilization(self) -> float:
        return 0.0 if math.isinf(self.service_rate) else self.arrival_rate / self.service_rate


# Calibrated so 100..1000 users land in 3-4.25 s / 14-22 J; a fit, not a measured model.
CALIBRATED = SimConfig()


@dataclass
class SimResult:
    users: int
    avg_response_s: float
    avg_energy_j: float
    utilization: float
    per_user_response_s: np.ndarray
    n_tasks: int

    def row(self) -> dict:
        return {
            "users": self.users,
            "avg_response_s": self.avg_response_s,
            "avg_energy_j": self.avg_energy_j,
            "utilization": self.utilization,
        }


def mm1_sojourn(arrival_rate: float, service_rate: float) -> float:
    """Closed-form mean time in an M/M/1 system."""
    if arrival_rate >= service_rate:
        raise UnstableSystem(arrival_rate / service_rate)
    return 1.0 / (service_rate - arrival_rate)


def _replication(cfg: SimConfig, rep: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([cfg.seed, rep])
    n = cfg.n_tasks
    unit_arrivals = rng.standard_exponential(n)
    unit_service = rng.standard_exponential(n)
    bits = rng.uniform(*cfg.task_bits, size=n)
    owner = rng.integers(0, cfg.users, size=n)

    lam, mu = cfg.arrival_rate, cfg.service_rate
    if cfg.queueing == "mm1":
        inter = unit_arrivals / lam
        service = np.zeros(n) if math.isinf(mu) else unit_service / mu
    else:
        inter = np.full(n, 1.0 / lam)
        service = np.full(n, 0.0 if math.isinf(mu) else 1.0 / mu)
    partial = np.concatenate(([0.0], np.cumsum(service[:-1] - inter[1:])))
    wait = partial - np.minimum.accumulate(partial)
    transmit = bits / (cfg.link_mbps * 1e6)
    return transmit + wait + service, owner


def simulate(cfg: SimConfig) -> SimResult:
    if cfg.queueing == "mm1" and cfg.utilization >= 1.0:
        raise UnstableSystem(cfg.utilization)
    if cfg.queueing == "deterministic" and cfg.utilization > 1.0:
        raise UnstableSystem(cfg.utilization)
    responses, owners = [], []
    for rep in range(cfg.replications):
        r, o = _replication(cfg, rep)
        responses.append(r)
        owners.append(o)
    resp = np.concatenate(responses)
    own = np.concatenate(owners)
    sums = np.bincount(own, weights=resp, minlength=cfg.users)
    counts = np.bincount(own, minlength=cfg.users)
    per_user = np.divide(sums, counts, out=np.full(cfg.users, np.nan), where=counts > 0)
    avg = float(resp.mean())
    return SimResult(cfg.users, avg, energy(cfg.power_w, avg), cfg.utilization, per_user, len(resp))


def sweep(cfg: SimConfig, user_counts) -> list[SimResult]:
    return [simulate(replace(cfg, users=int(u))) for u in user_counts]


SIM_CSV_HEADER = ["users", "avg_response_s", "avg_energy_j", "utilization"]


def rows_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, SIM_CSV_HEADER, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def results_csv(results: list[SimResult]) -> str:
    return rows_csv([r.row() for r in results])


def results_json(cfg: SimConfig, results: list[SimResult]) -> str:
    conf = asdict(cfg)
    conf["task_bits"] = list(cfg.task_bits)
    conf["service_rate"] = None if math.isinf(cfg.service_rate) else cfg.service_rate
    return json.dumps({"config": conf, "results": [r.row() for r in results]}, indent=2)
