"""Request and response bodies for the HTTP service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class DecideRequest(BaseModel):
    task: str = Field(description="task type name or alias, e.g. matmul")
    magnitude: int = Field(gt=0)
    preference: str = "LocalAccess"
    window: list[list[float]] | None = Field(default=None, description="recent snapshots, oldest first")


class DecideResponse(BaseModel):
    verdict: str
    stage1: str
    stage2_applied: bool
    stage2: str | None = None


class SimConfigBody(BaseModel):
    link_mbps: float = 1000.0
    task_bits: tuple[float, float] = (10_000.0, 50_000.0)
    service_rate: float | None = Field(default=0.31944, description="null means zero service time")
    per_user_rate: float = 6.944e-5
    queueing: str = "mm1"
    power_w: float = 5.0
    n_tasks: int = 200_000
    replications: int = 1
    seed: int = 0


class SimulateRequest(BaseModel):
    users: list[int] = Field(min_length=1)
    config: SimConfigBody = SimConfigBody()


class SimRow(BaseModel):
    users: int
    avg_response_s: float
    avg_energy_j: float
    utilization: float


class SimulateResponse(BaseModel):
    config: dict
    results: list[SimRow]


class EnergyRequest(BaseModel):
    seconds: float = Field(ge=0)
    power_w: float = Field(default=5.0, ge=0)


class EnergyResponse(BaseModel):
    seconds: float
    power_w: float
    joules: float


class TaskBody(BaseModel):
    task: str
    magnitude: int | None = Field(default=None, gt=0)
    a: int | None = None
    b: int | None = None
    preference: str = "LocalAccess"
    seed: int = 0


class TaskResponse(BaseModel):
    task: str
    ok: bool
    digest: str
    body: str
    seconds: float
