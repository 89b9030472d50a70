"""Phase timing and constant-power energy accounting."""

from __future__ import annotations

from dataclasses import asdict, dataclass

DEFAULT_POWER_W = 5.0

PHASES = ("init", "tr", "loc", "exm", "ser", "agg")


@dataclass
class TimingReport:
    """Seconds per phase: model init, shard transmission, client training,
    weight exchange, server-side training, aggregation, encryption work."""

    init: float = 0.0
    tr: float = 0.0
    loc: float = 0.0
    exm: float = 0.0
    ser: float = 0.0
    agg: float = 0.0
    crypt: float = 0.0

    @property
    def train(self) -> float:
        return self.init + self.tr + self.loc + self.exm + self.ser + self.agg

    @property
    def total(self) -> float:
        return self.train + self.crypt

    def add(self, phase: str, seconds: float) -> None:
        setattr(self, phase, getattr(self, phase) + seconds)

    def as_dict(self) -> dict:
        out = asdict(self)
        out["train"] = self.train
        out["total"] = self.total
        return out


def total_time(report: TimingReport) -> float:
    for name in (*PHASES, "crypt"):
        if getattr(report, name) < 0:
            raise ValueError(f"negative duration for phase {name}")
    return report.train + report.crypt


def energy(power_w: float, seconds: float) -> float:
    if power_w < 0 or seconds < 0:
        raise ValueError("power and time must be nonnegative")
    return power_w * seconds


@dataclass
class EnergyReport:
    power_w: float
    phases_j: dict
    total_j: float

    @classmethod
    def from_timing(cls, timing: TimingReport, power_w: float = DEFAULT_POWER_W) -> "EnergyReport":
        phases = {p: energy(power_w, getattr(timing, p)) for p in (*PHASES, "crypt")}
        return cls(power_w, phases, energy(power_w, timing.total))

    def as_dict(self) -> dict:
        return {"power_w": self.power_w, "total_j": self.total_j, "phases_j": dict(self.phases_j)}
