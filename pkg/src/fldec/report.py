"""Run reports and run manifests as plain JSON documents."""

from __future__ import annotations

import hashlib
import json
import math
from importlib import metadata
from pathlib import Path
from typing import Sequence

from .timing import DEFAULT_POWER_W, PHASES, EnergyReport, TimingReport

REPORT_KEYS = ("run_id", "subcommand", "config", "rounds", "timing", "energy")
TIMING_KEYS = (*PHASES, "crypt", "train", "total")


class ReportError(ValueError):
    pass


def version() -> str:
    try:
        return metadata.version("fldec")
    except metadata.PackageNotFoundError:  # running from a source checkout
        return "0+unknown"


def run_id(subcommand: str, config: dict) -> str:
    """Stable id: the same resolved config always names the same run."""
    blob = json.dumps({"subcommand": subcommand, "config": config}, sort_keys=True, default=str)
    return hashlib.blake2b(blob.encode(), digest_size=8).hexdigest()


def round_rows(records) -> list[dict]:
    """Round records (objects or dicts) reduced to the report fields."""
    rows = []
    for r in records:
        d = r.as_dict() if hasattr(r, "as_dict") else dict(r)
        rows.append(
            {
                "index": d.get("index", d.get("round")),
                "participants": d.get("participants", []),
                "accuracy": d.get("accuracy"),
                "loss": d.get("loss"),
            }
        )
    return rows


def build_report(
    subcommand: str,
    config: dict,
    records: Sequence,
    timing: TimingReport,
    power_w: float = DEFAULT_POWER_W,
    extra: dict | None = None,
) -> dict:
    e = EnergyReport.from_timing(timing, power_w)
    doc = {
        "run_id": run_id(subcommand, config),
        "subcommand": subcommand,
        "config": config,
        "rounds": round_rows(records),
        "timing": timing.as_dict(),
        "energy": {"power_w": e.power_w, "total_j": e.total_j},
    }
    if extra:
        doc.update(extra)
    return doc


def validate_report(doc: dict) -> None:
    """Schema plus the timing and energy identities, checked exactly."""
    missing = [k for k in REPORT_KEYS if k not in doc]
    if missing:
        raise ReportError(f"report lacks {', '.join(missing)}")
    if not isinstance(doc["rounds"], list):
        raise ReportError("rounds must be a list")
    for r in doc["rounds"]:
        if not {"index", "participants", "accuracy", "loss"} <= set(r):
            raise ReportError(f"round record {r!r} is incomplete")
    t = doc["timing"]
    if set(TIMING_KEYS) - set(t):
        raise ReportError(f"timing lacks {', '.join(sorted(set(TIMING_KEYS) - set(t)))}")
    rebuilt = TimingReport(**{k: t[k] for k in (*PHASES, "crypt")})
    if rebuilt.train != t["train"]:
        raise ReportError(f"train {t['train']} is not the sum of the phases ({rebuilt.train})")
    if t["total"] != t["train"] + t["crypt"]:
        raise ReportError("total is not train + crypt")
    e = doc["energy"]
    if e["total_j"] != e["power_w"] * t["total"]:
        raise ReportError("energy is not power x total time")
    if any(isinstance(v, float) and not math.isfinite(v) for v in t.values()):
        raise ReportError("non-finite timing value")


def write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n", encoding="utf-8")


def manifest(subcommand: str, config: dict, seeds: dict, artifacts: dict) -> dict:
    return {
        "run_id": run_id(subcommand, config),
        "subcommand": subcommand,
        "config": config,
        "seeds": seeds,
        "artifacts": artifacts,
        "version": version(),
    }
