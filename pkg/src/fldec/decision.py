"""Two-stage offloading decision: task intensiveness (MLP), then offload-vs-local
from recent network snapshots (LSTM), plus the synthetic datasets both stages
train on.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import LabeledDataset, read_csv, to_csv
from .nn import Arch, ModelWeights, ShapeError, forward

SEQ_LEN = 10
SNAPSHOT_FIELDS = ("uplink_mbps", "downlink_mbps", "throughput_mbps", "latency_ms", "bandwidth_mbps")


class TaskType(enum.IntEnum):
    CalculatorAdd = 0
    CalculatorSub = 1
    CalculatorMul = 2
    CalculatorDiv = 3
    MatrixMultiply = 4
    FileCreate = 5
    Sort = 6
    Search = 7


class Preference(enum.Enum):
    LocalAccess = "LocalAccess"
    RemoteAccess = "RemoteAccess"


class Stage1(enum.IntEnum):
    NotIntensive = 0
    Intensive = 1


class Stage2(enum.IntEnum):
    Local = 0
    Offload = 1


class Verdict(enum.Enum):
    LocalExecute = "LocalExecute"
    OffloadEdge = "OffloadEdge"
    OffloadCloud = "OffloadCloud"


@dataclass(frozen=True)
class TaskDescriptor:
    task_type: TaskType
    magnitude: int
    preference: Preference = Preference.LocalAccess

    def __post_init__(self):
        object.__setattr__(self, "task_type", TaskType(self.task_type))
        object.__setattr__(self, "preference", Preference(self.preference))
        if int(self.magnitude) <= 0:
            raise ValueError("input magnitude must be positive")
        object.__setattr__(self, "magnitude", int(self.magnitude))


@dataclass(frozen=True)
class Decision:
    verdict: Verdict
    stage1: Stage1
    stage2_applied: bool
    stage2: Stage2 | None = None

    def as_dict(self) -> dict:
        return {
            "verdict": self.verdict.value,
            "stage1": self.stage1.name,
            "stage2_applied": self.stage2_applied,
            "stage2": self.stage2.name if self.stage2 is not None else None,
        }


# ---------------------------------------------------------------- intensiveness table
#
# work(type, magnitude) counts elementary operations; a task is Intensive when
# work exceeds WORK_THRESHOLD. Magnitudes: digits (calculator), matrix order n,
# file bytes, element count (sort/search).

WORK_THRESHOLD = 5e5


def work(task_type: TaskType, m: int) -> float:
    t = TaskType(task_type)
    if t in (TaskType.CalculatorAdd, TaskType.CalculatorSub):
        return float(m)
    if t in (TaskType.CalculatorMul, TaskType.CalculatorDiv):
        return float(m) ** 2
    if t == TaskType.MatrixMultiply:
        return float(m) ** 3
    if t == TaskType.FileCreate:
        return float(m)
    if t == TaskType.Sort:
        return m * math.log2(m) if m > 1 else 0.0
    return float(m)


def is_intensive(task_type: TaskType, m: int) -> bool:
    return work(task_type, m) > WORK_THRESHOLD


def _magnitude_threshold(t: TaskType) -> float:
    lo, hi = 1.0, 1e12
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        lo, hi = (mid, hi) if work(t, mid) <= WORK_THRESHOLD else (lo, mid)
    return hi


MAGNITUDE_THRESHOLD = {t: _magnitude_threshold(t) for t in TaskType}
SPREAD_DECADES = 1.5
# raw-magnitude feature is scaled so the sampled range maps into [0, 1]
NORMALIZER = {t: MAGNITUDE_THRESHOLD[t] * 10 ** SPREAD_DECADES for t in TaskType}
N_STAGE1_FEATURES = len(TaskType) + 2


def featurize_task(d: TaskDescriptor) -> np.ndarray:
    v = np.zeros(N_STAGE1_FEATURES)
    v[int(d.task_type)] = 1.0
    v[len(TaskType)] = math.log10(1 + d.magnitude)
    v[len(TaskType) + 1] = d.magnitude / NORMALIZER[d.task_type]
    return v


# ---------------------------------------------------------------- stage 1 data


def generate_stage1(n: int, seed: int, noise: float = 0.0) -> list[tuple[TaskDescriptor, int]]:
    """Log-uniform magnitudes within 1.5 decades of each type's threshold."""
    if n < 10:
        raise ValueError("need n >= 10")
    rng = np.random.default_rng(seed)
    types = rng.integers(0, len(TaskType), size=n)
    offsets = rng.uniform(-SPREAD_DECADES, SPREAD_DECADES, size=n)
    prefs = rng.random(n) < 0.5
    flips = rng.random(n) < noise
    rows = []
    for t, off, remote, flip in zip(types, offsets, prefs, flips):
        t = TaskType(int(t))
        m = max(1, int(round(MAGNITUDE_THRESHOLD[t] * 10 ** off)))
        label = int(is_intensive(t, m)) ^ int(flip)
        pref = Preference.RemoteAccess if remote else Preference.LocalAccess
        rows.append((TaskDescriptor(t, m, pref), label))
    return rows


def stage1_dataset(rows) -> LabeledDataset:
    x = np.array([featurize_task(d) for d, _ in rows]).reshape(-1, N_STAGE1_FEATURES)
    return LabeledDataset(x, np.array([lbl for _, lbl in rows], dtype=np.int64), 2)


def generate_stage1_dataset(n: int, seed: int, noise: float = 0.0) -> LabeledDataset:
    return stage1_dataset(generate_stage1(n, seed, noise))


STAGE1_HEADER = ["task_type", "input_magnitude", "user_pref", "label"]


def stage1_to_csv(rows) -> bytes:
    return to_csv(STAGE1_HEADER, ((d.task_type.name, d.magnitude, d.preference.value, lbl) for d, lbl in rows))


def stage1_from_csv(data: bytes | str) -> list[tuple[TaskDescriptor, int]]:
    header, rows = read_csv(data)
    if header != STAGE1_HEADER:
        raise ValueError(f"stage-1 CSV header must be {','.join(STAGE1_HEADER)}")
    return [(TaskDescriptor(TaskType[t], int(m), Preference(p)), int(lbl)) for t, m, p, lbl in rows]


# ---------------------------------------------------------------- stage 2 data
#
# A snapshot log alternates between a clear and a congested regime. Each
# segment has latent link quality; a row is labelled Offload when shipping a
# reference task over the latent link beats computing it on the device.

REF_TASK_MBIT = 20.0
REF_LOCAL_S = 0.6

_REGIMES = {
    # (throughput, latency, uplink traffic, downlink traffic, bandwidth) ranges
    "clear": ((40.0, 90.0), (10.0, 40.0), (5.0, 30.0), (10.0, 40.0), (95.0, 105.0)),
    "congested": ((5.0, 25.0), (80.0, 200.0), (40.0, 90.0), (50.0, 95.0), (60.0, 100.0)),
}


def transmission_cost(throughput_mbps: float, latency_ms: float) -> float:
    return REF_TASK_MBIT / max(throughput_mbps, 1e-9) + 2 * latency_ms / 1000.0


def generate_stage2_log(n_rows: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Rows of (uplink, downlink, throughput, latency, bandwidth) and per-row labels."""
    rng = np.random.default_rng(seed)
    rows, labels = [], []
    regime = "clear" if rng.random() < 0.5 else "congested"
    state = np.zeros(5)
    while len(rows) < n_rows:
        length = int(rng.integers(5, 41))
        # clear/congested segments come in equal-length pairs to keep classes balanced
        for _ in range(2):
            thr, lat, up, down, bw = (rng.uniform(*r) for r in _REGIMES[regime])
            latent = np.array([up, down, thr, lat, bw])
            label = int(transmission_cost(thr, lat) < REF_LOCAL_S)
            for _ in range(length):
                state = 0.6 * state + rng.normal(0.0, 0.08, size=5)
                rows.append(np.maximum(latent * (1.0 + state), 0.0))
                labels.append(label)
            regime = "congested" if regime == "clear" else "clear"
    return np.array(rows[:n_rows]), np.array(labels[:n_rows], dtype=np.int64)


def windows(log: np.ndarray, labels: np.ndarray, seq_len: int = SEQ_LEN) -> LabeledDataset:
    """Stride-1 windows over consecutive rows; each window takes its last row's label."""
    n = len(log) - seq_len + 1
    if n <= 0:
        raise ValueError(f"need at least {seq_len} rows to form a window")
    idx = np.arange(seq_len)[None, :] + np.arange(n)[:, None]
    return LabeledDataset(log[idx], labels[seq_len - 1:], 2)


def generate_stage2_dataset(n: int, seed: int) -> LabeledDataset:
    if n < 10:
        raise ValueError("need n >= 10")
    log, labels = generate_stage2_log(n + SEQ_LEN - 1, seed)
    return windows(log, labels)


STAGE2_HEADER = [*SNAPSHOT_FIELDS, "label"]


def stage2_to_csv(log: np.ndarray, labels: np.ndarray) -> bytes:
    return to_csv(STAGE2_HEADER, ([*(repr(float(v)) for v in row), int(lbl)] for row, lbl in zip(log, labels)))


def stage2_from_csv(data: bytes | str) -> tuple[np.ndarray, np.ndarray]:
    header, rows = read_csv(data)
    if header == list(SNAPSHOT_FIELDS):
        return np.array([[float(v) for v in r] for r in rows]).reshape(-1, 5), np.zeros(len(rows), dtype=np.int64)
    if header != STAGE2_HEADER:
        raise ValueError(f"stage-2 CSV header must be {','.join(STAGE2_HEADER)}")
    arr = np.array([[float(v) for v in r[:5]] for r in rows]).reshape(-1, 5)
    return arr, np.array([int(r[5]) for r in rows], dtype=np.int64)


def good_network_centroid(log: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return log[labels == Stage2.Offload].mean(axis=0)


def sample_window(seed: int, good: bool = True, seq_len: int = SEQ_LEN) -> np.ndarray:
    """First ``seq_len`` consecutive snapshots from a generated log that all share one label."""
    want = int(Stage2.Offload if good else Stage2.Local)
    log, labels = generate_stage2_log(400, seed)
    for end in range(seq_len, len(log) + 1):
        if np.all(labels[end - seq_len:end] == want):
            return log[end - seq_len:end]
    raise ValueError("no uniform window in the generated log")  # pragma: no cover


# ---------------------------------------------------------------- prediction and routing

stage2_invocations = 0


def predict_intensive(model: ModelWeights, d: TaskDescriptor) -> Stage1:
    if model.arch != Arch.MLP:
        raise ShapeError("stage-1 model must be an MLP")
    probs = forward(model, featurize_task(d))
    return Stage1(int(np.argmax(probs)))


def predict_offload(model: ModelWeights, window) -> Stage2:
    global stage2_invocations
    if model.arch != Arch.LSTM:
        raise ShapeError("stage-2 model must be an LSTM")
    w = np.asarray(window, dtype=np.float64)
    if w.ndim != 2 or w.shape != (model.hyper[2], model.hyper[0]):
        raise ShapeError(f"window must be {model.hyper[2]} snapshots of {model.hyper[0]} fields, got {w.shape}")
    stage2_invocations += 1
    return Stage2(int(np.argmax(forward(model, w))))


def decide(d: TaskDescriptor, window, stage1_model: ModelWeights, stage2_model: ModelWeights) -> Decision:
    s1 = predict_intensive(stage1_model, d)
    if s1 == Stage1.NotIntensive:
        if d.preference == Preference.RemoteAccess:
            return Decision(Verdict.OffloadCloud, s1, False)
        return Decision(Verdict.LocalExecute, s1, False)
    s2 = predict_offload(stage2_model, window)
    verdict = Verdict.OffloadEdge if s2 == Stage2.Offload else Verdict.LocalExecute
    return Decision(verdict, s1, True, s2)


def route(s1: Stage1, pref: Preference, s2: Stage2) -> Verdict:
    """The routing table on its own, for callers that already hold both stage outputs."""
    if s1 == Stage1.NotIntensive:
        return Verdict.OffloadCloud if pref == Preference.RemoteAccess else Verdict.LocalExecute
    return Verdict.OffloadEdge if s2 == Stage2.Offload else Verdict.LocalExecute


# ---------------------------------------------------------------- reference models

MODEL_DIR = Path(__file__).with_name("models")
STAGE1_FILE = "stage1.fldec"
STAGE2_FILE = "stage2.fldec"


def load_reference_models(directory=None) -> tuple[ModelWeights, ModelWeights]:
    from .fl import load_model

    d = Path(directory) if directory else MODEL_DIR
    return load_model(d / STAGE1_FILE), load_model(d / STAGE2_FILE)


def parse_task(name: str) -> TaskType:
    aliases = {
        "add": TaskType.CalculatorAdd,
        "sub": TaskType.CalculatorSub,
        "mul": TaskType.CalculatorMul,
        "div": TaskType.CalculatorDiv,
        "matmul": TaskType.MatrixMultiply,
        "file": TaskType.FileCreate,
        "sort": TaskType.Sort,
        "search": TaskType.Search,
    }
    key = name.strip()
    if key.lower() in aliases:
        return aliases[key.lower()]
    try:
        return TaskType[key]
    except KeyError:
        raise ValueError(f"unknown task type {name!r}") from None


def parse_preference(name: str) -> Preference:
    key = name.strip().lower()
    if key in ("local", "localaccess"):
        return Preference.LocalAccess
    if key in ("remote", "remoteaccess"):
        return Preference.RemoteAccess
    raise ValueError(f"unknown user preference {name!r}")
