"""Labeled datasets: containers, seeded splits and CSV round-tripping."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class LabeledDataset:
    """Feature rows (``(N, F)``) or feature sequences (``(N, T, F)``) with integer labels.

    ``index`` keeps the original row positions so shards can be re-assembled
    and checked against the source.
    """

    x: np.ndarray
    y: np.ndarray
    n_classes: int
    index: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"x has {x.shape[0]} rows but y has {y.shape[0]}")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        idx = np.arange(len(y)) if self.index is None else np.asarray(self.index, dtype=np.int64)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "index", idx)

    def __len__(self) -> int:
        return int(self.y.shape[0])

    def take(self, rows) -> "LabeledDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return LabeledDataset(self.x[rows], self.y[rows], self.n_classes, self.index[rows])

    @staticmethod
    def concat(parts: list["LabeledDataset"]) -> "LabeledDataset":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("nothing to concatenate")
        return LabeledDataset(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.y for p in parts]),
            max(p.n_classes for p in parts),
            np.concatenate([p.index for p in parts]),
        )


def train_test_split(ds: LabeledDataset, seed: int, train_fraction: float = 0.8):
    """Seeded, unstratified shuffle split; the train side gets ``floor(0.8 N)`` rows."""
    if len(ds) == 0:
        raise ValueError("cannot split an empty dataset")
    perm = np.random.default_rng(seed).permutation(len(ds))
    n_train = int(np.floor(train_fraction * len(ds)))
    return ds.take(perm[:n_train]), ds.take(perm[n_train:])


def partition(ds: LabeledDataset, n_parts: int, seed: int) -> list[LabeledDataset]:
    """Shuffle and deal ``ds`` into ``n_parts`` near-equal IID shards."""
    perm = np.random.default_rng(seed).permutation(len(ds))
    return [ds.take(chunk) for chunk in np.array_split(perm, n_parts)]


def _fmt(v: float) -> str:
    return repr(float(v))


def to_csv(header: list[str], rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(row)
    return buf.getvalue().encode("utf-8")


def read_csv(data: bytes | str) -> tuple[list[str], list[list[str]]]:
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    reader = csv.reader(io.StringIO(text))
    rows = [r for r in reader if r]
    if not rows:
        raise ValueError("empty CSV")
    return rows[0], rows[1:]


def flat_to_csv(ds: LabeledDataset, feature_names: list[str]) -> bytes:
    """Generic numeric CSV: one column per feature plus ``label``."""
    if ds.x.ndim != 2:
        raise ValueError("flat CSV needs (N, F) features")
    return to_csv(
        [*feature_names, "label"],
        ([*map(_fmt, row), int(lbl)] for row, lbl in zip(ds.x, ds.y)),
    )


def flat_from_csv(data: bytes | str, n_classes: int) -> LabeledDataset:
    header, rows = read_csv(data)
    if header[-1] != "label":
        raise ValueError("last CSV column must be 'label'")
    if not rows:
        return LabeledDataset(np.zeros((0, len(header) - 1)), np.zeros(0, dtype=np.int64), n_classes)
    arr = np.array([[float(v) for v in r[:-1]] for r in rows])
    return LabeledDataset(arr, np.array([int(r[-1]) for r in rows]), n_classes)
