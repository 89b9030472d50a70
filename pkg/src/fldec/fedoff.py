"""Federated learning with partial data offloading.

Each client keeps a local shard and ships the rest, Fernet-encrypted, to the
server once before round 1. The server pools the shards, trains its own
candidate from the current global model every round and averages its best
candidate in with the client uploads.
"""

from __future__ import annotations

import logging
import queue
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import crypto, wire
from .crypto import ClientKey
from .data import LabeledDataset, flat_from_csv, flat_to_csv, train_test_split
from .fl import (
    ClientResult,
    FederationError,
    FLConfig,
    FLServer,
    client_run,
    run_federation,
)
from .nn import Arch, ModelWeights, TrainConfig, evaluate, train
from .timing import EnergyReport, TimingReport, energy, total_time  # noqa: F401  (re-exported)
from .wire import MsgType

log = logging.getLogger(__name__)

SPLIT_RATIOS = (0.25, 0.5, 0.75)


class ShardError(FederationError):
    pass


@dataclass
class FedOffConfig(FLConfig):
    rounds: int = 5
    expected_clients: int = 5
    keys: dict[str, ClientKey] = field(default_factory=dict)
    server_seed: int = 0
    shard_timeout: float = 120.0
    train: TrainConfig = field(default_factory=TrainConfig)


def split_dataset(ds: LabeledDataset, local_fraction: float, seed: int):
    """Seeded (local, offload) partition with ``floor(local_fraction * N)`` local rows."""
    if not 0 < local_fraction <= 1:
        raise ValueError(f"local fraction {local_fraction} outside (0, 1]")
    if len(ds) == 0:
        raise ValueError("cannot split an empty dataset")
    if local_fraction == 1:
        # nothing offloaded: keep the original row order so runs match plain FL
        return ds, ds.take(np.zeros(0, dtype=np.int64))
    perm = np.random.default_rng(seed).permutation(len(ds))
    n_local = int(np.floor(local_fraction * len(ds)))
    return ds.take(perm[:n_local]), ds.take(perm[n_local:])


def encode_shard(ds: LabeledDataset) -> bytes:
    flat = ds.x.reshape(len(ds), -1)
    names = [f"f{i}" for i in range(flat.shape[1])]
    return flat_to_csv(LabeledDataset(flat, ds.y, ds.n_classes, ds.index), names)


def decode_shard(plaintext: bytes, model: ModelWeights) -> LabeledDataset:
    ds = flat_from_csv(plaintext, model.n_classes)
    if model.arch == Arch.LSTM and len(ds):
        f, _, steps, _ = model.hyper
        ds = LabeledDataset(ds.x.reshape(len(ds), steps, f), ds.y, ds.n_classes)
    return ds


class FedOffServer(FLServer):
    def __init__(self, config: FedOffConfig, eval_set: LabeledDataset | None = None):
        super().__init__(config, eval_set)
        self.config: FedOffConfig = config
        self.pool: LabeledDataset | None = None
        self.pool_train: LabeledDataset | None = None
        self.pool_test: LabeledDataset | None = None
        self.shard_sizes: dict[int, int] = {}
        self.rejected: dict[int, str] = {}
        self.server_model: ModelWeights | None = None
        self.server_accuracy = 0.0
        self.server_history: list[dict] = []

    def prepare(self, init: ModelWeights) -> None:
        pending = {s.client_id for s in self.sessions if s.offloads and s.alive}
        parts: list[LabeledDataset] = []
        t_start = time.perf_counter()
        crypt = 0.0
        deadline = time.monotonic() + self.config.shard_timeout
        while pending:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                log.warning("no shard from clients %s before deadline", sorted(pending))
                break
            try:
                kind, cid, item = self.inbox.get(timeout=remaining)
            except queue.Empty:
                continue
            if kind == "closed":
                self._drop(cid, item)
                pending.discard(cid)
                continue
            if item.type != MsgType.DATA_SHARD or cid not in pending:
                self._handle_other(cid, item)
                continue
            pending.discard(cid)
            session = self._session(cid)
            t0 = time.perf_counter()
            try:
                claimed, token = wire.parse_shard(item.payload)
                if claimed != cid:
                    raise ShardError(f"shard claims client {claimed}, connection is client {cid}")
                key = self.config.keys.get(session.key_name)
                if key is None:
                    raise ShardError(f"no key provisioned for {session.key_name!r}")
                plaintext = crypto.decrypt(key, token)
            except (wire.ProtocolError, ShardError, crypto.InvalidToken) as exc:
                crypt += time.perf_counter() - t0
                self.rejected[cid] = str(exc)
                wire.send_error(session.sock, f"DATA_SHARD rejected: {exc}")
                continue
            crypt += time.perf_counter() - t0
            try:
                shard = decode_shard(plaintext, init)
            except ValueError as exc:
                self.rejected[cid] = str(exc)
                wire.send_error(session.sock, f"DATA_SHARD rejected: {exc}")
                continue
            self.shard_sizes[cid] = len(shard)
            if len(shard):
                parts.append(shard)
        self.timing.add("crypt", crypt)
        self.timing.add("tr", time.perf_counter() - t_start - crypt)

        if parts:
            self.pool = LabeledDataset.concat(parts)
            self.pool_train, self.pool_test = train_test_split(self.pool, self.config.server_seed)
            if len(self.pool_train) == 0:
                self.pool_train, self.pool_test = self.pool, None
        elif not self.alive():
            raise FederationError("no training data anywhere: no shards and no clients")

    def extra_models(self, round_index: int, current: ModelWeights) -> list[ModelWeights]:
        if self.pool_train is None:
            return []
        t0 = time.perf_counter()
        cfg = replace(self.config.train, seed=self.config.train.seed + round_index)
        candidate, train_metrics = train(current, self.pool_train, cfg)
        acc = evaluate(candidate, self.pool_test).accuracy if self.pool_test is not None and len(self.pool_test) else train_metrics.accuracy
        if self.server_model is None or self.server_accuracy < acc:
            self.server_model, self.server_accuracy = candidate, acc
        self.server_history.append({"round": round_index, "accuracy": acc})
        self.timing.add("ser", time.perf_counter() - t0)
        return [self.server_model]


def client_run_fedoff(
    dataset: LabeledDataset,
    server_address,
    train_config: TrainConfig,
    *,
    local_fraction: float,
    key: ClientKey | None,
    split_seed: int = 0,
    offload_seed: int | None = None,
    **kwargs,
) -> ClientResult:
    """Split, encrypt and ship the offload shard once, then run as a plain FL client."""
    local, offload = split_dataset(dataset, local_fraction, split_seed if offload_seed is None else offload_seed)
    token = None
    crypt = 0.0
    if len(offload):
        if key is None:
            raise ValueError("a key is required to offload data")
        plaintext = encode_shard(offload)
        t0 = time.perf_counter()
        token = crypto.encrypt(key, plaintext)
        crypt = time.perf_counter() - t0
    result = client_run(local, server_address, train_config, split_seed=split_seed, shard_token=token, **kwargs)
    result.timing.crypt += crypt
    return result


def run_fedoff(
    server: FedOffServer,
    init: ModelWeights,
    client_sets: Sequence[LabeledDataset],
    local_fractions: Sequence[float],
    train_config: TrainConfig,
    *,
    names: Sequence[str] | None = None,
    keys: Sequence[ClientKey | None] | None = None,
    init_seconds: float = 0.0,
):
    """Loopback FedOff run; client ``i`` announces itself as ``names[i]``."""
    names = list(names) if names else [f"client{i}" for i in range(len(client_sets))]
    keys = list(keys) if keys else [server.config.keys.get(n) for n in names]
    kwargs = [
        {"local_fraction": lf, "key": k, "name": n}
        for lf, k, n in zip(local_fractions, keys, names)
    ]
    return run_federation(
        server,
        init,
        client_sets,
        train_config,
        init_seconds=init_seconds,
        client_kwargs=kwargs,
        client_fn=client_run_fedoff,
    )
