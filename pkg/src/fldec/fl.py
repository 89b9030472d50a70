"""Synchronous federated averaging over the framed TCP protocol.

The server accepts a fixed number of clients, then for each round picks a
random subset, broadcasts the global weights, waits for every participant's
trained weights, averages them and installs the mean. Clients train on an
80/20 split of their data, keep the best model they have produced so far and
always upload the weights they just trained.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import wire
from .checksum import digest64
from .data import LabeledDataset, train_test_split
from .nn import (
    ModelWeights,
    TrainConfig,
    WeightDecodeError,
    deserialize_weights,
    evaluate,
    serialize_weights,
    train,
)
from .timing import TimingReport
from .wire import MsgType

log = logging.getLogger(__name__)


class FederationError(RuntimeError):
    pass


class FederationTimeout(FederationError, TimeoutError):
    pass


class AggregationError(FederationError, ValueError):
    pass


@dataclass
class FLConfig:
    rounds: int = 10
    epochs: int = 10
    batch_size: int = 200
    participant_fraction: float | Sequence[float] = 1.0
    expected_clients: int = 4
    listen: str = "127.0.0.1:0"
    accept_timeout: float = 60.0
    handshake_timeout: float = 10.0
    round_timeout: float = 300.0
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.expected_clients < 1:
            raise ValueError("expected_clients must be >= 1")
        fr = self.participant_fraction
        for a in fr if isinstance(fr, (list, tuple)) else [fr]:
            if not 0 < a <= 1:
                raise ValueError(f"participant fraction {a} outside (0, 1]")

    def fraction(self, round_index: int) -> float:
        fr = self.participant_fraction
        if isinstance(fr, (list, tuple)):
            return fr[min(round_index - 1, len(fr) - 1)]
        return fr


@dataclass
class ClientSession:
    client_id: int
    sock: socket.socket
    peer: tuple = ()
    offloads: bool = False
    name: str = ""
    last_weights: ModelWeights | None = None
    alive: bool = True

    @property
    def key_name(self) -> str:
        return self.name or str(self.client_id)


@dataclass
class RoundRecord:
    index: int
    participants: list[int]
    received: int
    digest: int
    wall_time: float
    selected: list[int] = field(default_factory=list)
    n_models: int = 0
    accuracy: float | None = None
    loss: float | None = None

    def as_dict(self) -> dict:
        return {
            "index": self.index,
            "participants": self.participants,
            "selected": self.selected,
            "received": self.received,
            "n_models": self.n_models,
            "digest": f"{self.digest:016x}",
            "wall_time": self.wall_time,
            "accuracy": self.accuracy,
            "loss": self.loss,
        }


def select_participants(sessions: Sequence[ClientSession], fraction: float, round_seed) -> list[ClientSession]:
    """``max(floor(fraction * |K|), 1)`` sessions drawn without replacement, id-sorted."""
    if not sessions:
        raise FederationError("no connected clients to select from")
    k = max(int(np.floor(fraction * len(sessions))), 1)
    ordered = sorted(sessions, key=lambda s: s.client_id)
    picks = np.random.default_rng(round_seed).choice(len(ordered), size=k, replace=False)
    return [ordered[i] for i in sorted(picks)]


def aggregate(models: Sequence[ModelWeights], ids: Sequence[int] | None = None) -> ModelWeights:
    """Unweighted element-wise mean, accumulated in the order given."""
    if not models:
        raise AggregationError("nothing to aggregate")
    ids = list(ids) if ids is not None else list(range(len(models)))
    ref = models[0]
    for cid, m in zip(ids, models):
        if not m.same_layout(ref):
            raise AggregationError(
                f"client {cid} sent {m.arch.name}{m.hyper}, expected {ref.arch.name}{ref.hyper}"
            )
    summed = {n: np.zeros_like(a) for n, a in ref.layers}
    for m in models:
        for n, a in m.layers:
            summed[n] += a
    return ref.replace({n: s / len(models) for n, s in summed.items()})


def weights_digest(w: ModelWeights) -> int:
    return digest64(b"".join(a.tobytes() for _, a in w.layers))


def round_seed(seed: int, round_index: int) -> tuple[int, int]:
    return (seed, round_index)


# ---------------------------------------------------------------- server


class FLServer:
    """Round coordinator. One reader thread per session feeds a single inbox."""

    def __init__(self, config: FLConfig, eval_set: LabeledDataset | None = None):
        self.config = config
        self.eval_set = eval_set
        self.sessions: list[ClientSession] = []
        self.records: list[RoundRecord] = []
        self.timing = TimingReport()
        self.inbox: queue.Queue = queue.Queue()
        self.accepted = threading.Event()
        self._lsock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._lsock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._lsock.bind(wire.parse_address(config.listen))
        except OSError as exc:
            self._lsock.close()
            raise FederationError(f"cannot bind {config.listen}: {exc}") from exc
        self._lsock.listen(max(8, config.expected_clients))
        self.address = self._lsock.getsockname()[:2]

    # -- accept / handshake

    def accept(self) -> list[ClientSession]:
        deadline = time.monotonic() + self.config.accept_timeout
        while len(self.sessions) < self.config.expected_clients:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise FederationTimeout(
                    f"only {len(self.sessions)} of {self.config.expected_clients} clients connected"
                )
            self._lsock.settimeout(min(remaining, 1.0))
            try:
                sock, peer = self._lsock.accept()
            except socket.timeout:
                continue
            session = self._handshake(sock, peer)
            if session is not None:
                self.sessions.append(session)
        for s in self.sessions:
            threading.Thread(target=self._reader, args=(s,), daemon=True, name=f"fl-reader-{s.client_id}").start()
        self.accepted.set()
        return list(self.sessions)

    def _handshake(self, sock: socket.socket, peer) -> ClientSession | None:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(self.config.handshake_timeout)
        try:
            frame = wire.recv_frame(sock)
            if frame.type != MsgType.HELLO:
                wire.send_error(sock, f"expected HELLO, got type 0x{frame.type:02x}")
                raise wire.ProtocolError("no HELLO")
            offloads, name = wire.parse_hello(frame.payload)
            cid = len(self.sessions)
            wire.send_frame(sock, MsgType.WELCOME, wire.welcome_payload(cid))
        except (OSError, wire.ProtocolError, UnicodeDecodeError) as exc:
            log.warning("handshake with %s failed: %s; slot stays open", peer, exc)
            sock.close()
            return None
        sock.settimeout(None)
        log.info("client %d connected from %s", cid, peer)
        return ClientSession(cid, sock, peer, offloads, name)

    def _reader(self, s: ClientSession) -> None:
        while True:
            try:
                frame = wire.recv_frame(s.sock)
            except (OSError, wire.ConnectionClosed) as exc:
                self.inbox.put(("closed", s.client_id, str(exc)))
                return
            if not frame.known:
                wire.send_error(s.sock, f"unknown message type 0x{frame.type:02x}")
                continue
            self.inbox.put(("frame", s.client_id, frame))

    def _session(self, cid: int) -> ClientSession:
        return self.sessions[cid]

    def _drop(self, cid: int, why: str, level: int = logging.WARNING) -> None:
        s = self._session(cid)
        if s.alive:
            log.log(level, "dropping client %d: %s", cid, why)
            s.alive = False
            try:
                s.sock.close()
            except OSError:
                pass

    def alive(self) -> list[ClientSession]:
        return [s for s in self.sessions if s.alive]

    def _handle_other(self, cid: int, frame: wire.Frame) -> None:
        """Frames that are valid but out of phase."""
        wire.send_error(self._session(cid).sock, f"unexpected message type 0x{frame.type:02x} in this phase")

    # -- rounds

    def broadcast(self, targets: list[ClientSession], weights: ModelWeights) -> None:
        t0 = time.perf_counter()
        payload = serialize_weights(weights)
        for s in targets:
            try:
                wire.send_frame(s.sock, MsgType.GLOBAL_WEIGHTS, payload)
            except OSError as exc:
                self._drop(s.client_id, f"send failed: {exc}")
        self.timing.add("exm", time.perf_counter() - t0)

    def collect(self, targets: list[ClientSession]) -> dict[int, ModelWeights]:
        pending = {s.client_id for s in targets if s.alive}
        got: dict[int, ModelWeights] = {}
        deadline = time.monotonic() + self.config.round_timeout
        t_start = time.perf_counter()
        decode_time = 0.0
        while pending:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                for cid in sorted(pending):
                    self._drop(cid, "round deadline passed")
                break
            try:
                kind, cid, item = self.inbox.get(timeout=remaining)
            except queue.Empty:
                continue
            if kind == "closed":
                self._drop(cid, item)
                pending.discard(cid)
                continue
            frame = item
            if frame.type != MsgType.CLIENT_WEIGHTS:
                self._handle_other(cid, frame)
                continue
            if cid not in pending:
                wire.send_error(self._session(cid).sock, "weights not requested this round")
                continue
            t0 = time.perf_counter()
            try:
                w = deserialize_weights(frame.payload)
            except WeightDecodeError as exc:
                wire.send_error(self._session(cid).sock, f"bad weights: {exc}")
                continue
            finally:
                decode_time += time.perf_counter() - t0
            got[cid] = w
            self._session(cid).last_weights = w
            pending.discard(cid)
        self.timing.add("exm", decode_time)
        self.timing.add("loc", time.perf_counter() - t_start - decode_time)
        return got

    def extra_models(self, round_index: int, current: ModelWeights) -> list[ModelWeights]:
        """Models appended to the client uploads before averaging (none in plain FL)."""
        return []

    def run(self, init: ModelWeights, init_seconds: float = 0.0, persist: str | None = None):
        if not self.accepted.is_set():
            raise FederationError("server_accept must complete first")
        self.timing.init += init_seconds
        self.prepare(init)
        current = init
        for r in range(1, self.config.rounds + 1):
            t_round = time.perf_counter()
            alive = self.alive()
            if not alive:
                raise FederationError(f"round {r}: no clients left")
            chosen = select_participants(alive, self.config.fraction(r), round_seed(self.config.seed, r))
            self.broadcast(chosen, current)
            got = self.collect(chosen)
            extra = self.extra_models(r, current)
            if not got and not extra:
                raise FederationError(f"round {r}: no models received, aborting run")
            ids = sorted(got)
            models = [got[c] for c in ids] + extra
            t0 = time.perf_counter()
            current = aggregate(models, ids + [-1] * len(extra))
            self.timing.add("agg", time.perf_counter() - t0)
            rec = RoundRecord(
                index=r,
                participants=ids,
                received=len(ids),
                digest=weights_digest(current),
                wall_time=time.perf_counter() - t_round,
                selected=[s.client_id for s in chosen],
                n_models=len(models),
            )
            if self.eval_set is not None and len(self.eval_set):
                m = evaluate(current, self.eval_set)
                rec.accuracy, rec.loss = m.accuracy, m.loss
            self.records.append(rec)
            log.info("round %d: %d models averaged", r, len(models))
        if persist:
            save_model(current, persist)
        self.release()
        return current, list(self.records)

    def prepare(self, init: ModelWeights) -> None:
        """Hook run once before round 1."""

    def release(self) -> None:
        for s in self.alive():
            try:
                wire.send_frame(s.sock, MsgType.RELEASE)
            except OSError:
                pass
            self._drop(s.client_id, "released", logging.INFO)
        self.close()

    def close(self) -> None:
        try:
            self._lsock.close()
        except OSError:
            pass


def server_accept(config: FLConfig) -> FLServer:
    server = FLServer(config)
    server.accept()
    return server


def server_run(server: FLServer, init: ModelWeights, persist: str | None = None):
    return server.run(init, persist=persist)


# ---------------------------------------------------------------- client


class ClientAborted(RuntimeError):
    def __init__(self, msg: str, best: ModelWeights | None = None):
        super().__init__(msg)
        self.best = best


class ShardRejected(ClientAborted):
    pass


@dataclass
class ClientResult:
    client_id: int
    best: ModelWeights | None
    best_accuracy: float
    history: list[dict]
    train_size: int
    test_size: int
    timing: TimingReport = field(default_factory=TimingReport)


MODEL_MAGIC = b"FLDEC-MODEL\0\0\0\0\0"


def save_model(w: ModelWeights, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC + serialize_weights(w))


def load_model(path) -> ModelWeights:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MODEL_MAGIC):
        raise WeightDecodeError(f"{path} is not a model file (bad magic)")
    return deserialize_weights(data[len(MODEL_MAGIC):])


def client_run(
    dataset: LabeledDataset,
    server_address,
    train_config: TrainConfig,
    *,
    split_seed: int = 0,
    name: str = "",
    shard_token: bytes | None = None,
    persist: str | None = None,
    on_welcome: Callable[[int], None] | None = None,
    connect_timeout: float = 30.0,
) -> ClientResult:
    """Run the client side until RELEASE. Returns the best model seen.

    ``shard_token`` (already encrypted) is sent once, right after the handshake.
    """
    if len(dataset) == 0:
        raise ValueError("client dataset is empty")
    train_set, test_set = train_test_split(dataset, split_seed)
    if len(train_set) == 0 or len(test_set) == 0:
        raise ValueError(f"dataset of {len(dataset)} rows is too small for an 80/20 split")
    sock = wire.connect(server_address, timeout=connect_timeout)
    sock.settimeout(None)
    best: ModelWeights | None = None
    best_acc = 0.0
    history: list[dict] = []
    timing = TimingReport()

    def finish(status_exc: Exception | None = None):
        if persist and best is not None:
            save_model(best, persist)
        if status_exc is not None:
            raise status_exc

    try:
        wire.send_frame(sock, MsgType.HELLO, wire.hello_payload(shard_token is not None, name))
        frame = wire.recv_frame(sock)
        if frame.type != MsgType.WELCOME:
            raise ClientAborted(f"expected WELCOME, got 0x{frame.type:02x}")
        cid = wire.parse_welcome(frame.payload)
        if on_welcome:
            on_welcome(cid)
        if shard_token is not None:
            t0 = time.perf_counter()
            wire.send_frame(sock, MsgType.DATA_SHARD, wire.shard_payload(cid, shard_token))
            timing.add("tr", time.perf_counter() - t0)
        t = 0
        while True:
            frame = wire.recv_frame(sock)
            if frame.type == MsgType.RELEASE:
                break
            if frame.type == MsgType.ERROR:
                text = frame.payload.decode("utf-8", errors="replace")
                if text.startswith("DATA_SHARD"):
                    raise ShardRejected(text, best)
                log.warning("client %d: server error: %s", cid, text)
                continue
            if frame.type != MsgType.GLOBAL_WEIGHTS:
                continue
            t += 1
            t0 = time.perf_counter()
            global_w = deserialize_weights(frame.payload)
            t1 = time.perf_counter()
            trained, _ = train(global_w, train_set, replace(train_config, seed=train_config.seed + t))
            metrics = evaluate(trained, test_set)
            t2 = time.perf_counter()
            if best is None or best_acc < metrics.accuracy:
                best, best_acc = trained, metrics.accuracy
            wire.send_frame(sock, MsgType.CLIENT_WEIGHTS, serialize_weights(trained))
            timing.add("exm", (t1 - t0) + (time.perf_counter() - t2))
            timing.add("loc", t2 - t1)
            history.append({"round": t, "accuracy": metrics.accuracy, "loss": metrics.loss})
    except ClientAborted as exc:
        exc.best = best
        sock.close()
        finish(exc)
    except (OSError, wire.ConnectionClosed, wire.ProtocolError, WeightDecodeError) as exc:
        sock.close()
        finish(ClientAborted(f"connection to server lost: {exc}", best))
    sock.close()
    finish()
    return ClientResult(cid, best, best_acc, history, len(train_set), len(test_set), timing)


# ---------------------------------------------------------------- in-process loopback runs


@dataclass
class FederationResult:
    final: ModelWeights
    records: list[RoundRecord]
    clients: list[ClientResult | BaseException]
    timing: TimingReport
    server: FLServer


def run_federation(
    server: FLServer,
    init: ModelWeights,
    client_sets: Sequence[LabeledDataset],
    train_config: TrainConfig,
    *,
    init_seconds: float = 0.0,
    client_kwargs: Sequence[dict] | None = None,
    client_fn: Callable[..., ClientResult] | None = None,
    join_timeout: float = 600.0,
) -> FederationResult:
    """Drive one server and ``len(client_sets)`` clients over loopback TCP.

    Clients connect one at a time so client ids follow list order, which keeps
    runs bit-reproducible.
    """
    box: dict = {}

    def serve():
        try:
            server.accept()
            box["out"] = server.run(init, init_seconds=init_seconds)
        except BaseException as exc:  # surfaced to the caller below
            box["err"] = exc
            server.close()

    results: list = [None] * len(client_sets)

    def client(i: int, welcomed: threading.Event):
        kw = dict(client_kwargs[i]) if client_kwargs else {}
        kw.setdefault("split_seed", 1000 + i)
        user_cb = kw.pop("on_welcome", None)

        def cb(cid):
            welcomed.set()
            if user_cb:
                user_cb(cid)

        cfg = replace(train_config, seed=train_config.seed + 7919 * i)
        try:
            results[i] = (client_fn or client_run)(client_sets[i], server.address, cfg, on_welcome=cb, **kw)
        except BaseException as exc:
            results[i] = exc
            welcomed.set()

    st = threading.Thread(target=serve, name="fl-server", daemon=True)
    st.start()
    threads = []
    for i in range(len(client_sets)):
        ev = threading.Event()
        th = threading.Thread(target=client, args=(i, ev), name=f"fl-client-{i}", daemon=True)
        th.start()
        ev.wait(timeout=server.config.accept_timeout)
        threads.append(th)
    st.join(join_timeout)
    for th in threads:
        th.join(join_timeout)
    if "err" in box:
        raise box["err"]
    if "out" not in box:
        raise FederationTimeout("server did not finish in time")
    final, records = box["out"]
    return FederationResult(final, records, results, server.timing, server)
