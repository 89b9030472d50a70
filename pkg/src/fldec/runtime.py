"""Case-study tasks, run on the device or shipped to an edge/cloud service.

Response times are wall-clock measurements adjusted by a cost harness: the
device runs ``device_slowdown`` times slower than the edge, and every message
crossing the modeled network pays a fixed latency plus its serialization
time on the link. Energy is device power times response time.
"""

from __future__ import annotations

import enum
import itertools
import logging
import operator
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass, field, replace
from decimal import Context, Decimal
from pathlib import Path

import numpy as np

from . import wire
from .checksum import digest64
from .decision import Decision, Preference, TaskDescriptor, TaskType
from .timing import DEFAULT_POWER_W, energy
from .wire import MsgType

log = logging.getLogger(__name__)

CALC_TYPES = (TaskType.CalculatorAdd, TaskType.CalculatorSub, TaskType.CalculatorMul, TaskType.CalculatorDiv)
DIV_CONTEXT = Context(prec=50)


class Site(enum.IntEnum):
    Device = 0
    Edge = 1
    Cloud = 2


class TaskError(RuntimeError):
    pass


class OffloadError(RuntimeError):
    pass


class IntegrityError(OffloadError):
    pass


_ids = itertools.count(1)


@dataclass(frozen=True)
class TaskRequest:
    """A task plus the inputs needed to reproduce it anywhere.

    Calculator tasks carry operands ``a``/``b``; matrices, arrays and file
    contents are regenerated from seeds on whichever side executes.
    """

    descriptor: TaskDescriptor
    a: int = 0
    b: int = 0
    seed_a: int = 0
    seed_b: int = 0
    identity_b: bool = False
    target: int = 0
    to_cloud: bool = False
    request_id: int = field(default_factory=lambda: next(_ids))

    @property
    def task_type(self) -> TaskType:
        return self.descriptor.task_type

    @property
    def n(self) -> int:
        return self.descriptor.magnitude

    @classmethod
    def calculator(cls, op: TaskType, a: int, b: int, pref=Preference.LocalAccess, **kw):
        digits = max(len(str(abs(a))), len(str(abs(b))))
        return cls(TaskDescriptor(op, digits, pref), a=a, b=b, **kw)

    @classmethod
    def matmul(cls, n: int, seed_a: int = 1, seed_b: int = 2, identity_b: bool = False, pref=Preference.LocalAccess, **kw):
        return cls(TaskDescriptor(TaskType.MatrixMultiply, n, pref), seed_a=seed_a, seed_b=seed_b, identity_b=identity_b, **kw)

    @classmethod
    def file(cls, size: int, seed: int = 0, pref=Preference.LocalAccess, **kw):
        return cls(TaskDescriptor(TaskType.FileCreate, size, pref), seed_a=seed, **kw)

    @classmethod
    def sort(cls, m: int, seed: int = 0, pref=Preference.LocalAccess, **kw):
        return cls(TaskDescriptor(TaskType.Sort, m, pref), seed_a=seed, **kw)

    @classmethod
    def search(cls, m: int, seed: int = 0, target: int = 0, pref=Preference.LocalAccess, **kw):
        return cls(TaskDescriptor(TaskType.Search, m, pref), seed_a=seed, target=target, **kw)


@dataclass(frozen=True)
class TaskResult:
    request_id: int
    digest: int
    site: Site
    ok: bool
    body: str


@dataclass(frozen=True)
class ExecutionRecord:
    decision: Decision | None
    executed_at: Site
    response_time: float
    device_energy: float
    result_digest: int
    power_w: float = DEFAULT_POWER_W
    forwarded: bool = False

    def as_dict(self) -> dict:
        return {
            "decision": self.decision.as_dict() if self.decision else None,
            "executed_at": self.executed_at.name,
            "response_time_s": self.response_time,
            "device_energy_j": self.device_energy,
            "power_w": self.power_w,
            "result_digest": f"{self.result_digest:016x}",
            "forwarded": self.forwarded,
        }


@dataclass(frozen=True)
class CostHarness:
    """Modeled network and device speed used to price executions."""

    device_slowdown: float = 4.0
    link_mbps: float = 1000.0
    latency_s: float = 0.05
    power_w: float = DEFAULT_POWER_W

    def link_time(self, n_bytes: int) -> float:
        return self.latency_s + n_bytes * 8 / (self.link_mbps * 1e6)

    @classmethod
    def calibrated(cls, device_slowdown: float = 1.4, latency_fraction: float = 0.05, **kw) -> "CostHarness":
        """Preset whose per-message latency is tied to this host's measured speed.

        Latency is ``latency_fraction`` times the edge-speed time of a 100x100
        naive matrix product, so cost orderings do not depend on how fast the
        test machine is.
        """
        ref = TaskRequest.matmul(100, 11, 12)
        best = min(_timed(lambda: run_task(ref))[1] for _ in range(3))
        return cls(device_slowdown=device_slowdown, latency_s=latency_fraction * best, **kw)


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


# ---------------------------------------------------------------- task kernels


def gen_matrix(n: int, seed: int) -> list[list[int]]:
    return np.random.default_rng(seed).integers(0, 10, size=(n, n)).tolist()


def identity(n: int) -> list[list[int]]:
    return [[int(i == j) for j in range(n)] for i in range(n)]


def naive_matmul(a: list[list[int]], b: list[list[int]]) -> list[list[int]]:
    """Schoolbook i-j-k product; the k loop runs inside ``sum(map(...))``."""
    cols = list(zip(*b))
    mul = operator.mul
    return [[sum(map(mul, row, col)) for col in cols] for row in a]


def matrix_digest(m: list[list[int]]) -> int:
    return digest64(np.asarray(m, dtype=np.int64).tobytes())


def gen_array(m: int, seed: int) -> list[int]:
    return np.random.default_rng(seed).integers(0, 1 << 31, size=m).tolist()


def file_bytes(size: int, seed: int) -> bytes:
    return np.random.default_rng(seed).integers(0, 256, size=size, dtype=np.uint8).tobytes()


def run_task(req: TaskRequest, sandbox: Path | None = None) -> TaskResult:
    """Execute ``req`` in this process and return its digest-stamped result."""
    t = req.task_type
    if t in CALC_TYPES:
        a, b = req.a, req.b
        if t == TaskType.CalculatorAdd:
            body = str(a + b)
        elif t == TaskType.CalculatorSub:
            body = str(a - b)
        elif t == TaskType.CalculatorMul:
            body = str(a * b)
        else:
            if b == 0:
                return TaskResult(req.request_id, 0, Site.Device, False, "division by zero")
            body = str(DIV_CONTEXT.divide(Decimal(a), Decimal(b)).normalize(DIV_CONTEXT))
        return TaskResult(req.request_id, digest64(body.encode()), Site.Device, True, body)
    if t == TaskType.MatrixMultiply:
        a = gen_matrix(req.n, req.seed_a)
        b = identity(req.n) if req.identity_b else gen_matrix(req.n, req.seed_b)
        prod = naive_matmul(a, b)
        trace = sum(prod[i][i] for i in range(req.n))
        return TaskResult(req.request_id, matrix_digest(prod), Site.Device, True, f"trace={trace}")
    if t == TaskType.FileCreate:
        if sandbox is None:
            raise TaskError("file creation needs a sandbox directory")
        data = file_bytes(req.n, req.seed_a)
        path = Path(sandbox) / f"task-{req.request_id}.bin"
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(data)
        except OSError as exc:
            return TaskResult(req.request_id, 0, Site.Device, False, f"cannot write {path}: {exc}")
        return TaskResult(req.request_id, digest64(data), Site.Device, True, path.name)
    if t == TaskType.Sort:
        out = sorted(gen_array(req.n, req.seed_a))
        return TaskResult(req.request_id, digest64(np.asarray(out, dtype=np.int64).tobytes()), Site.Device, True, f"min={out[0]} max={out[-1]}")
    arr = gen_array(req.n, req.seed_a)
    try:
        pos = arr.index(req.target)
    except ValueError:
        pos = -1
    body = str(pos)
    return TaskResult(req.request_id, digest64(body.encode()), Site.Device, True, body)


# ---------------------------------------------------------------- wire codec


def _int_field(v: int) -> bytes:
    raw = v.to_bytes((v.bit_length() + 8) // 8 or 1, "big", signed=True)
    return struct.pack(">I", len(raw)) + raw


CLOUD_FLAG = 0x80


def encode_request(req: TaskRequest) -> bytes:
    """``[u8 task type | 0x80 if cloud-bound][u64 request id][type fields]``, big-endian."""
    t = req.task_type
    out = struct.pack(">BQ", int(t) | (CLOUD_FLAG if req.to_cloud else 0), req.request_id)
    if t in CALC_TYPES:
        return out + _int_field(req.a) + _int_field(req.b)
    if t == TaskType.MatrixMultiply:
        return out + struct.pack(">IQQB", req.n, req.seed_a, req.seed_b, int(req.identity_b))
    if t in (TaskType.FileCreate, TaskType.Sort):
        return out + struct.pack(">QQ", req.n, req.seed_a)
    return out + struct.pack(">QQq", req.n, req.seed_a, req.target)


def decode_request(payload: bytes) -> TaskRequest:
    try:
        req = _decode_fields(payload)
    except (struct.error, ValueError) as exc:
        raise wire.ProtocolError(f"malformed task request: {exc}") from None
    return req


def _decode_fields(payload: bytes) -> TaskRequest:
    tb, rid = struct.unpack(">BQ", payload[:9])
    t = TaskType(tb & ~CLOUD_FLAG)
    cloud = bool(tb & CLOUD_FLAG)
    rest = payload[9:]
    if t in CALC_TYPES:
        (la,) = struct.unpack(">I", rest[:4])
        a = int.from_bytes(rest[4:4 + la], "big", signed=True)
        (lb,) = struct.unpack(">I", rest[4 + la:8 + la])
        b = int.from_bytes(rest[8 + la:8 + la + lb], "big", signed=True)
        if len(rest) != 8 + la + lb or la == 0 or lb == 0:
            raise ValueError("bad operand lengths")
        return TaskRequest.calculator(t, a, b, request_id=rid, to_cloud=cloud)
    if t == TaskType.MatrixMultiply:
        n, sa, sb, flags = struct.unpack(">IQQB", rest)
        return TaskRequest.matmul(n, sa, sb, bool(flags & 1), request_id=rid, to_cloud=cloud)
    if t in (TaskType.FileCreate, TaskType.Sort):
        n, seed = struct.unpack(">QQ", rest)
        return TaskRequest(TaskDescriptor(t, n), seed_a=seed, request_id=rid, to_cloud=cloud)
    n, seed, target = struct.unpack(">QQq", rest)
    return TaskRequest.search(n, seed, target, request_id=rid, to_cloud=cloud)


def encode_result(res: TaskResult) -> bytes:
    body = res.body.encode("utf-8")
    return struct.pack(">QQBB", res.digest, res.request_id, int(res.site), int(not res.ok)) + body


def decode_result(payload: bytes) -> TaskResult:
    if len(payload) < 18:
        raise wire.ProtocolError("task result too short")
    digest, rid, site, status = struct.unpack(">QQBB", payload[:18])
    return TaskResult(rid, digest, Site(site), status == 0, payload[18:].decode("utf-8"))


# ---------------------------------------------------------------- services


@dataclass
class CapacityPolicy:
    max_concurrent: int = 8
    max_matmul_order: int | None = 512


class TaskService(socketserver.ThreadingTCPServer):
    """Edge or cloud executor. The edge forwards what its policy declines."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, bind, site: Site, sandbox: Path, cloud=None, policy: CapacityPolicy | None = None):
        self.site = site
        self.sandbox = Path(sandbox)
        self.cloud = wire.parse_address(cloud) if cloud else None
        self.policy = policy or CapacityPolicy()
        self.slots = threading.BoundedSemaphore(self.policy.max_concurrent)
        self.executed: list[int] = []
        self.forwarded: list[int] = []
        self._lock = threading.Lock()
        super().__init__(wire.parse_address(bind), _TaskHandler)

    @property
    def address(self):
        return self.server_address[:2]

    def declines(self, req: TaskRequest) -> bool:
        if self.site != Site.Edge:
            return False
        if req.to_cloud:
            return True
        cap = self.policy.max_matmul_order
        return req.task_type == TaskType.MatrixMultiply and cap is not None and req.n > cap

    def handle_request_payload(self, payload: bytes) -> TaskResult:
        req = decode_request(payload)
        if not self.declines(req) and self.slots.acquire(blocking=False):
            try:
                res = run_task(req, self.sandbox)
            finally:
                self.slots.release()
            with self._lock:
                self.executed.append(req.request_id)
            return TaskResult(res.request_id, res.digest, self.site, res.ok, res.body)
        if self.cloud is None:
            raise OffloadError("task declined and no cloud tier configured")
        with self._lock:
            self.forwarded.append(req.request_id)
        return _roundtrip(self.cloud, payload, timeout=120.0)

    def start(self) -> threading.Thread:
        th = threading.Thread(target=self.serve_forever, daemon=True, name=f"{self.site.name.lower()}-service")
        th.start()
        return th

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


class _TaskHandler(socketserver.BaseRequestHandler):
    def handle(self):
        sock: socket.socket = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        while True:
            try:
                frame = wire.recv_frame(sock)
            except (OSError, wire.ConnectionClosed):
                return
            if frame.type != MsgType.TASK_REQUEST:
                wire.send_error(sock, f"unexpected message type 0x{frame.type:02x}")
                continue
            try:
                res = self.server.handle_request_payload(frame.payload)
            except wire.ProtocolError as exc:
                wire.send_error(sock, str(exc))
                continue
            except (OSError, OffloadError, wire.ConnectionClosed) as exc:
                wire.send_error(sock, f"forward to cloud failed: {exc}")
                continue
            except TaskError as exc:
                wire.send_error(sock, str(exc))
                continue
            try:
                wire.send_frame(sock, MsgType.TASK_RESULT, encode_result(res))
            except OSError:
                return


def edge_serve(bind, cloud, sandbox, policy: CapacityPolicy | None = None) -> TaskService:
    svc = TaskService(bind, Site.Edge, sandbox, cloud, policy)
    svc.start()
    return svc


def cloud_serve(bind, sandbox) -> TaskService:
    svc = TaskService(bind, Site.Cloud, sandbox)
    svc.start()
    return svc


def _roundtrip(addr, payload: bytes, timeout: float) -> TaskResult:
    with wire.connect(addr, timeout=timeout) as sock:
        sock.settimeout(timeout)
        wire.send_frame(sock, MsgType.TASK_REQUEST, payload)
        try:
            frame = wire.recv_frame(sock)
        except socket.timeout:
            raise OffloadError(f"no answer from {addr} within {timeout} s") from None
    if frame.type == MsgType.ERROR:
        raise OffloadError(frame.payload.decode("utf-8", errors="replace"))
    if frame.type != MsgType.TASK_RESULT:
        raise OffloadError(f"unexpected reply type 0x{frame.type:02x}")
    return decode_result(frame.payload)


# ---------------------------------------------------------------- device-side paths


def execute_local(req: TaskRequest, sandbox: Path | None = None, harness: CostHarness | None = None, decision: Decision | None = None):
    harness = harness or CostHarness()
    res, elapsed = _timed(lambda: run_task(req, sandbox))
    rt = elapsed * harness.device_slowdown
    rec = ExecutionRecord(decision, Site.Device, rt, energy(harness.power_w, rt), res.digest, harness.power_w)
    return res, rec


def _self_verifying(t: TaskType) -> bool:
    return t in CALC_TYPES or t == TaskType.Search


def offload(req: TaskRequest, target, harness: CostHarness | None = None, decision: Decision | None = None, timeout: float = 120.0):
    """Send ``req`` to an edge or cloud service and price the round trip."""
    harness = harness or CostHarness()
    payload = encode_request(req)
    t0 = time.perf_counter()
    try:
        res = _roundtrip(target, payload, timeout)
    except (OSError, wire.ConnectionClosed) as exc:
        raise OffloadError(f"offload to {target} failed: {exc}") from exc
    measured = time.perf_counter() - t0
    if res.request_id != req.request_id:
        raise IntegrityError(f"answer for request {res.request_id}, expected {req.request_id}")
    if res.ok and _self_verifying(req.task_type) and digest64(res.body.encode()) != res.digest:
        raise IntegrityError("result body does not match its digest")
    reply_bytes = 5 + 18 + len(res.body.encode())
    network = harness.link_time(5 + len(payload)) + harness.link_time(reply_bytes)
    forwarded = res.site == Site.Cloud and decision is not None and decision.verdict.value == "OffloadEdge"
    if res.site == Site.Cloud:
        network += harness.link_time(5 + len(payload)) + harness.link_time(reply_bytes)
    rt = measured + network
    rec = ExecutionRecord(decision, res.site, rt, energy(harness.power_w, rt), res.digest, harness.power_w, forwarded)
    return res, rec


@dataclass(frozen=True)
class CostRow:
    task: str
    local_s: float
    local_j: float
    offload_s: float
    offload_j: float

    @property
    def cheaper(self) -> str:
        return "Local" if self.local_s <= self.offload_s else "Offload"

    @property
    def offload_savings(self) -> float:
        """Fraction of local time saved by offloading (negative when offloading costs more)."""
        return 1.0 - self.offload_s / self.local_s

    def as_dict(self) -> dict:
        return {
            "task": self.task,
            "local_s": self.local_s,
            "local_j": self.local_j,
            "offload_s": self.offload_s,
            "offload_j": self.offload_j,
            "cheaper": self.cheaper,
            "offload_savings": self.offload_savings,
        }


def describe(req: TaskRequest) -> str:
    t = req.task_type
    if t == TaskType.MatrixMultiply:
        return f"matmul {req.n}x{req.n}"
    if t in CALC_TYPES:
        return f"{t.name} {req.n}-digit"
    return f"{t.name} {req.n}"


def compare_costs(req: TaskRequest, target, harness: CostHarness, sandbox: Path | None = None, repeats: int = 1) -> CostRow:
    """Run both paths ``repeats`` times each and keep the fastest record of each."""
    locals_, remotes = [], []
    for _ in range(repeats):
        local_res, rec = execute_local(req, sandbox, harness)
        locals_.append(rec)
        off_res, rec = offload(req, target, harness)
        remotes.append(rec)
        if local_res.digest != off_res.digest:
            raise IntegrityError(f"local and offloaded digests differ for {describe(req)}")
    local = min(locals_, key=lambda r: r.response_time)
    remote = min(remotes, key=lambda r: r.response_time)
    return CostRow(describe(req), local.response_time, local.device_energy, remote.response_time, remote.device_energy)


def execute(req: TaskRequest, decision: Decision, edge, sandbox: Path | None = None, harness: CostHarness | None = None):
    """Carry out a routing verdict; cloud-bound work goes through the edge."""
    verdict = decision.verdict.value
    if verdict == "LocalExecute":
        return execute_local(req, sandbox, harness, decision)
    if verdict == "OffloadCloud":
        return offload_via_edge_to_cloud(req, edge, harness, decision)
    return offload(req, edge, harness, decision)


def offload_via_edge_to_cloud(req: TaskRequest, edge, harness, decision):
    """Remote-access tasks are flagged cloud-bound; the edge relays them."""
    return offload(replace(req, to_cloud=True), edge, harness, decision)
