import socket

import numpy as np
import pytest

from conftest import addr
from fldec import runtime, wire
from fldec.checksum import digest64
from fldec.decision import Decision, Stage1, Stage2, TaskType, Verdict
from fldec.runtime import CostHarness, Site, TaskRequest
from fldec.wire import MsgType

EDGE_DECISION = Decision(Verdict.OffloadEdge, Stage1.Intensive, True, Stage2.Offload)


def test_addition():
    res = runtime.run_task(TaskRequest.calculator(TaskType.CalculatorAdd, 12345, 54321))
    assert res.ok and res.body == "66666"


def test_division_is_exact_decimal():
    assert runtime.run_task(TaskRequest.calculator(TaskType.CalculatorDiv, 10, 4)).body == "2.5"
    assert runtime.run_task(TaskRequest.calculator(TaskType.CalculatorDiv, 1, 3)).body == "0." + "3" * 50


def test_division_by_zero_is_an_error_result():
    res = runtime.run_task(TaskRequest.calculator(TaskType.CalculatorDiv, 7, 0))
    assert not res.ok and "zero" in res.body


def test_identity_product_digest():
    req = TaskRequest.matmul(20, seed_a=5, identity_b=True)
    assert runtime.run_task(req).digest == runtime.matrix_digest(runtime.gen_matrix(20, 5))


def test_matmul_digest_matches_independent_product():
    a = np.random.default_rng(1).integers(0, 10, size=(64, 64))
    b = np.random.default_rng(2).integers(0, 10, size=(64, 64))
    oracle = np.zeros((64, 64), dtype=np.int64)
    for i in range(64):
        for k in range(64):
            oracle[i] += a[i, k] * b[k]
    got = runtime.run_task(TaskRequest.matmul(64, seed_a=1, seed_b=2))
    assert got.digest == digest64(oracle.tobytes())


def test_file_creation_stays_in_sandbox(tmp_path):
    req = TaskRequest.file(1000, seed=3)
    res = runtime.run_task(req, tmp_path)
    written = tmp_path / res.body
    assert written.parent == tmp_path and written.stat().st_size == 1000
    assert res.digest == digest64(written.read_bytes())
    with pytest.raises(runtime.TaskError):
        runtime.run_task(req, None)


def test_file_creation_io_failure_names_the_path(tmp_path):
    blocker = tmp_path / "f"
    blocker.write_text("not a directory")
    res = runtime.run_task(TaskRequest.file(10), blocker)
    assert not res.ok and str(blocker) in res.body


def test_sort_and_search():
    arr = runtime.gen_array(500, 9)
    res = runtime.run_task(TaskRequest.sort(500, seed=9))
    assert res.body == f"min={min(arr)} max={max(arr)}"
    assert runtime.run_task(TaskRequest.search(500, seed=9, target=arr[123])).body == str(arr.index(arr[123]))
    assert runtime.run_task(TaskRequest.search(500, seed=9, target=-1)).body == "-1"


@pytest.mark.parametrize(
    "req",
    [
        TaskRequest.calculator(TaskType.CalculatorMul, -123456789, 10**30),
        TaskRequest.matmul(7, 3, 4, identity_b=True, to_cloud=True),
        TaskRequest.file(99, seed=2),
        TaskRequest.sort(10, seed=1),
        TaskRequest.search(10, seed=1, target=-5),
    ],
)
def test_request_codec_roundtrip(req):
    assert runtime.decode_request(runtime.encode_request(req)) == req


@pytest.mark.parametrize("payload", [b"", b"\x04", b"\x04" + bytes(8) + b"\x00", b"\x3f" + bytes(30)])
def test_malformed_requests(payload):
    with pytest.raises(wire.ProtocolError):
        runtime.decode_request(payload)


def test_result_codec_roundtrip():
    res = runtime.TaskResult(9, 123, Site.Cloud, False, "nope")
    assert runtime.decode_result(runtime.encode_result(res)) == res


def test_offload_addition_runs_at_edge(services):
    edge, _ = services
    res, rec = runtime.offload(TaskRequest.calculator(TaskType.CalculatorAdd, 2, 40), addr(edge))
    assert res.body == "42" and rec.executed_at == Site.Edge
    assert rec.device_energy == rec.power_w * rec.response_time


def test_large_matmul_is_forwarded_to_cloud(services):
    edge, cloud = services
    req = TaskRequest.matmul(80)
    res, rec = runtime.offload(req, addr(edge), decision=EDGE_DECISION)
    assert rec.executed_at == Site.Cloud and rec.forwarded
    assert req.request_id in edge.forwarded and req.request_id in cloud.executed
    assert res.digest == runtime.run_task(req).digest


def test_remote_preference_travels_through_edge_to_cloud(services):
    edge, _ = services
    res, rec = runtime.offload_via_edge_to_cloud(TaskRequest.search(100), addr(edge), None, None)
    assert rec.executed_at == Site.Cloud and res.ok


def test_local_and_offloaded_digests_agree(services, tmp_path):
    edge, _ = services
    for req in (TaskRequest.matmul(30), TaskRequest.sort(1000, seed=4), TaskRequest.file(500, seed=1)):
        local, _ = runtime.execute_local(req, tmp_path)
        remote, _ = runtime.offload(req, addr(edge))
        assert local.digest == remote.digest


def test_malformed_frame_keeps_connection(services):
    edge, _ = services
    with socket.create_connection(edge.address) as s:
        wire.send_frame(s, MsgType.TASK_REQUEST, b"\x01")
        assert wire.recv_frame(s).type == MsgType.ERROR
        wire.send_frame(s, MsgType.HELLO)
        assert wire.recv_frame(s).type == MsgType.ERROR
        req = TaskRequest.calculator(TaskType.CalculatorSub, 10, 3)
        wire.send_frame(s, MsgType.TASK_REQUEST, runtime.encode_request(req))
        f = wire.recv_frame(s)
        assert f.type == MsgType.TASK_RESULT and runtime.decode_result(f.payload).body == "7"


def test_unreachable_cloud_yields_error_response(tmp_path):
    dead = socket.socket()
    dead.bind(("127.0.0.1", 0))
    port = dead.getsockname()[1]
    dead.close()
    edge = runtime.edge_serve("127.0.0.1:0", f"127.0.0.1:{port}", tmp_path, runtime.CapacityPolicy(max_matmul_order=4))
    try:
        with pytest.raises(runtime.OffloadError, match="forward to cloud failed"):
            runtime.offload(TaskRequest.matmul(8), f"{edge.address[0]}:{edge.address[1]}")
    finally:
        edge.stop()


def test_offload_to_nothing_raises():
    dead = socket.socket()
    dead.bind(("127.0.0.1", 0))
    port = dead.getsockname()[1]
    dead.close()
    with pytest.raises(runtime.OffloadError):
        runtime.offload(TaskRequest.sort(5), f"127.0.0.1:{port}", timeout=2)


def test_local_record_prices_energy(tmp_path):
    h = CostHarness(device_slowdown=3.0, power_w=2.0)
    _, rec = runtime.execute_local(TaskRequest.sort(2000), tmp_path, h)
    assert rec.executed_at == Site.Device
    assert rec.device_energy == 2.0 * rec.response_time


def test_link_time():
    assert CostHarness(link_mbps=8, latency_s=0.5).link_time(1_000_000) == pytest.approx(1.5)


def test_cost_rows_order_small_and_large_tasks(services):
    edge, _ = services
    h = CostHarness.calibrated()
    small = runtime.compare_costs(TaskRequest.calculator(TaskType.CalculatorDiv, 12345, 67890), addr(edge), h, repeats=3)
    assert small.cheaper == "Local" and small.offload_s > 10 * small.local_s
    row = runtime.compare_costs(TaskRequest.matmul(60), addr(edge), h).as_dict()
    assert row["local_j"] == h.power_w * row["local_s"] and row["offload_j"] == h.power_w * row["offload_s"]
    assert row["offload_savings"] == 1 - row["offload_s"] / row["local_s"]
