"""Acceptance suite: one PASS/FAIL line per criterion.

Run alone with ``pytest -s tests/test_acceptance.py`` to see the lines inline;
they are also repeated in the terminal summary of any pytest run.
"""

from __future__ import annotations

import base64
import contextlib
import itertools
import json
import math
import os
import threading
import time
from dataclasses import replace
from decimal import Decimal

import numpy as np
import pytest

from fldec import crypto, decision, runtime, sim, wire
from fldec.data import partition, train_test_split
from fldec.decision import Decision, Preference, Stage1, Stage2, TaskDescriptor, TaskType, Verdict
from fldec.fedoff import FedOffConfig, FedOffServer, run_fedoff
from fldec.fl import FLConfig, FLServer, aggregate, client_run, run_federation
from fldec.nn import LSTM_TRAIN, MLP_TRAIN, Arch, TrainConfig, evaluate, gradient_check, init_model, lstm, mlp, train
from fldec.report import build_report, validate_report
from fldec.runtime import CostHarness, TaskRequest
from fldec.timing import DEFAULT_POWER_W, TimingReport, energy
from fldec.wire import MsgType

RESULTS: dict[int, str] = {}


@contextlib.contextmanager
def criterion(n: int, title: str, capsys):
    notes: list[str] = []
    try:
        yield notes
    except BaseException as exc:
        line = f"[FAIL] criterion {n:>2} {title}: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        RESULTS[n] = line
        with capsys.disabled():
            print("\n" + line)
        raise
    line = f"[PASS] criterion {n:>2} {title}: " + "; ".join(notes)
    RESULTS[n] = line
    with capsys.disabled():
        print("\n" + line)


def check(ok: bool, what: str):
    if not ok:
        raise AssertionError(what)


# ---------------------------------------------------------------- shared heavy runs


@pytest.fixture(scope="module")
def fldec_runs():
    """4 clients x 10 rounds for both stages, timed end to end."""
    t0 = time.perf_counter()
    out = {}
    for stage, shape, cfg, gen, n in (
        (1, mlp(10, 64, 2), MLP_TRAIN, decision.generate_stage1_dataset, 2400),
        (2, lstm(5, 32, 10, 2), LSTM_TRAIN, decision.generate_stage2_dataset, 4000),
    ):
        data, test = gen(n, 500 + stage), gen(1000, 600 + stage)
        shards = partition(data, 4, 7)
        srv = FLServer(FLConfig(rounds=10, expected_clients=4, seed=stage), eval_set=test)
        init = init_model(*shape, seed=stage)
        res = run_federation(srv, init, shards, cfg)
        out[stage] = (res, shards, test, init, cfg)
    out["seconds"] = time.perf_counter() - t0
    return out


@pytest.fixture(scope="module")
def fedoff_runs():
    data = decision.generate_stage1_dataset(5000, 77)
    test = decision.generate_stage1_dataset(2000, 78)
    shards = partition(data, 5, 1)
    init = init_model(*mlp(10, 64, 2), seed=4)
    names = [f"client{i}" for i in range(5)]
    keys = {n: crypto.generate_key() for n in names}
    cfg = replace(MLP_TRAIN, epochs=30)

    conv = run_federation(FLServer(FLConfig(rounds=5, expected_clients=5, seed=9), eval_set=test), init, shards, cfg)
    runs = {}
    for local in (1.0, 0.25, 0.5, 0.75):
        srv = FedOffServer(
            FedOffConfig(rounds=5, expected_clients=5, keys=keys, train=cfg, seed=9, server_seed=9), eval_set=test
        )
        runs[local] = run_fedoff(srv, init, shards, [local] * 5, cfg, names=names)
    return conv, runs


# ---------------------------------------------------------------- criteria


def test_c01_aggregation_oracle(capsys):
    with criterion(1, "aggregation matches element-wise mean loop", capsys) as notes:
        rng = np.random.default_rng(2024)
        worst = 0.0
        for trial in range(100):
            k = 2 if trial % 2 == 0 else 5
            shape = mlp(4, 6, 3) if trial % 4 < 2 else lstm(3, 4, 5, 2)
            base = init_model(*shape, seed=trial)
            models = [base.replace({n: rng.normal(0, 3, a.shape) for n, a in base.layers}) for _ in range(k)]
            avg = aggregate(models)
            for name, arr in avg.layers:
                flat = [m[name].ravel().tolist() for m in models]
                oracle = [sum(col) / k for col in zip(*flat)]
                worst = max(worst, max(abs(a - b) for a, b in zip(arr.ravel().tolist(), oracle)))
        check(worst <= 1e-9, f"max deviation {worst:.3e}")
        notes.append(f"100 pair/quintuple trials, max |error| {worst:.2e} <= 1e-9")


def test_c02_gradients(capsys):
    with criterion(2, "analytic gradients vs central differences", capsys) as notes:
        m_shape, l_shape = mlp(10, 32, 2), lstm(5, 16, 10, 2)
        check(init_model(*m_shape, seed=0).n_params <= 2000 and init_model(*l_shape, seed=0).n_params <= 2000, "models too big")
        worst = {"MLP": 0.0, "LSTM": 0.0}
        for seed in range(20):
            r = np.random.default_rng(seed)
            w = init_model(*m_shape, seed=seed)
            worst["MLP"] = max(worst["MLP"], gradient_check(w, r.normal(size=(4, 10)), r.integers(0, 2, 4)))
            w = init_model(*l_shape, seed=seed)
            worst["LSTM"] = max(worst["LSTM"], gradient_check(w, r.normal(size=(3, 10, 5)), r.integers(0, 2, 3)))
        check(max(worst.values()) < 1e-4, f"relative error {worst}")
        notes.append(f"20 seeds, worst relative error MLP {worst['MLP']:.1e}, LSTM {worst['LSTM']:.1e} < 1e-4")


def _standalone_vs_global(res, shards, init, cfg):
    glob, alone = [], []
    for i, shard in enumerate(shards):
        tr, te = train_test_split(shard, 1000 + i)
        solo, _ = train(init, tr, replace(cfg, seed=cfg.seed + 7919 * i))
        alone.append(evaluate(solo, te).accuracy)
        glob.append(evaluate(res.final, te).accuracy)
    return float(np.mean(glob)), float(np.mean(alone))


def test_c03_fldec_federation(fldec_runs, capsys):
    with criterion(3, "FLDec 4 clients x 10 rounds", capsys) as notes:
        t0 = time.perf_counter()
        acc = {}
        for stage, floor in ((1, 0.90), (2, 0.95)):
            res, shards, test, init, cfg = fldec_runs[stage]
            check(len(res.records) == 10 and all(r.participants == [0, 1, 2, 3] for r in res.records), "round records")
            acc[stage] = evaluate(res.final, test).accuracy
            check(acc[stage] >= floor, f"stage {stage} accuracy {acc[stage]:.4f} < {floor}")
            g, a = _standalone_vs_global(res, shards, init, cfg)
            check(g >= a, f"stage {stage}: global {g:.4f} below standalone mean {a:.4f}")
            notes.append(f"stage {stage} global {acc[stage]:.4f} >= {floor}, global {g:.4f} >= standalone {a:.4f} on shard tests")
        total = fldec_runs["seconds"] + time.perf_counter() - t0
        check(total <= 120, f"took {total:.1f} s")
        notes.append(f"{total:.1f} s <= 120 s")


def test_c04_fedoff(fedoff_runs, capsys):
    with criterion(4, "FedOff equivalence and quality", capsys) as notes:
        conv, runs = fedoff_runs
        check(runs[1.0].final == conv.final, "offload-0 run differs from conventional FL")
        check([r.digest for r in runs[1.0].records] == [r.digest for r in conv.records], "round digests differ")
        notes.append("offload-0 bitwise identical to FL")
        base = conv.records[-1].accuracy
        parts = [f"FL {base:.4f}"]
        for local in (0.25, 0.5, 0.75):
            res = runs[local]
            check(len(res.records) == 5, "rounds")
            check(all(r.n_models == 6 and r.participants == [0, 1, 2, 3, 4] for r in res.records), "6-model aggregation")
            acc = res.records[-1].accuracy
            check(abs(acc - base) <= 0.02, f"split {int(local * 100)}/{int(100 - local * 100)}: {acc:.4f} vs {base:.4f}")
            parts.append(f"{int(local * 100)}% local {acc:.4f}")
        notes.append(", ".join(parts) + " (all within 2 pp)")
        notes.append("5 rounds x 5 clients, 6 models per round")


def test_c05_crypto(fedoff_runs, capsys):
    with criterion(5, "Fernet vector, roundtrips, tampering, overhead", capsys) as notes:
        key = crypto.ClientKey.decode("cw_0x689RpI-jtRR7oE8h_eQsKImvJapLeSbXpwF4e4=")
        token = b"gAAAAAAdwJ6wAAECAwQFBgcICQoLDA0ODy021cpGVWKZ_eEwCGM4BLLF_5CV9dOPmrhuVUPgJobwOz7JcbmrR64jVmpU4IwqDA=="
        check(crypto.decrypt(key, token, ttl=60, now=499162801) == b"hello", "test vector")
        notes.append("test vector ok")
        rng = np.random.default_rng(5)
        k = crypto.generate_key()
        for _ in range(1000):
            m = os.urandom(int(rng.integers(0, 4096)))
            check(crypto.decrypt(k, crypto.encrypt(k, m)) == m, "roundtrip")
        notes.append("1000 roundtrips ok")
        raw = bytearray(base64.urlsafe_b64decode(crypto.encrypt(k, b"tamper target " * 8)))
        rejected = 0
        for _ in range(1000):
            bit = int(rng.integers(0, len(raw) * 8))
            t = bytearray(raw)
            t[bit // 8] ^= 1 << (bit % 8)
            try:
                crypto.decrypt(k, base64.urlsafe_b64encode(bytes(t)))
            except crypto.InvalidToken:
                rejected += 1
        check(rejected == 1000, f"only {rejected}/1000 tampers rejected")
        notes.append("1000/1000 bit flips rejected")
        _, runs = fedoff_runs
        worst = 0.0
        for local in (0.25, 0.5, 0.75):
            res = runs[local]
            crypt = res.timing.crypt + sum(c.timing.crypt for c in res.clients)
            total = res.timing.total + sum(c.timing.crypt for c in res.clients)
            worst = max(worst, crypt / total)
        check(worst <= 0.02, f"crypt share {worst:.4%}")
        notes.append(f"T_crypt/T_total <= {worst:.3%} (limit 2%)")


def _identities(t: TimingReport) -> bool:
    return t.train == t.init + t.tr + t.loc + t.exm + t.ser + t.agg and t.total == t.train + t.crypt


def test_c06_timing_identity(fldec_runs, fedoff_runs, capsys):
    with criterion(6, "timing identity on every report", capsys) as notes:
        reports = []
        for stage in (1, 2):
            res = fldec_runs[stage][0]
            reports += [res.timing] + [c.timing for c in res.clients]
        conv, runs = fedoff_runs
        reports += [conv.timing] + [c.timing for c in conv.clients]
        for res in runs.values():
            reports += [res.timing] + [c.timing for c in res.clients]
        check(all(_identities(t) for t in reports), "identity broken")
        docs = [json.loads(json.dumps(build_report("x", {}, [], t))) for t in reports]
        for d in docs:
            validate_report(d)
        check(any(t.crypt > 0 for t in reports) and any(t.ser > 0 for t in reports), "phases not exercised")
        notes.append(f"{len(reports)} TimingReports, exact in memory and after JSON roundtrip")


def test_c07_energy_identity(capsys, tmp_path):
    with criterion(7, "energy = power x time", capsys) as notes:
        check(Decimal(5) * Decimal("0.46") == Decimal("2.3"), "0.46 s")
        check(Decimal(5) * Decimal("23.476") == Decimal("117.38"), "23.476 s")
        check(math.isclose(energy(DEFAULT_POWER_W, 0.46), 2.3, rel_tol=1e-15), "float 0.46 s")
        check(energy(DEFAULT_POWER_W, 23.476) == 117.38, "float 23.476 s")
        notes.append("0.46 s -> 2.3 J, 23.476 s -> 117.38 J")
        cloud = runtime.cloud_serve("127.0.0.1:0", tmp_path / "c")
        edge = runtime.edge_serve("127.0.0.1:0", "%s:%d" % cloud.address, tmp_path / "e", runtime.CapacityPolicy(max_matmul_order=20))
        try:
            target = "%s:%d" % edge.address
            records = []
            for p in (5.0, 3.3):
                h = CostHarness(power_w=p)
                for req in (TaskRequest.matmul(30), TaskRequest.sort(500), TaskRequest.calculator(TaskType.CalculatorAdd, 1, 2)):
                    records.append(runtime.execute_local(req, tmp_path, h)[1])
                    records.append(runtime.offload(req, target, h)[1])
        finally:
            edge.stop()
            cloud.stop()
        check(all(r.device_energy == r.power_w * r.response_time for r in records), "record energy")
        t = TimingReport(*np.random.default_rng(1).uniform(0, 3, 7))
        for p in (5.0, 2.0):
            d = build_report("x", {}, [], t, p)
            check(d["energy"]["total_j"] == p * d["timing"]["total"], "report energy")
        notes.append(f"{len(records)} ExecutionRecords at 5 W and 3.3 W exact; reports exact")


def _forced(arch_shape, cls: int):
    w = init_model(*arch_shape, seed=0)
    p = {k: np.zeros_like(v) for k, v in w.as_dict().items()}
    bias = "dense1.b" if w.arch == Arch.MLP else "head.b"
    p[bias][cls] = 1.0
    if w.arch == Arch.LSTM:
        p["norm.span"][:] = 1.0
    return w.replace(p)


def test_c08_routing_truth_table(capsys):
    with criterion(8, "routing truth table", capsys) as notes:
        window = np.zeros((10, 5))
        n = 0
        for s1, pref, s2 in itertools.product(Stage1, Preference, Stage2):
            m1, m2 = _forced(mlp(10, 4, 2), int(s1)), _forced(lstm(5, 4, 10, 2), int(s2))
            got = decision.decide(TaskDescriptor(TaskType.Sort, 100, pref), window, m1, m2)
            if s1 == Stage1.NotIntensive:
                want = Decision(Verdict.OffloadCloud if pref == Preference.RemoteAccess else Verdict.LocalExecute, s1, False)
            else:
                want = Decision(Verdict.OffloadEdge if s2 == Stage2.Offload else Verdict.LocalExecute, s1, True, s2)
            check(got == want, f"{s1.name}/{pref.value}/{s2.name}: {got} != {want}")
            check(decision.route(s1, pref, s2) == want.verdict, "route()")
            n += 1
        check(n == 8, "combinations")
        notes.append("all 8 combinations route as specified through decide() and route()")


def test_c09_cost_ordering(capsys, tmp_path):
    with criterion(9, "cost ordering under calibrated harness", capsys) as notes:
        cloud = runtime.cloud_serve("127.0.0.1:0", tmp_path / "c")
        edge = runtime.edge_serve("127.0.0.1:0", "%s:%d" % cloud.address, tmp_path / "e")
        try:
            target = "%s:%d" % edge.address
            h = CostHarness.calibrated()
            parts = []
            for op in (TaskType.CalculatorAdd, TaskType.CalculatorSub, TaskType.CalculatorMul, TaskType.CalculatorDiv):
                row = runtime.compare_costs(TaskRequest.calculator(op, 12345, 67891), target, h, tmp_path, repeats=3)
                check(row.cheaper == "Local", f"{row.task} cheaper {row.cheaper}")
            parts.append("calculator ops Local")
            row = runtime.compare_costs(TaskRequest.matmul(50), target, h, tmp_path, repeats=3)
            check(row.cheaper == "Local", f"50x50 cheaper {row.cheaper}")
            parts.append(f"50x50 Local (offload {row.offload_s / row.local_s:.2f}x local)")
            for n in (100, 200, 300):
                row = runtime.compare_costs(TaskRequest.matmul(n), target, h, tmp_path, repeats=3)
                check(row.cheaper == "Offload", f"{n}x{n} cheaper {row.cheaper}")
                check(0.10 <= row.offload_savings <= 0.35, f"{n}x{n} savings {row.offload_savings:.3f}")
                parts.append(f"{n}x{n} saves {row.offload_savings:.1%}")
        finally:
            edge.stop()
            cloud.stop()
        notes.append(", ".join(parts))


def test_c10_simulator(capsys):
    with criterion(10, "simulator", capsys) as notes:
        worst = 0.0
        for rho in (0.2, 0.5, 0.8):
            cfg = sim.SimConfig(users=100, per_user_rate=rho / 100, service_rate=2.0, seed=31)
            got = sim.simulate(cfg)
            want = sim.mm1_sojourn(cfg.arrival_rate, cfg.service_rate) + 30_000 / 1e9
            worst = max(worst, abs(got.avg_response_s / want - 1))
            check(got.avg_energy_j == cfg.power_w * got.avg_response_s, "energy ratio")
        check(worst <= 0.03, f"M/M/1 deviation {worst:.2%}")
        notes.append(f"M/M/1 within {worst:.2%} at rho <= 0.8")
        rows = sim.sweep(sim.CALIBRATED, range(100, 1001, 100))
        for r in rows:
            check(3.0 <= r.avg_response_s <= 4.25 and 14 <= r.avg_energy_j <= 22, f"{r.users} users out of band")
            check(r.avg_energy_j == 5.0 * r.avg_response_s, "preset energy ratio")
        notes.append(
            f"preset (calibration) {rows[0].avg_response_s:.2f}-{rows[-1].avg_response_s:.2f} s, "
            f"{rows[0].avg_energy_j:.1f}-{rows[-1].avg_energy_j:.1f} J over 100-1000 users; energy/time = 5 W"
        )


def test_c11_protocol_robustness(capsys):
    with criterion(11, "protocol robustness", capsys) as notes:
        shards = partition(decision.generate_stage1_dataset(800, 3), 2, 0)
        srv = FLServer(FLConfig(rounds=3, expected_clients=5, round_timeout=5.0, seed=0))
        init = init_model(*mlp(10, 8, 2), seed=0)
        cfg = TrainConfig(epochs=3, batch_size=50)
        box, replies = {}, []

        def serve():
            try:
                srv.accept()
                box["out"] = srv.run(init)
            except BaseException as exc:
                box["err"] = exc

        def hello():
            s = wire.connect(srv.address)
            wire.send_frame(s, MsgType.HELLO)
            check(wire.recv_frame(s).type == MsgType.WELCOME, "welcome")
            return s

        def noisy():  # unknown type each round, then a valid upload
            s = hello()
            f = wire.recv_frame(s)
            while f.type == MsgType.GLOBAL_WEIGHTS:
                s.sendall(wire.encode_frame(0x5A, b"?"))
                replies.append(wire.recv_frame(s).type)
                wire.send_frame(s, MsgType.CLIENT_WEIGHTS, f.payload)
                f = wire.recv_frame(s)
            s.close()

        def killed():  # contributes to round 1, dies during round 2
            s = hello()
            f = wire.recv_frame(s)
            wire.send_frame(s, MsgType.CLIENT_WEIGHTS, f.payload)
            wire.recv_frame(s)
            s.close()

        def truncated():  # half a frame in round 1, then gone
            s = hello()
            wire.recv_frame(s)
            s.sendall(wire.encode_frame(MsgType.CLIENT_WEIGHTS, b"w" * 64)[:20])
            s.close()

        st = threading.Thread(target=serve)
        st.start()
        roles = [lambda i=i: client_run(shards[i], srv.address, cfg, split_seed=i) for i in range(2)] + [noisy, killed, truncated]
        threads = []
        for fn in roles:
            th = threading.Thread(target=fn)
            th.start()
            threads.append(th)
            time.sleep(0.2)
        st.join(120)
        for th in threads:
            th.join(30)
        srv.close()
        check("err" not in box, f"server failed: {box.get('err')!r}")
        parts = [r.participants for r in box["out"][1]]
        check(parts == [[0, 1, 2, 3], [0, 1, 2], [0, 1, 2]], f"participants {parts}")
        check(replies and all(t == MsgType.ERROR for t in replies), "unknown type not answered with ERROR")
        notes.append(f"server survived; participants per round {parts}")


if __name__ == "__main__":
    raise SystemExit(pytest.main(["-q", "-s", __file__]))
