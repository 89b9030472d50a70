import json
import threading
import time
from pathlib import Path

import pytest

from fldec import cli, report


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(autouse=True)
def in_tmp(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def files_under(root: Path):
    return {p for p in root.rglob("*") if p.is_file()}


def test_gen_data_is_byte_identical():
    assert run("gen-data", "--stage", 1, "--n", 1000, "--seed", 7, "--out", "a") == 0
    assert run("gen-data", "--stage", 1, "--n", 1000, "--seed", 7, "--out", "b") == 0
    assert Path("a/stage1.csv").read_bytes() == Path("b/stage1.csv").read_bytes()
    assert json.loads(Path("a/manifest.json").read_text())["seeds"] == {"seed": 7}


def test_decide_offloads_big_matmul_on_good_network(capsys):
    assert run("gen-data", "--window", "good", "--out", "w") == 0
    capsys.readouterr()
    assert run("decide", "--task", "matmul", "--n", 300, "--pref", "local", "--window", "w/window-good.csv", "--out", "d") == 0
    assert capsys.readouterr().out.strip() == "OffloadEdge"
    assert json.loads(Path("d/decision.json").read_text())["stage2"] == "Offload"


def test_unknown_flag_is_usage_error(capsys):
    assert run("decide", "--task", "add", "--n", 3, "--frobnicate") == 1
    err = capsys.readouterr().err
    assert err.startswith("usage:") and "frobnicate" in err


def test_unknown_subcommand_is_usage_error(capsys):
    assert run("teleport") == 1
    assert "usage:" in capsys.readouterr().err


def test_runtime_failure_exits_2_after_manifest(capsys):
    assert run("decide", "--task", "matmul", "--n", 300, "--out", "d") == 2
    assert "--window" in capsys.readouterr().err
    assert Path("d/manifest.json").exists()


def test_config_file_and_flag_precedence():
    Path("s.cfg").write_text("# sweep\nusers = 100,200\ntasks=10000\nseed=3\n")
    assert run("simulate", "--config", "s.cfg", "--seed", 4, "--out", "s") == 0
    cfg = json.loads(Path("s/manifest.json").read_text())["config"]
    assert cfg["users"] == "100,200" and cfg["tasks"] == 10000 and cfg["seed"] == 4
    assert Path("s/sim.csv").read_text().splitlines()[0] == "users,avg_response_s,avg_energy_j,utilization"


@pytest.mark.parametrize("text", ["bogus=1\n", "no equals sign\n", "queueing=mg1\n", "tasks=many\n"])
def test_bad_config_is_usage_error(text):
    Path("bad.cfg").write_text(text)
    assert run("simulate", "--config", "bad.cfg") == 1


def test_unstable_simulation_exits_2(capsys):
    assert run("simulate", "--preset", "none", "--service-rate", 1, "--per-user-rate", 0.02, "--users", 100) == 2
    assert "utilization 2.000" in capsys.readouterr().err


def test_replay_reproduces_outputs():
    run("gen-data", "--stage", 2, "--n", 200, "--seed", 5, "--out", "g")
    first = Path("g/stage2.csv").read_bytes()
    Path("g/stage2.csv").unlink()
    assert run("replay", "g/manifest.json") == 0
    assert Path("g/stage2.csv").read_bytes() == first


def test_nothing_written_outside_out(in_tmp):
    run("gen-data", "--window", "good", "--out", "w")
    before = files_under(in_tmp)
    run("gen-data", "--stage", 2, "--n", 100, "--clients", 2, "--out", "o")
    run("gen-data", "--keys", "c0,c1", "--out", "o")
    run("decide", "--task", "add", "--n", 5, "--out", "o")
    run("simulate", "--users", 100, "--tasks", 10000, "--out", "o")
    run("exec", "--task", "file", "--n", 10, "--out", "o")
    new = files_under(in_tmp) - before
    assert new and all((in_tmp / "o") in p.parents for p in new)


def test_output_names_cannot_escape_out():
    assert run("gen-data", "--stage", 1, "--name", "../escape.csv", "--out", "o") == 1
    assert not Path("escape.csv").exists()


def test_exec_local_file_task_uses_sandbox():
    assert run("exec", "--task", "file", "--n", 64, "--out", "e") == 0
    doc = json.loads(Path("e/exec.json").read_text())
    assert doc["record"]["executed_at"] == "Device"
    assert (Path("e/sandbox") / doc["result"]).stat().st_size == 64


def test_edge_and_exec_roundtrip(capsys):
    t = threading.Thread(target=run, args=("edge-serve", "--listen", "127.0.0.1:47931", "--duration", 4, "--out", "edge"))
    t.start()
    time.sleep(0.5)
    run("gen-data", "--window", "good", "--out", "w")
    assert run("exec", "--task", "matmul", "--n", 120, "--window", "w/window-good.csv", "--edge", "127.0.0.1:47931", "--out", "x") == 0
    t.join()
    rec = json.loads(Path("x/exec.json").read_text())["record"]
    assert rec["executed_at"] == "Edge" and rec["device_energy_j"] == 5.0 * rec["response_time_s"]
    assert json.loads(Path("edge/serve-report.json").read_text())["executed"] == 1


def test_fedoff_server_with_five_clients():
    names = ",".join(f"c{i}" for i in range(5))
    assert run("gen-data", "--stage", 1, "--n", 1500, "--clients", 5, "--seed", 2, "--out", "data") == 0
    assert run("gen-data", "--keys", names, "--out", "keys") == 0
    port = 47932
    codes = {}

    def role(key, *argv):
        codes[key] = run(*argv)

    srv = threading.Thread(
        target=role,
        args=("server", "fedoff-server", "--listen", f"127.0.0.1:{port}", "--clients", 5, "--rounds", 5,
              "--keys", "keys/keys.env", "--epochs", 20, "--out", "srv"),
    )
    srv.start()
    time.sleep(0.5)
    clients = []
    for i in range(5):
        c = threading.Thread(
            target=role,
            args=(f"c{i}", "fedoff-client", "--server", f"127.0.0.1:{port}", "--data", f"data/stage1-client{i}.csv",
                  "--name", f"c{i}", "--key", f"keys/c{i}.key", "--local-fraction", 0.5, "--epochs", 20,
                  "--seed", i, "--out", f"cl{i}"),
        )
        c.start()
        clients.append(c)
        time.sleep(0.1)
    srv.join(120)
    for c in clients:
        c.join(60)
    assert set(codes.values()) == {0}
    doc = json.loads(Path("srv/report.json").read_text())
    report.validate_report(doc)
    assert len(doc["rounds"]) == 5
    assert [r["n_models"] for r in doc["round_details"]] == [6] * 5
    assert doc["timing"]["crypt"] > 0 and len(doc["shard_rows"]) == 5
    assert run("report", "srv/report.json", *[f"cl{i}/client-report.json" for i in range(5)], "--out", "rep") == 0


def test_report_flags_invalid_files(capsys):
    Path("r.json").write_text(json.dumps({"run_id": "x"}))
    assert run("report", "r.json", "--out", "rep") == 2
    assert "INVALID" in capsys.readouterr().err
