"""``fldec`` command line: one server or client role per process, plus data, decisions and reports.

Exit status is 0 on success, 1 on a usage error and 2 when the run itself fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import crypto, decision, report, runtime, sim
from .data import LabeledDataset, flat_from_csv, read_csv
from .decision import TaskDescriptor, TaskType
from .fedoff import FedOffConfig, FedOffServer, client_run_fedoff
from .fl import ClientAborted, FLConfig, FLServer, client_run, load_model
from .nn import LSTM_TRAIN, MLP_TRAIN, TrainConfig, init_model
from .reference import STAGE1_SHAPE, STAGE2_SHAPE
from .timing import DEFAULT_POWER_W

log = logging.getLogger("fldec")

SHAPES = {1: STAGE1_SHAPE, 2: STAGE2_SHAPE}
TRAIN_DEFAULTS = {1: MLP_TRAIN, 2: LSTM_TRAIN}
# dest names that describe how to run rather than what to compute
NOT_CONFIG = {"cmd", "config", "log_level", "handler", "api"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"{text} is not an unsigned 64-bit integer")
    return v


def _fraction_list(text: str) -> str:
    for part in str(text).split(","):
        v = float(part)
        if not 0 < v <= 1:
            raise argparse.ArgumentTypeError(f"participant fraction {v} outside (0, 1]")
    return str(text)


def _int_list(text: str) -> str:
    vals = [int(p) for p in str(text).split(",") if p.strip()]
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("expected a comma-separated list of positive integers")
    return str(text)


def parse_kv_file(path) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: dict[str, str] = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------- parser


def _common() -> argparse.ArgumentParser:
    p = _Parser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", type=Path, help="key=value file; flags given on the command line win")
    g.add_argument("--seed", type=_u64, default=0)
    g.add_argument("--out", type=Path, default=Path("out"), help="every file this run writes goes here")
    g.add_argument("--power", type=float, default=DEFAULT_POWER_W, help="device power in watts")
    g.add_argument("--log-level", default="warning", choices=["debug", "info", "warning", "error"])
    return p


def _fl_server_args(p, clients: int, rounds: int):
    p.add_argument("--listen", default="127.0.0.1:7000")
    p.add_argument("--clients", type=int, default=clients)
    p.add_argument("--rounds", type=int, default=rounds)
    p.add_argument("--fraction", type=_fraction_list, default="1.0", help="one value or one per round")
    p.add_argument("--stage", type=int, choices=[1, 2], default=1)
    p.add_argument("--eval", default="synthetic", help="CSV path, 'synthetic' or 'none'")
    p.add_argument("--init-model", type=Path)
    p.add_argument("--accept-timeout", type=float, default=120.0)
    p.add_argument("--round-timeout", type=float, default=300.0)


def _train_args(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=["adam", "sgd"])


def _task_args(p):
    p.add_argument("--task", required=True, help="add, sub, mul, div, matmul, file, sort or search")
    p.add_argument("--n", type=int, help="magnitude: digits, matrix order, bytes or element count")
    p.add_argument("--a", type=int, help="first calculator operand")
    p.add_argument("--b", type=int, help="second calculator operand")
    p.add_argument("--pref", default="local", help="local or remote")
    p.add_argument("--window", type=Path, help="CSV of recent network snapshots (last rows are used)")
    p.add_argument("--models", type=Path, help="directory holding stage1.fldec and stage2.fldec")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    root = _Parser(prog="fldec", description="Federated offloading decisions, training and task execution.")
    root.add_argument("--api", help="send decide/simulate to a running HTTP service instead")
    sub = root.add_subparsers(dest="cmd", metavar="SUBCOMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("fl-server", parents=[common], help="coordinate federated training")
    _fl_server_args(p, clients=4, rounds=10)
    p.set_defaults(handler=cmd_fl_server)

    p = sub.add_parser("fl-client", parents=[common], help="train on a local dataset for a server")
    p.add_argument("--server", default="127.0.0.1:7000")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--name", default="")
    p.add_argument("--split-seed", type=int)
    _train_args(p)
    p.set_defaults(handler=cmd_fl_client)

    p = sub.add_parser("fedoff-server", parents=[common], help="federated training with offloaded shards")
    _fl_server_args(p, clients=5, rounds=5)
    p.add_argument("--keys", type=Path, help="name=key lines, one per client")
    p.add_argument("--shard-timeout", type=float, default=120.0)
    _train_args(p)
    p.set_defaults(handler=cmd_fedoff_server)

    p = sub.add_parser("fedoff-client", parents=[common], help="offload part of a dataset, train on the rest")
    p.add_argument("--server", default="127.0.0.1:7000")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--name", default="")
    p.add_argument("--key", type=Path, help="file holding this client's key")
    p.add_argument("--local-fraction", type=float, default=0.5)
    p.add_argument("--split-seed", type=int)
    _train_args(p)
    p.set_defaults(handler=cmd_fedoff_client)

    p = sub.add_parser("gen-data", parents=[common], help="write synthetic datasets, windows or keys")
    what = p.add_mutually_exclusive_group(required=True)
    what.add_argument("--stage", type=int, choices=[1, 2])
    what.add_argument("--window", choices=["good", "bad"])
    what.add_argument("--keys", help="comma-separated client names")
    p.add_argument("--n", type=int, default=1000, help="rows to generate")
    p.add_argument("--clients", type=int, default=1, help="also write one shard file per client")
    p.add_argument("--noise", type=float, default=0.0, help="stage-1 label noise")
    p.add_argument("--name", help="output file name inside --out")
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("decide", parents=[common], help="run the two-stage decision for one task")
    _task_args(p)
    p.set_defaults(handler=cmd_decide)

    p = sub.add_parser("exec", parents=[common], help="decide, then execute locally or offload")
    _task_args(p)
    p.add_argument("--edge", help="edge service host:port")
    p.add_argument("--harness", choices=["default", "calibrated"], default="default")
    p.add_argument("--compare", action="store_true", help="also time local vs offload for this task")
    p.add_argument("--repeats", type=int, default=1)
    p.set_defaults(handler=cmd_exec)

    p = sub.add_parser("edge-serve", parents=[common], help="serve tasks, forwarding declined ones")
    p.add_argument("--listen", default="127.0.0.1:7100")
    p.add_argument("--cloud", help="cloud service host:port")
    p.add_argument("--max-matmul", type=int, default=512)
    p.add_argument("--max-concurrent", type=int, default=8)
    p.add_argument("--duration", type=float, default=0.0, help="seconds to serve; 0 serves until interrupted")
    p.set_defaults(handler=cmd_serve, site="edge")

    p = sub.add_parser("cloud-serve", parents=[common], help="serve every task it receives")
    p.add_argument("--listen", default="127.0.0.1:7200")
    p.add_argument("--duration", type=float, default=0.0)
    p.set_defaults(handler=cmd_serve, site="cloud")

    p = sub.add_parser("simulate", parents=[common], help="multi-user response time and energy")
    p.add_argument("--users", type=_int_list, default="100,200,300,400,500,600,700,800,900,1000")
    p.add_argument("--preset", choices=["paper-shape", "none"], default="paper-shape",
                   help="paper-shape: calibrated defaults landing 100-1000 users in 3-4.25 s; none: plain defaults")
    p.add_argument("--service-rate", type=float, help="edge tasks/s; 'inf' for zero service time")
    p.add_argument("--per-user-rate", type=float, help="tasks/s issued by each user")
    p.add_argument("--queueing", choices=["mm1", "deterministic"])
    p.add_argument("--link-mbps", type=float)
    p.add_argument("--tasks", type=int, help="tasks per replication")
    p.add_argument("--replications", type=int)
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("report", parents=[common], help="validate reports and tabulate their rounds")
    p.add_argument("inputs", nargs="+", type=Path)
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("replay", parents=[common], help="re-run the subcommand recorded in a manifest")
    p.add_argument("manifest", type=Path)
    p.set_defaults(handler=None)
    return root


def _apply_config(parser: argparse.ArgumentParser, args, argv: list[str]):
    """Fold a key=value file under the command-line flags."""
    values = parse_kv_file(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.cmd]  # noqa: SLF001
    actions = {a.dest: a for a in sub._actions}  # noqa: SLF001
    defaults = {}
    for key, text in values.items():
        dest = key.replace("-", "_")
        act = actions.get(dest)
        if act is None or dest in NOT_CONFIG or not act.option_strings:
            raise UsageError(f"{args.config}: unknown key {key!r} for {args.cmd}")
        if isinstance(act, argparse._StoreTrueAction):  # noqa: SLF001
            defaults[dest] = text.lower() in ("1", "true", "yes", "on")
            continue
        try:
            v = act.type(text) if act.type else text
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"{args.config}: bad value for {key}: {exc}") from None
        if act.choices is not None and v not in act.choices:
            raise UsageError(f"{args.config}: {key} must be one of {list(act.choices)}")
        defaults[dest] = v
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def resolved_config(args) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in NOT_CONFIG:
            continue
        if isinstance(v, list):
            v = [str(x) if isinstance(x, Path) else x for x in v]
        out[k] = str(v) if isinstance(v, Path) else v
    return out


def _argv_from_config(subcommand: str, config: dict) -> list[str]:
    argv = [subcommand]
    positional = []
    for k, v in config.items():
        if k in ("site", "inputs", "manifest"):
            if k == "inputs":
                positional.extend(v)
            continue
        if v is None or v is False:
            continue
        flag = "--" + k.replace("_", "-")
        argv += [flag] if v is True else [flag, str(v)]
    return argv + positional


# ---------------------------------------------------------------- helpers


def _out(args, name: str) -> Path:
    base = args.out.resolve()
    path = (base / name).resolve()
    if base != path and base not in path.parents:
        raise UsageError(f"{name!r} would land outside --out")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(args, artifacts: dict) -> None:
    cfg = resolved_config(args)
    seeds = {"seed": args.seed}
    for k in ("split_seed",):
        if getattr(args, k, None) is not None:
            seeds[k] = getattr(args, k)
    report.write_json(_out(args, "manifest.json"), report.manifest(args.cmd, cfg, seeds, artifacts))


def _train_config(args, stage: int, seed: int) -> TrainConfig:
    base = TRAIN_DEFAULTS[stage]
    over = {
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "learning_rate": args.lr,
        "optimizer": args.optimizer,
    }
    return replace(base, seed=seed, **{k: v for k, v in over.items() if v is not None})


def load_labeled_csv(path: Path) -> tuple[LabeledDataset, int]:
    """Dataset and stage, recognised from the CSV header."""
    data = Path(path).read_bytes()
    header, _ = read_csv(data)
    if header == decision.STAGE1_HEADER:
        return decision.stage1_dataset(decision.stage1_from_csv(data)), 1
    if header == decision.STAGE2_HEADER:
        log_rows, labels = decision.stage2_from_csv(data)
        return decision.windows(log_rows, labels), 2
    ds = flat_from_csv(data, 2)
    if ds.x.shape[1] != decision.N_STAGE1_FEATURES:
        raise ValueError(f"{path}: unrecognised CSV header")
    return ds, 1


def _eval_set(args, stage: int):
    if args.eval == "none":
        return None
    if args.eval == "synthetic":
        gen = decision.generate_stage1_dataset if stage == 1 else decision.generate_stage2_dataset
        return gen(1000, args.seed + 96)
    ds, got = load_labeled_csv(Path(args.eval))
    if got != stage:
        raise ValueError(f"evaluation CSV holds stage-{got} data, server trains stage {stage}")
    return ds


def _init_model(args, stage: int):
    if args.init_model:
        w = load_model(args.init_model)
        if (w.arch, w.hyper) != SHAPES[stage]:
            raise ValueError("initial model does not match the stage's architecture")
        return w, 0.0
    t0 = time.perf_counter()
    w = init_model(*SHAPES[stage], seed=args.seed)
    return w, time.perf_counter() - t0


def _fractions(text: str):
    vals = [float(v) for v in text.split(",")]
    return vals[0] if len(vals) == 1 else vals


def _say(*parts) -> None:
    print(*parts, flush=True)


# ---------------------------------------------------------------- federated roles


def _serve_rounds(args, server: FLServer, stage: int, extra=None) -> int:
    _say(f"listening on {server.address[0]}:{server.address[1]}")
    init, init_s = _init_model(args, stage)
    model_path = _out(args, "model.fldec")
    try:
        server.accept()
        final, records = server.run(init, init_seconds=init_s, persist=str(model_path))
    finally:
        server.close()
    extra = extra() if extra else {}
    extra["model"] = str(model_path)
    doc = report.build_report(args.cmd, resolved_config(args), records, server.timing, args.power, extra)
    doc["round_details"] = [r.as_dict() for r in records]
    report.write_json(_out(args, "report.json"), doc)
    last = records[-1]
    acc = "n/a" if last.accuracy is None else f"{last.accuracy:.4f}"
    _say(f"{len(records)} rounds done; final accuracy {acc}; report {_out(args, 'report.json')}")
    return 0


def cmd_fl_server(args) -> int:
    _write_manifest(args, {"model": str(_out(args, "model.fldec")), "report": str(_out(args, "report.json"))})
    cfg = FLConfig(
        rounds=args.rounds,
        participant_fraction=_fractions(args.fraction),
        expected_clients=args.clients,
        listen=args.listen,
        accept_timeout=args.accept_timeout,
        round_timeout=args.round_timeout,
        seed=args.seed,
    )
    return _serve_rounds(args, FLServer(cfg, _eval_set(args, args.stage)), args.stage)


def cmd_fedoff_server(args) -> int:
    _write_manifest(args, {"model": str(_out(args, "model.fldec")), "report": str(_out(args, "report.json"))})
    keys = {}
    if args.keys:
        keys = {name: crypto.ClientKey.decode(k) for name, k in parse_kv_file(args.keys).items()}
    cfg = FedOffConfig(
        rounds=args.rounds,
        participant_fraction=_fractions(args.fraction),
        expected_clients=args.clients,
        listen=args.listen,
        accept_timeout=args.accept_timeout,
        round_timeout=args.round_timeout,
        seed=args.seed,
        keys=keys,
        server_seed=args.seed,
        shard_timeout=args.shard_timeout,
        train=_train_config(args, args.stage, args.seed),
    )
    server = FedOffServer(cfg, _eval_set(args, args.stage))

    def shards():
        return {
            "shard_rows": {str(k): v for k, v in sorted(server.shard_sizes.items())},
            "rejected_shards": {str(k): v for k, v in sorted(server.rejected.items())},
        }

    return _serve_rounds(args, server, args.stage, shards)


def _client_common(args, runner, **kw) -> int:
    ds, stage = load_labeled_csv(args.data)
    best_path = _out(args, "client-best.fldec")
    _write_manifest(args, {"best_model": str(best_path), "report": str(_out(args, "client-report.json"))})
    cfg = _train_config(args, stage, args.seed)
    split_seed = args.seed if args.split_seed is None else args.split_seed
    try:
        res = runner(ds, args.server, cfg, split_seed=split_seed, name=args.name, persist=str(best_path), **kw)
    except ClientAborted as exc:
        raise RuntimeError(str(exc)) from None
    rounds = [{"index": h["round"], "participants": [res.client_id], "accuracy": h["accuracy"], "loss": h["loss"]} for h in res.history]
    doc = report.build_report(
        args.cmd,
        resolved_config(args),
        rounds,
        res.timing,
        args.power,
        {"client_id": res.client_id, "best_accuracy": res.best_accuracy, "train_rows": res.train_size, "test_rows": res.test_size},
    )
    report.write_json(_out(args, "client-report.json"), doc)
    _say(f"client {res.client_id}: {len(res.history)} rounds, best local accuracy {res.best_accuracy:.4f}")
    return 0


def cmd_fl_client(args) -> int:
    return _client_common(args, client_run)


def cmd_fedoff_client(args) -> int:
    key = crypto.load_key(args.key) if args.key else None
    return _client_common(args, client_run_fedoff, local_fraction=args.local_fraction, key=key)


# ---------------------------------------------------------------- data


def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be positive")
    if args.keys:
        names = [n.strip() for n in args.keys.split(",") if n.strip()]
        fname = args.name or "keys.env"
        _write_manifest(args, {"keys": str(_out(args, fname))})
        lines = []
        for n in names:
            k = crypto.generate_key()
            crypto.save_key(k, _out(args, f"{n}.key"))
            lines.append(f"{n}={k.encode()}")
        _out(args, fname).write_text("\n".join(lines) + "\n", encoding="ascii")
        _say(f"wrote {len(names)} keys")
        return 0
    if args.window:
        fname = args.name or f"window-{args.window}.csv"
        _write_manifest(args, {"window": str(_out(args, fname))})
        w = decision.sample_window(args.seed, good=args.window == "good")
        labels = np.full(len(w), int(args.window == "good"))
        _out(args, fname).write_bytes(decision.stage2_to_csv(w, labels))
        _say(str(_out(args, fname)))
        return 0

    fname = args.name or f"stage{args.stage}.csv"
    shards = [f"{Path(fname).stem}-client{i}.csv" for i in range(args.clients)] if args.clients > 1 else []
    _write_manifest(args, {"data": str(_out(args, fname)), "shards": [str(_out(args, s)) for s in shards]})
    if args.stage == 1:
        rows = decision.generate_stage1(args.n, args.seed, args.noise)
        _out(args, fname).write_bytes(decision.stage1_to_csv(rows))
        if shards:
            perm = np.random.default_rng(args.seed).permutation(len(rows))
            for s, idx in zip(shards, np.array_split(perm, args.clients)):
                _out(args, s).write_bytes(decision.stage1_to_csv([rows[i] for i in idx]))
    else:
        log_rows, labels = decision.generate_stage2_log(args.n, args.seed)
        _out(args, fname).write_bytes(decision.stage2_to_csv(log_rows, labels))
        # windows need consecutive rows, so stage-2 shards are contiguous slices
        for s, idx in zip(shards, np.array_split(np.arange(len(labels)), args.clients or 1)):
            _out(args, s).write_bytes(decision.stage2_to_csv(log_rows[idx], labels[idx]))
    _say(str(_out(args, fname)))
    return 0


# ---------------------------------------------------------------- decisions and tasks


def _request(args) -> runtime.TaskRequest:
    t = decision.parse_task(args.task)
    pref = decision.parse_preference(args.pref)
    if t in runtime.CALC_TYPES:
        a = args.a if args.a is not None else (10 ** (args.n - 1) if args.n else None)
        b = args.b if args.b is not None else a
        if a is None:
            raise UsageError("calculator tasks need --a/--b or --n digits")
        return runtime.TaskRequest.calculator(t, a, b, pref=pref)
    if not args.n or args.n < 1:
        raise UsageError("--n must be a positive magnitude")
    seed = args.seed
    if t == TaskType.MatrixMultiply:
        return runtime.TaskRequest.matmul(args.n, seed_a=seed + 1, seed_b=seed + 2, pref=pref)
    if t == TaskType.FileCreate:
        return runtime.TaskRequest.file(args.n, seed=seed, pref=pref)
    if t == TaskType.Sort:
        return runtime.TaskRequest.sort(args.n, seed=seed, pref=pref)
    return runtime.TaskRequest.search(args.n, seed=seed, pref=pref)


def _window(args):
    if args.window is None:
        return None
    rows, _ = decision.stage2_from_csv(args.window.read_bytes())
    if len(rows) < decision.SEQ_LEN:
        raise ValueError(f"window file needs at least {decision.SEQ_LEN} snapshots")
    return rows[-decision.SEQ_LEN:]


def _decide(args, descriptor: TaskDescriptor) -> decision.Decision:
    s1, s2 = decision.load_reference_models(args.models)
    window = _window(args)
    if decision.predict_intensive(s1, descriptor) == decision.Stage1.Intensive and window is None:
        raise ValueError("intensive task: --window is required for the network stage")
    return decision.decide(descriptor, window, s1, s2)


def cmd_decide(args) -> int:
    _write_manifest(args, {"decision": str(_out(args, "decision.json"))})
    req = _request(args)
    if args.api:
        window = _window(args)
        body = {
            "task": req.task_type.name,
            "magnitude": req.n,
            "preference": req.descriptor.preference.value,
            "window": None if window is None else window.tolist(),
        }
        doc = _api_post(args.api, "/decide", body)
    else:
        doc = _decide(args, req.descriptor).as_dict()
    report.write_json(_out(args, "decision.json"), {"task": describe_descriptor(req.descriptor), **doc})
    _say(doc["verdict"])
    return 0


def describe_descriptor(d: TaskDescriptor) -> dict:
    return {"task_type": d.task_type.name, "magnitude": d.magnitude, "preference": d.preference.value}


def cmd_exec(args) -> int:
    _write_manifest(args, {"record": str(_out(args, "exec.json")), "sandbox": str(_out(args, "sandbox"))})
    req = _request(args)
    sandbox = _out(args, "sandbox")
    sandbox.mkdir(exist_ok=True)
    harness = runtime.CostHarness.calibrated(power_w=args.power) if args.harness == "calibrated" else runtime.CostHarness(power_w=args.power)
    dec = _decide(args, req.descriptor)
    if dec.verdict != decision.Verdict.LocalExecute and not args.edge:
        raise UsageError(f"verdict {dec.verdict.value} needs --edge")
    res, rec = runtime.execute(req, dec, args.edge, sandbox, harness)
    doc = {"task": runtime.describe(req), "record": rec.as_dict(), "result_ok": res.ok, "result": res.body}
    if args.compare:
        if not args.edge:
            raise UsageError("--compare needs --edge")
        doc["cost"] = runtime.compare_costs(req, args.edge, harness, sandbox, repeats=args.repeats).as_dict()
    report.write_json(_out(args, "exec.json"), doc)
    _say(f"{dec.verdict.value}: ran at {rec.executed_at.name} in {rec.response_time:.4f} s, {rec.device_energy:.4f} J")
    return 0


def cmd_serve(args) -> int:
    sandbox = _out(args, "sandbox")
    _write_manifest(args, {"sandbox": str(sandbox), "report": str(_out(args, "serve-report.json"))})
    sandbox.mkdir(exist_ok=True)
    if args.site == "edge":
        policy = runtime.CapacityPolicy(max_concurrent=args.max_concurrent, max_matmul_order=args.max_matmul or None)
        svc = runtime.edge_serve(args.listen, args.cloud, sandbox, policy)
    else:
        svc = runtime.cloud_serve(args.listen, sandbox)
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            signal.signal(sig, lambda *_: stop.set())
        except ValueError:  # not the main thread
            pass
    _say(f"{args.site} listening on {svc.address[0]}:{svc.address[1]}")
    try:
        stop.wait(args.duration if args.duration > 0 else None)
    finally:
        svc.stop()
    report.write_json(
        _out(args, "serve-report.json"),
        {"site": args.site, "executed": len(svc.executed), "forwarded": len(svc.forwarded)},
    )
    return 0


# ---------------------------------------------------------------- simulation and reports


def _sim_config(args) -> sim.SimConfig:
    base = sim.CALIBRATED if args.preset == "paper-shape" else sim.SimConfig()
    over = {
        "service_rate": args.service_rate,
        "per_user_rate": args.per_user_rate,
        "queueing": args.queueing,
        "link_mbps": args.link_mbps,
        "n_tasks": args.tasks,
        "replications": args.replications,
    }
    return replace(base, seed=args.seed, power_w=args.power, **{k: v for k, v in over.items() if v is not None})


def cmd_simulate(args) -> int:
    _write_manifest(args, {"csv": str(_out(args, "sim.csv")), "summary": str(_out(args, "sim.json"))})
    users = [int(u) for u in args.users.split(",")]
    cfg = _sim_config(args)
    if args.api:
        body = {"users": users, "config": json.loads(sim.results_json(cfg, []))["config"]}
        doc = _api_post(args.api, "/simulate", body)
        rows = doc["results"]
        csv_text = sim.rows_csv(rows)
        summary = json.dumps(doc, indent=2)
    else:
        results = sim.sweep(cfg, users)
        rows = [r.row() for r in results]
        csv_text, summary = sim.results_csv(results), sim.results_json(cfg, results)
    _out(args, "sim.csv").write_text(csv_text, encoding="utf-8")
    _out(args, "sim.json").write_text(summary + "\n", encoding="utf-8")
    for r in rows:
        _say(f"{r['users']:>6} users  {r['avg_response_s']:.4f} s  {r['avg_energy_j']:.4f} J  rho={r['utilization']:.3f}")
    return 0


def cmd_report(args) -> int:
    _write_manifest(args, {"rounds": str(_out(args, "rounds.csv"))})
    lines = ["source,run_id,index,participants,accuracy,loss"]
    bad = 0
    for path in args.inputs:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
            report.validate_report(doc)
        except (OSError, json.JSONDecodeError, report.ReportError) as exc:
            print(f"{path}: INVALID: {exc}", file=sys.stderr)
            bad += 1
            continue
        t = doc["timing"]
        _say(
            f"{path}: {doc['subcommand']} run {doc['run_id']}, {len(doc['rounds'])} rounds, "
            f"total {t['total']:.3f} s (crypt {t['crypt']:.4f} s), {doc['energy']['total_j']:.3f} J"
        )
        for r in doc["rounds"]:
            parts = " ".join(map(str, r["participants"]))
            lines.append(f"{path},{doc['run_id']},{r['index']},{parts},{r['accuracy']},{r['loss']}")
    _out(args, "rounds.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if bad:
        raise RuntimeError(f"{bad} of {len(args.inputs)} reports failed validation")
    return 0


def _api_post(base: str, path: str, body: dict) -> dict:
    import httpx

    r = httpx.post(base.rstrip("/") + path, json=body, timeout=600.0)
    if r.status_code >= 400:
        raise RuntimeError(f"service answered {r.status_code}: {r.text}")
    return r.json()


# ---------------------------------------------------------------- entry point


def _parse(argv: list[str]):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.cmd == "replay":
        m = json.loads(args.manifest.read_text(encoding="utf-8"))
        argv = _argv_from_config(m["subcommand"], m["config"])
        args = parser.parse_args(argv)
    if args.config is not None:
        args = _apply_config(parser, args, argv)
    return args


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parse(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"fldec: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.handler(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as exc:
        log.debug("run failed", exc_info=True)
        print(f"fldec: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
