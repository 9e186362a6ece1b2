"""Operator surface: coordinator/worker daemons, local-cluster launcher, demos.

Demo and bench commands drive a running cluster via the client protocol and
print line-oriented `key=value` output for machine parsing.
"""

from __future__ import annotations

import argparse
import random
import signal
import socket
import statistics
import subprocess
import sys
import time
from collections import Counter

from . import apps
from .cluster import Client
from .coordinator import CoordinatorServer
from .executor import HandlerRegistry, decode_records
from .node import NodeConfig, WorkerRuntime
from .store import FileDurableStore


def _parse_crash_probs(raw: str) -> dict[str, float]:
    probs = {}
    for part in raw.split(","):
        if not part:
            continue
        name, _, p = part.partition("=")
        probs[name] = float(p)
    return probs


def parse_config(text: str) -> dict[str, dict[str, str]]:
    """Line-oriented `section.key = value` cluster config."""
    config: dict[str, dict[str, str]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        dotted, _, value = line.partition("=")
        section, _, key = dotted.strip().partition(".")
        if not section or not key or not _:
            raise ValueError(f"config line {lineno}: expected 'section.key = value'")
        config.setdefault(section, {})[key.strip()] = value.strip()
    return config


def render_config(shard_count: int, coordinators: list[str], workers: dict[str, str]) -> str:
    lines = [f"cluster.shard_count = {shard_count}"]
    for i, addr in enumerate(coordinators):
        lines.append(f"coordinator.{i} = {addr}")
    for node_id, addr in workers.items():
        lines.append(f"worker.{node_id} = {addr}")
    return "\n".join(lines) + "\n"


def _coordinators_from_args(args) -> list[str]:
    if args.coordinators:
        return args.coordinators.split(",")
    if args.config:
        with open(args.config) as f:
            cfg = parse_config(f.read())
        coords = cfg.get("coordinator", {})
        return [coords[k] for k in sorted(coords, key=int)]
    raise SystemExit("need --coordinators or --config")


def emit(**kv) -> None:
    for k, v in kv.items():
        print(f"{k}={v}")
    sys.stdout.flush()


# -- daemons ---------------------------------------------------------------------------


def cmd_coordinator(args) -> int:
    server = CoordinatorServer(args.shard_id, args.shard_count, args.listen,
                               FileDurableStore(args.durable_root))
    emit(coordinator=server.addr, shard_id=args.shard_id)
    _wait_for_term()
    server.stop()
    return 0


def cmd_worker(args) -> int:
    registry = HandlerRegistry()
    apps.register_demo_handlers(registry)
    config = NodeConfig(
        forward_delay_ms=args.forward_delay_ms,
        piggyback_threshold=args.piggyback_threshold,
        crash_probabilities=_parse_crash_probs(args.crash_prob),
        crash_seed=args.crash_seed,
    )
    try:
        runtime = WorkerRuntime(
            node_id=args.node_id, listen=args.listen,
            coordinators=args.coordinators.split(","), registry=registry,
            durable=FileDurableStore(args.durable_root), executors=args.executors,
            mem_budget=args.mem_budget, config=config, connect_timeout=args.connect_timeout,
        )
    except OSError as exc:
        print(f"error=unreachable coordinators: {exc}", file=sys.stderr)
        return 1
    emit(worker=runtime.server.addr, node_id=args.node_id, executors=args.executors)
    _wait_for_term()
    runtime.stop()
    return 0


def _wait_for_term() -> None:
    done = {"stop": False}

    def handler(signum, frame):
        done["stop"] = True

    signal.signal(signal.SIGTERM, handler)
    signal.signal(signal.SIGINT, handler)
    while not done["stop"]:
        time.sleep(0.1)


def _free_port() -> int:
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


def cmd_cluster_up(args) -> int:
    if not args.local:
        raise SystemExit("only --local clusters are supported")
    coordinators = [f"127.0.0.1:{_free_port()}" for _ in range(args.shards)]
    workers = {f"w{i}": f"127.0.0.1:{_free_port()}" for i in range(args.workers)}
    procs: list[subprocess.Popen] = []
    base = [sys.executable, "-m", "pheromone.cli"]
    for shard_id, addr in enumerate(coordinators):
        procs.append(subprocess.Popen(base + [
            "coordinator", "--shard-id", str(shard_id), "--shard-count", str(args.shards),
            "--listen", addr, "--durable-root", args.durable_root,
        ]))
    for node_id, addr in workers.items():
        cmd = base + [
            "worker", "--node-id", node_id, "--listen", addr,
            "--coordinators", ",".join(coordinators),
            "--executors", str(args.executors), "--durable-root", args.durable_root,
        ]
        if args.crash_prob:
            cmd += ["--crash-prob", args.crash_prob]
        procs.append(subprocess.Popen(cmd))
    config_text = render_config(args.shards, coordinators, workers)
    if args.config:
        with open(args.config, "w") as f:
            f.write(config_text)
    sys.stdout.write(config_text)
    emit(status="up", coordinators=",".join(coordinators))
    try:
        _wait_for_term()
    finally:
        for p in procs:
            p.terminate()
        for p in procs:
            try:
                p.wait(timeout=5)
            except subprocess.TimeoutExpired:
                p.kill()
    return 0


# -- demo drivers -----------------------------------------------------------------------


def run_wordcount(client: Client, mappers: int, reducers: int, corpus: bytes,
                  check: bool, timeout: float = 60.0) -> int:
    client.register_app(apps.wordcount_app(reducers))
    words = corpus.split()
    splits = [b" ".join(words[i::mappers]) for i in range(mappers)]
    t0 = time.monotonic()
    session = client.call_app(
        apps.WORDCOUNT_APP,
        [("wc_map", [str(reducers).encode(), split]) for split in splits])
    out = client.wait_complete(session, timeout=timeout)
    elapsed = time.monotonic() - t0
    merged: Counter = Counter()
    for _bucket, _key, payload in out.entries:
        for k, v in decode_records(payload):
            merged[k] += int(v)
    emit(app="wordcount", mappers=mappers, reducers=reducers, words=len(words),
         distinct=len(merged), parts=len(out.entries), seconds=round(elapsed, 3))
    if check:
        oracle = Counter(corpus.split())
        ok = merged == oracle
        emit(check="pass" if ok else "fail")
        return 0 if ok else 1
    return 0


def run_sort(client: Client, records: int, mappers: int, reducers: int,
             check: bool, seed: int = 1, timeout: float = 120.0) -> int:
    rnd = random.Random(seed)
    data = [rnd.randbytes(apps.SORT_RECORD) for _ in range(records)]
    client.register_app(apps.sort_app(reducers))
    splits = [b"".join(data[i::mappers]) for i in range(mappers)]
    t0 = time.monotonic()
    session = client.call_app(
        apps.SORT_APP,
        [("sort_map", [str(reducers).encode(), split]) for split in splits])
    out = client.wait_complete(session, timeout=timeout)
    elapsed = time.monotonic() - t0
    parts = sorted(out.entries, key=lambda e: e[1])  # part-0000 .. part-NNNN
    merged = b"".join(k for _b, _key, payload in parts for k, _v in decode_records(payload))
    emit(app="sort", records=records, mappers=mappers, reducers=reducers,
         seconds=round(elapsed, 3))
    if check:
        ok = merged == b"".join(sorted(data))
        emit(check="pass" if ok else "fail")
        return 0 if ok else 1
    return 0


def run_stream(client: Client, rate: int, seconds: float, check: bool,
               window_ms: int = 1000, seed: int = 7) -> int:
    client.register_app(apps.stream_app(time_window_ms=window_ms))
    rnd = random.Random(seed)
    fed: Counter = Counter()
    session = None
    seq = 0
    tick_s = 0.02
    per_tick = max(1, round(rate * tick_s))
    t0 = time.monotonic()
    while time.monotonic() - t0 < seconds:
        batch = []
        for _ in range(per_tick):
            etype = rnd.choice(list(apps.AdEventType))
            ev = apps.AdEvent(f"e{seq}", f"c{rnd.randint(0, 9)}", etype,
                              int(time.time() * 1000))
            seq += 1
            if etype is apps.AdEventType.CLICK:
                fed[ev.campaign_id.encode()] += 1
            batch.append(ev)
        payload = apps.encode_events(batch)
        if session is None:
            session = client.call_app(apps.STREAM_APP, [("preprocess", [payload])],
                                      keep_open=True)
        else:
            client.call_app(apps.STREAM_APP, [("preprocess", [payload])], session=session)
        time.sleep(tick_s)
    client.close_session(session)
    out = client.wait_complete(session, timeout=30)
    got: Counter = Counter()
    for _b, _key, payload in out.entries:
        for campaign, n in decode_records(payload):
            got[campaign] += int(n)
    emit(app="stream", rate=rate, seconds=seconds, events=seq,
         clicks=sum(fed.values()), windows=len(out.entries), counted=sum(got.values()))
    if check:
        ok = got == fed
        emit(check="pass" if ok else "fail")
        return 0 if ok else 1
    return 0


# -- bench drivers -----------------------------------------------------------------------


def bench_chain(client: Client, length: int, runs: int = 3) -> int:
    client.register_app(apps.chain_app())
    per_hop = []
    for _ in range(runs):
        t0 = time.monotonic()
        session = client.call_app(apps.CHAIN_APP, [("hop", [b"0:%d" % length])])
        out = client.wait_outputs(session, 1, timeout=max(30, length / 100))
        elapsed = time.monotonic() - t0
        assert out.entries[0][2] == str(length).encode()
        per_hop.append(elapsed * 1000 / length)
    emit(bench="chain", length=length, runs=runs,
         per_hop_median_ms=round(statistics.median(per_hop), 4))
    return 0


def bench_parallel(client: Client, width: int, sleep_ms: int = 100) -> int:
    client.register_app(apps.parallel_app())
    t0 = time.monotonic()
    session = client.call_app(apps.PARALLEL_APP,
                              [("sleeper", [str(sleep_ms).encode()])] * width)
    client.wait_outputs(session, width, timeout=60)
    elapsed = time.monotonic() - t0
    emit(bench="parallel", width=width, sleep_ms=sleep_ms, seconds=round(elapsed, 3),
         overhead_ms=round(elapsed * 1000 - sleep_ms, 1))
    return 0


def run_fault_sessions(client: Client, mode: str, runs: int, concurrency: int = 8,
                       timeout: float = 60.0) -> list[float]:
    """Latencies (ms) of `runs` chain executions; sessions run in waves."""
    name = apps.fault_app_name(mode)
    client.register_app(apps.fault_chain_app(mode))
    latencies: list[float] = []
    pending: list[tuple[str, float]] = []
    launched = 0
    while launched < runs or pending:
        while launched < runs and len(pending) < concurrency:
            pending.append((client.call_app(name, [("step1", [b"go"])]), time.monotonic()))
            launched += 1
        still = []
        for session, t0 in pending:
            out = client.collect_outputs(session)
            if out.entries:
                latencies.append((time.monotonic() - t0) * 1000)
            elif time.monotonic() - t0 > timeout:
                raise TimeoutError(f"fault run {session} stuck")
            else:
                still.append((session, t0))
        pending = still
        time.sleep(0.005)
    return latencies


def bench_fault(client: Client, runs: int) -> int:
    for mode in ("none", "function", "workflow"):
        lat = sorted(run_fault_sessions(client, mode, runs))
        p50 = statistics.median(lat)
        p99 = lat[min(len(lat) - 1, int(len(lat) * 0.99))]
        emit(bench="fault", mode=mode, runs=runs, p50_ms=round(p50, 1), p99_ms=round(p99, 1))
    return 0


# -- argument parsing ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pheromone",
                                     description="data-bucket-driven serverless platform")
    sub = parser.add_subparsers(dest="command", required=True)

    c = sub.add_parser("coordinator", help="run one coordinator shard")
    c.add_argument("--shard-id", type=int, required=True)
    c.add_argument("--shard-count", type=int, default=1)
    c.add_argument("--listen", default="127.0.0.1:0")
    c.add_argument("--durable-root", required=True)
    c.set_defaults(func=cmd_coordinator)

    w = sub.add_parser("worker", help="run one worker node")
    w.add_argument("--node-id", required=True)
    w.add_argument("--listen", default="127.0.0.1:0")
    w.add_argument("--coordinators", required=True, help="comma-separated shard addresses")
    w.add_argument("--executors", type=int, default=4)
    w.add_argument("--mem-budget", type=int, default=None, help="bytes of in-memory object budget")
    w.add_argument("--forward-delay-ms", type=int, default=5)
    w.add_argument("--piggyback-threshold", type=int, default=4096)
    w.add_argument("--durable-root", required=True)
    w.add_argument("--crash-prob", default="", help="handler=p[,handler=p...]")
    w.add_argument("--crash-seed", type=int, default=None)
    w.add_argument("--connect-timeout", type=float, default=10.0)
    w.set_defaults(func=cmd_worker)

    cl = sub.add_parser("cluster", help="cluster lifecycle")
    cl_sub = cl.add_subparsers(dest="cluster_cmd", required=True)
    up = cl_sub.add_parser("up", help="launch a local cluster of daemon processes")
    up.add_argument("--local", action="store_true")
    up.add_argument("--workers", type=int, default=2)
    up.add_argument("--executors", type=int, default=4)
    up.add_argument("--shards", type=int, default=1)
    up.add_argument("--durable-root", required=True)
    up.add_argument("--config", default="", help="write the cluster config file here")
    up.add_argument("--crash-prob", default="")
    up.set_defaults(func=cmd_cluster_up)

    reg = sub.add_parser("register", help="register an app from its text file form")
    reg.add_argument("--file", required=True, help="app spec in section.key = value form")
    reg.add_argument("--coordinators", default="")
    reg.add_argument("--config", default="")
    reg.set_defaults(func=cmd_register)

    r = sub.add_parser("run", help="demo applications")
    r.add_argument("demo", choices=["wordcount", "sort", "stream"])
    r.add_argument("--coordinators", default="")
    r.add_argument("--config", default="")
    r.add_argument("--mappers", type=int, default=4)
    r.add_argument("--reducers", type=int, default=4)
    r.add_argument("--input", default="")
    r.add_argument("--records", type=int, default=100_000)
    r.add_argument("--rate", type=int, default=200, help="events per second")
    r.add_argument("--seconds", type=float, default=10.0)
    r.add_argument("--check", action="store_true", help="exit nonzero on oracle mismatch")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="microbenchmarks")
    b.add_argument("shape", choices=["chain", "parallel", "fault"])
    b.add_argument("--coordinators", default="")
    b.add_argument("--config", default="")
    b.add_argument("--length", type=int, default=1000)
    b.add_argument("--width", type=int, default=64)
    b.add_argument("--runs", type=int, default=100)
    b.set_defaults(func=cmd_bench)
    return parser


def cmd_register(args) -> int:
    from .core import app_spec_from_text

    with open(args.file) as f:
        spec = app_spec_from_text(f.read())
    client = Client(_coordinators_from_args(args))
    try:
        client.register_app(spec)
        emit(registered=spec.name, functions=len(spec.functions),
             triggers=len(spec.triggers))
        return 0
    finally:
        client.close()


def cmd_run(args) -> int:
    client = Client(_coordinators_from_args(args))
    try:
        if args.demo == "wordcount":
            if args.input:
                with open(args.input, "rb") as f:
                    corpus = f.read()
            else:
                rnd = random.Random(0)
                corpus = b" ".join(b"w%d" % rnd.randint(0, 999) for _ in range(200_000))
            return run_wordcount(client, args.mappers, args.reducers, corpus, args.check)
        if args.demo == "sort":
            return run_sort(client, args.records, args.mappers, args.reducers, args.check)
        return run_stream(client, args.rate, args.seconds, args.check)
    finally:
        client.close()


def cmd_bench(args) -> int:
    client = Client(_coordinators_from_args(args))
    try:
        if args.shape == "chain":
            return bench_chain(client, args.length)
        if args.shape == "parallel":
            return bench_parallel(client, args.width)
        return bench_fault(client, args.runs)
    finally:
        client.close()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
