"""In-process local cluster assembly and the synchronous platform client."""

from __future__ import annotations

import random
import time
from typing import Callable, Optional, Sequence

from .core import (
    AppSpec,
    ReExecMode,
    ReExecRule,
    RemoteError,
    TriggerKind,
    make_trigger_spec,
    session_app,
)
from .coordinator import CoordinatorServer, shard_of
from .executor import HandlerRegistry
from .node import NodeConfig, WorkerRuntime
from .store import FileDurableStore
from . import transport as tp


def expand_hints(hints) -> list[ReExecRule]:
    """Expand client re-execution hints ([(function, mode)], timeout_ms) into rules."""
    if hints is None:
        return []
    pairs, timeout = hints
    rules = []
    for function, mode in pairs:
        if not isinstance(mode, ReExecMode):
            mode = ReExecMode[str(mode)]
        rules.append(ReExecRule(function, mode, int(timeout)))
    return rules


class Client:
    """Synchronous client; resolves the owning shard by the same hash rule."""

    def __init__(self, coordinators: Sequence[str], connect_timeout: float = 10.0) -> None:
        self.coordinators = list(coordinators)
        self._conns: dict[int, tp.Connection] = {}
        self._timeout = connect_timeout

    def _conn_for(self, app: str) -> tp.Connection:
        shard = shard_of(app, len(self.coordinators))
        conn = self._conns.get(shard)
        if conn is None:
            conn = self._conns[shard] = tp.dial(self.coordinators[shard], timeout=self._timeout)
        return conn

    def _rpc(self, app: str, msg):
        conn = self._conn_for(app)
        conn.send(msg)
        reply = conn.recv()
        if isinstance(reply, tp.Ack) and not reply.ok:
            raise RemoteError(reply.error)
        return reply

    def register_app(self, spec: AppSpec, dependencies: Optional[list] = None) -> None:
        self._rpc(spec.name, tp.RegisterApp(spec, dependencies))

    def create_bucket(self, app: str, bucket: str) -> None:
        self._rpc(app, tp.CreateBucket(app, bucket))

    def add_trigger(self, app: str, bucket: str, trigger_name: str, kind: TriggerKind,
                    prim_meta: dict, hints=None) -> None:
        meta = {k: str(v) for k, v in prim_meta.items()}
        spec = make_trigger_spec(trigger_name, app, bucket, kind, meta, expand_hints(hints))
        self._rpc(app, tp.AddTrigger(spec))

    def call_app(self, app: str, invocations: Sequence[tuple[str, Sequence[bytes]]],
                 session: str = "", keep_open: bool = False) -> str:
        packed = [(fn, [a if isinstance(a, bytes) else str(a).encode() for a in args])
                  for fn, args in invocations]
        reply = self._rpc(app, tp.CallApp(app, packed, session, keep_open))
        return reply.value

    def close_session(self, session: str) -> None:
        app = session_app(session)
        self._rpc(app, tp.CallApp(app, [], session, keep_open=False))

    def configure_join(self, app: str, bucket: str, trigger: str, session: str,
                       keys: Optional[list[str]] = None, count: Optional[int] = None) -> None:
        self._rpc(app, tp.ConfigureJoin(app, bucket, trigger, session, keys, count))

    def collect_outputs(self, session: str) -> tp.Outputs:
        reply = self._rpc(session_app(session), tp.CollectOutputs(session))
        if not isinstance(reply, tp.Outputs):
            raise RemoteError(f"expected OUTPUTS, got {type(reply).__name__}")
        return reply

    def list_triggers(self, app: str):
        reply = self._rpc(app, tp.ListTriggers(app))
        return reply.triggers

    def wait_outputs(self, session: str, min_entries: int = 1, timeout: float = 30.0,
                     require_complete: bool = False) -> tp.Outputs:
        deadline = time.monotonic() + timeout
        last = tp.Outputs([], False)
        while time.monotonic() < deadline:
            last = self.collect_outputs(session)
            if len(last.entries) >= min_entries and (last.complete or not require_complete):
                return last
            time.sleep(0.005)
        raise TimeoutError(
            f"session {session}: {len(last.entries)} outputs, complete={last.complete}")

    def wait_complete(self, session: str, timeout: float = 30.0) -> tp.Outputs:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            out = self.collect_outputs(session)
            if out.complete:
                return out
            time.sleep(0.005)
        raise TimeoutError(f"session {session} did not complete in {timeout}s")

    def close(self) -> None:
        for conn in self._conns.values():
            conn.close()


class LocalCluster:
    """Coordinator shards plus worker runtimes in one process, over loopback TCP."""

    def __init__(
        self,
        durable_root: str,
        workers: int = 2,
        executors: int = 4,
        shards: int = 1,
        mem_budget: Optional[int] = None,
        node_config: Optional[NodeConfig] = None,
        register_handlers: Optional[Callable[[HandlerRegistry], None]] = None,
        crash_probabilities: Optional[dict[str, float]] = None,
        crash_seed: Optional[int] = None,
        seed: Optional[int] = None,
    ) -> None:
        self.durable = FileDurableStore(durable_root)
        rng = random.Random(seed)
        self.coordinators = [
            CoordinatorServer(i, shards, "127.0.0.1:0", self.durable,
                              rng=random.Random(rng.getrandbits(64)))
            for i in range(shards)
        ]
        self.coordinator_addrs = [c.addr for c in self.coordinators]
        self.workers: list[WorkerRuntime] = []
        for i in range(workers):
            registry = HandlerRegistry()
            if register_handlers is not None:
                register_handlers(registry)
            config = node_config or NodeConfig()
            if crash_probabilities:
                config = NodeConfig(
                    forward_delay_ms=config.forward_delay_ms,
                    scan_period_ms=config.scan_period_ms,
                    checkpoint_period_ms=config.checkpoint_period_ms,
                    heartbeat_period_ms=config.heartbeat_period_ms,
                    piggyback_threshold=config.piggyback_threshold,
                    crash_probabilities=dict(crash_probabilities),
                    crash_seed=None if crash_seed is None else crash_seed + i,
                )
            self.workers.append(WorkerRuntime(
                node_id=f"w{i}", listen="127.0.0.1:0", coordinators=self.coordinator_addrs,
                registry=registry, durable=self.durable, executors=executors,
                mem_budget=mem_budget, config=config,
            ))
        # wait until every worker has registered with every shard
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline:
            if all(len(c.shard.nodes) >= workers for c in self.coordinators):
                break
            time.sleep(0.005)

    def client(self) -> Client:
        return Client(self.coordinator_addrs)

    def total_bytes_live(self) -> int:
        return sum(w.store.bytes_live for w in self.workers)

    def stop(self) -> None:
        for w in self.workers:
            w.stop()
        for c in self.coordinators:
            c.stop()
