"""Worker-node runtime: local scheduler loop, delayed forwarding, checkpoints.

One event loop per node consumes readiness events, executor reports, transport
messages, and timer ticks. LOCAL-scope triggers are evaluated here and their
requests dispatched to executors "as locally as possible"; buckets with
GLOBAL-scope triggers have their status synchronized to the owning coordinator
shard immediately on change.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Callable, Optional

from .core import (
    AppSpec,
    FunctionRequest,
    NodeStatus,
    ObjectRef,
    RefArg,
    RequestOrigin,
    TriggerKind,
    TriggerScope,
    fnv1a64,
    session_app,
)
from .executor import (
    CompletionReport,
    CrashInjector,
    ExecStatus,
    Executor,
    ExecutorWorker,
    HandlerRegistry,
    UserLibrary,
)
from .store import CKPT_PREFIX, DurableStore, ObjectStore
from . import transport as tp
from .transport import (
    Completion,
    Invoke,
    NodeStatusMsg,
    Reader,
    Reclaim,
    Reset,
    StatusDelta,
    Writer,
)
from .triggers import RunningSource, SessionTriggerState, TriggerState

log = logging.getLogger("pheromone.node")


def monotonic_ms() -> int:
    return time.monotonic_ns() // 1_000_000


@dataclass
class NodeConfig:
    forward_delay_ms: int = 5
    scan_period_ms: int = 10
    checkpoint_period_ms: int = 100
    heartbeat_period_ms: int = 100
    piggyback_threshold: int = tp.DEFAULT_PIGGYBACK_THRESHOLD
    crash_probabilities: dict[str, float] = field(default_factory=dict)
    crash_seed: Optional[int] = None


@dataclass
class SessionBook:
    """Per-session bookkeeping the coordinator's completion detection relies on."""

    app: str
    received: int = 0
    started: int = 0
    completed: int = 0
    consumed: set[ObjectRef] = field(default_factory=set)
    dirty: bool = False  # activity since the last completion flush
    msgs_sent: int = 0
    msgs_at_quiesce: int = -1


class LocalScheduler:
    """Single-threaded scheduler core; an owning thread drains `events`."""

    def __init__(
        self,
        node_id: str,
        registry: HandlerRegistry,
        store: ObjectStore,
        links: dict[int, object],
        shard_count: int,
        config: Optional[NodeConfig] = None,
        clock: Callable[[], int] = monotonic_ms,
        addr: str = "",
        executor_count: int = 2,
        fetch: Optional[Callable[[str, ObjectRef], bytes]] = None,
    ) -> None:
        self.node_id = node_id
        self.registry = registry
        self.store = store
        self.links = links
        self.shard_count = shard_count
        self.config = config or NodeConfig()
        self.clock = clock
        self.addr = addr
        self.fetch = fetch or tp.fetch_object
        self.events: queue.SimpleQueue = queue.SimpleQueue()
        self.apps: dict[str, AppSpec] = {}
        self.local_states: dict[tuple[str, str, str], TriggerState] = {}
        self.books: dict[str, SessionBook] = {}
        self.quiesce_msg_log: dict[str, int] = {}  # session traffic up to first quiesce
        self.reclaimed: set[str] = set()
        self.pending: list[tuple[FunctionRequest, int]] = []
        self.routing_log: list[tuple[str, str]] = []
        self.crash = CrashInjector(self.config.crash_probabilities, self.config.crash_seed)
        self.store.on_ready = lambda ref, producer: self.events.put(("ready", ref, producer))
        self.store.bucket_validator = self._bucket_known
        self.available: set[int] = set(range(executor_count))
        self.executor_session: dict[int, Optional[str]] = {i: None for i in range(executor_count)}
        self.workers: list[ExecutorWorker] = []
        for i in range(executor_count):
            worker = ExecutorWorker(
                Executor(i), registry, self._make_library,
                lambda report: self.events.put(("done", report)), self.crash,
            )
            self.workers.append(worker)
            worker.start()
        self._last = {"scan": 0, "ckpt": 0, "beat": 0}

    # -- wiring ------------------------------------------------------------------

    def _bucket_known(self, session: str, bucket: str) -> bool:
        spec = self.apps.get(session_app(session))
        if spec is None:
            return False
        return bucket in spec.buckets or bucket == "__args__"

    def _make_library(self, req: FunctionRequest) -> UserLibrary:
        spec = self.apps.get(req.app) or AppSpec(req.app)
        return UserLibrary(req.session, req.function, spec, self.store, req, self.fetch)

    def _shard_for(self, app: str) -> int:
        return fnv1a64(app.encode()) % self.shard_count

    def _send(self, session: str, msg) -> None:
        book = self.books.get(session)
        if book is not None:
            book.msgs_sent += 1
        link = self.links.get(self._shard_for(session_app(session)))
        if link is not None:
            link.send(msg)

    def post(self, *event) -> None:
        self.events.put(event)

    # -- event handlers -------------------------------------------------------------

    def process(self, event) -> None:
        kind = event[0]
        if kind == "invoke":
            self.handle_invoke(event[1])
        elif kind == "ready":
            self.on_object_ready(event[1], event[2])
        elif kind == "done":
            self.on_exec_done(event[1])
        elif kind == "reset":
            self.on_reset(event[1])
        elif kind == "reclaim":
            self.reclaim(event[1])
        elif kind == "tick":
            self.on_tick(self.clock())
        elif kind == "stop":
            raise StopIteration

    def handle_invoke(self, inv: Invoke) -> None:
        req = inv.request
        if inv.bundle is not None and req.app not in self.apps:
            self.install_app(inv.bundle)
        if req.app not in self.apps:
            log.warning("invoke for unknown app %r dropped", req.app)
            return
        if req.session in self.reclaimed:
            log.warning("invoke for reclaimed session %r dropped", req.session)
            return
        book = self._book(req.session, req.app)
        book.received += 1
        book.dirty = True
        self.dispatch(req)

    def install_app(self, spec: AppSpec) -> None:
        self.apps[spec.name] = spec
        for t in spec.triggers:
            if t.scope is TriggerScope.LOCAL:
                key = (spec.name, t.bucket, t.name)
                if key not in self.local_states:
                    self.local_states[key] = TriggerState(t)

    def _book(self, session: str, app: str) -> SessionBook:
        book = self.books.get(session)
        if book is None:
            book = self.books[session] = SessionBook(app=app)
        return book

    def dispatch(self, req: FunctionRequest) -> str:
        """Place a request on an idle executor, queue it, or (later) forward it."""
        now = self.clock()
        choice = self._pick_executor(req)
        if choice is not None:
            self._start(req, choice, now)
            self.routing_log.append((req.request_id, "LOCAL"))
            return "LOCAL"
        self.pending.append((req, now))
        self.routing_log.append((req.request_id, "QUEUED"))
        return "QUEUED"

    def _pick_executor(self, req: FunctionRequest) -> Optional[int]:
        if not self.available:
            return None
        spec = self.apps.get(req.app)
        handler_id = spec.handler_for(req.function) if spec and spec.functions else req.function
        warm = [i for i in sorted(self.available) if handler_id in self.workers[i].executor.loaded]
        if warm:
            return warm[0]
        return min(self.available)

    def _start(self, req: FunctionRequest, executor_id: int, now: int) -> None:
        self.available.discard(executor_id)
        self.executor_session[executor_id] = req.session
        book = self._book(req.session, req.app)
        book.started += 1
        book.dirty = True
        if req.origin is not RequestOrigin.RE_EXEC:
            self._notify_start(req, now)
        self.workers[executor_id].submit(req)

    def _notify_start(self, req: FunctionRequest, now: int) -> None:
        spec = self.apps.get(req.app)
        if spec is None:
            return
        wire_notice = False
        for t in spec.triggers:
            rule_match = any(r.source_function == req.function for r in t.re_exec)
            if t.scope is TriggerScope.LOCAL and rule_match:
                state = self.local_states.get((req.app, t.bucket, t.name))
                if state is not None:
                    state.notify_source_func(req.function, req.session, list(req.args), now,
                                             req.request_id)
            elif t.scope is TriggerScope.GLOBAL:
                group_source = (t.kind is TriggerKind.DYNAMIC_GROUP
                                and req.origin is RequestOrigin.CLIENT)
                if rule_match or group_source:
                    wire_notice = True
        if wire_notice:
            self._send(req.session, StatusDelta(
                self.node_id, req.session,
                starts=[(req.function, req.request_id, now, list(req.args))],
                status=self.report_node_status(),
            ))

    def on_object_ready(self, ref: ObjectRef, producer: str) -> None:
        if ref.session in self.reclaimed:
            log.warning("late readiness for reclaimed session %r dropped", ref.session)
            return
        app = session_app(ref.session)
        spec = self.apps.get(app)
        if spec is None or (ref.bucket not in spec.buckets and ref.bucket != "__args__"):
            log.warning("readiness for unknown bucket %r dropped", ref.bucket)
            return
        book = self._book(ref.session, app)
        book.dirty = True
        now = self.clock()
        sync_global = False
        for t in spec.triggers_on(ref.bucket):
            if t.scope is TriggerScope.LOCAL:
                state = self.local_states[(app, t.bucket, t.name)]
                for action in state.action_for_new_object(ref, now, producer):
                    self.dispatch(self._request_from_action(action, app))
            else:
                sync_global = True
        if sync_global and ref not in book.consumed:
            self._send(ref.session, StatusDelta(
                self.node_id, ref.session, ready=[(ref, producer)],
                status=self.report_node_status(),
            ))

    def _request_from_action(self, action, app: str) -> FunctionRequest:
        if action.rerun_args is not None:
            return FunctionRequest(action.session, action.target_function,
                                   list(action.rerun_args), RequestOrigin.RE_EXEC, app=app,
                                   request_id=uuid.uuid4().hex)
        return FunctionRequest(action.session, action.target_function,
                               [RefArg(r) for r in action.inputs], RequestOrigin.TRIGGER,
                               app=app, request_id=uuid.uuid4().hex, group_id=action.group_id)

    def on_exec_done(self, report: CompletionReport) -> None:
        executor_id = report.executor_id
        self.available.add(executor_id)
        self.executor_session[executor_id] = None
        req = report.request
        book = self.books.get(req.session)
        if book is not None:
            book.completed += 1
            book.dirty = True
            if self._has_global(req.app):
                ok = report.status is ExecStatus.OK
                self._send(req.session, self._completion_msg(
                    req.session, book, [(req.function, req.request_id, ok, report.objects_emitted)]))
        self._drain_pending()

    def _has_global(self, app: str) -> bool:
        spec = self.apps.get(app)
        return spec is not None and any(t.scope is TriggerScope.GLOBAL for t in spec.triggers)

    def _completion_msg(self, session: str, book: SessionBook, entries) -> Completion:
        return Completion(
            self.node_id, session, entries,
            received=book.received, started=book.started, completed=book.completed,
            pending_local=self._pending_local(session),
            pending_sources=self._pending_sources(session),
        )

    def _pending_local(self, session: str) -> int:
        queued = sum(1 for req, _ in self.pending if req.session == session)
        running = sum(1 for s in self.executor_session.values() if s == session)
        return queued + running

    def _pending_sources(self, session: str) -> int:
        return sum(
            len(state.sessions[session].running_sources)
            for state in self.local_states.values()
            if session in state.sessions
        )

    def _local_payload(self, ref: ObjectRef) -> Optional[bytes]:
        obj = self.store.get_ready(ref)
        return obj.payload if obj is not None else None

    def _drain_pending(self) -> None:
        now = self.clock()
        still: list[tuple[FunctionRequest, int]] = []
        for req, enqueued in self.pending:
            expired = now - enqueued > self.config.forward_delay_ms
            if expired and not req.forwarded:
                self._forward(req)
                continue
            # an already-forwarded request has nowhere else to go: it waits
            # for a local executor however long that takes.
            if self.available and (not expired or req.forwarded):
                choice = self._pick_executor(req)
                if choice is not None:
                    self._start(req, choice, now)
                    self.routing_log.append((req.request_id, "LOCAL"))
                    continue
            still.append((req, enqueued))
        self.pending = still

    def _forward(self, req: FunctionRequest) -> None:
        out = tp.prepare_invocation(req, self._local_payload,
                                    self.config.piggyback_threshold, self.addr)
        out.forwarded = True
        self.routing_log.append((req.request_id, "FORWARDED"))
        book = self.books.get(req.session)
        if book is not None:
            book.dirty = True
        self._send(req.session, Invoke(out))

    def on_reset(self, msg: Reset) -> None:
        book = self.books.get(msg.session)
        if book is not None:
            book.consumed.update(msg.refs)
        for state in self.local_states.values():
            if msg.session in state.sessions:
                state.mark_consumed(msg.session, [r for r in msg.refs
                                                  if r.bucket == state.spec.bucket])

    def reclaim(self, session: str) -> int:
        freed = self.store.reclaim_session(session)
        for state in self.local_states.values():
            state.drop_session(session)
        self.books.pop(session, None)
        self.pending = [(r, t) for r, t in self.pending if r.session != session]
        self.reclaimed.add(session)
        return freed

    # -- timers -----------------------------------------------------------------------

    def on_tick(self, now: int) -> None:
        self._drain_pending()
        if now - self._last["scan"] >= self.config.scan_period_ms:
            self._last["scan"] = now
            self.scan_timeouts(now)
        if now - self._last["ckpt"] >= self.config.checkpoint_period_ms:
            self._last["ckpt"] = now
            self.checkpoint()
        if now - self._last["beat"] >= self.config.heartbeat_period_ms:
            self._last["beat"] = now
            status = NodeStatusMsg(self.report_node_status())
            for link in self.links.values():
                link.send(status)
        self._flush_quiesced()

    def scan_timeouts(self, now: int) -> list[FunctionRequest]:
        issued = []
        for (app, _, _), state in self.local_states.items():
            if not state.spec.re_exec:
                continue
            for session in list(state.sessions):
                for action in state.action_for_rerun(session, now):
                    req = self._request_from_action(action, app)
                    issued.append(req)
                    book = self._book(session, app)
                    book.dirty = True
                    self.dispatch(req)
        return issued

    def _flush_quiesced(self) -> None:
        for session, book in self.books.items():
            if not book.dirty:
                continue
            if self._pending_local(session) == 0 and self._pending_sources(session) == 0:
                book.dirty = False
                book.msgs_at_quiesce = book.msgs_sent
                self.quiesce_msg_log.setdefault(session, book.msgs_sent)
                self._send(session, self._completion_msg(session, book, []))

    def report_node_status(self) -> NodeStatus:
        loaded = set()
        for w in self.workers:
            loaded |= w.executor.loaded
        return NodeStatus(
            node_id=self.node_id, addr=self.addr,
            idle_executors=len(self.available), total_executors=len(self.workers),
            loaded_functions=frozenset(loaded),
            session_objects=self.store.session_object_counts(),
            queue_depth=len(self.pending), bytes_live=self.store.bytes_live,
        )

    # -- checkpointing -----------------------------------------------------------------

    def checkpoint(self) -> bytes:
        blob = encode_scheduler_state(self)
        self.store.durable.put(f"{CKPT_PREFIX}/{self.node_id}", blob)
        return blob

    def state_digest(self) -> int:
        return fnv1a64(encode_scheduler_state(self))


def restore_scheduler(
    node_id: str,
    registry: HandlerRegistry,
    store: ObjectStore,
    links: dict[int, object],
    shard_count: int,
    config: Optional[NodeConfig] = None,
    clock: Callable[[], int] = monotonic_ms,
    addr: str = "",
    executor_count: int = 2,
    fetch=None,
) -> LocalScheduler:
    """Rebuild a scheduler from its durable checkpoint (empty if none/corrupt).

    The store survives a scheduler restart, so restored trigger state is
    completed by replaying the readiness of every object still held locally;
    duplicate-delivery suppression makes the replay idempotent.
    """
    sched = LocalScheduler(node_id, registry, store, links, shard_count, config,
                           clock, addr, executor_count, fetch)
    blob = store.durable.get(f"{CKPT_PREFIX}/{node_id}")
    if blob is not None:
        try:
            decode_scheduler_state(sched, blob)
        except Exception:
            log.warning("corrupt checkpoint for %s; starting empty", node_id)
    for session in list(sched.books):
        for ref in store.session_refs(session):
            obj = store.get_ready(ref)
            if obj is not None:
                sched.on_object_ready(ref, obj.producer)
    return sched


# -- checkpoint codec (deterministic: sets are sorted) ---------------------------------


def _pack_refs(w: Writer, refs) -> None:
    w.u32(len(refs))
    for r in refs:
        w.string(r.bucket)
        w.string(r.key)
        w.string(r.session)


def _unpack_refs(r: Reader) -> list[ObjectRef]:
    return [ObjectRef(r.string(), r.string(), r.string()) for _ in range(r.u32())]


def _sorted_refs(refs) -> list[ObjectRef]:
    return sorted(refs, key=lambda x: (x.bucket, x.key, x.session))


def _pack_state_sessions(w: Writer, state: TriggerState) -> None:
    w.u32(len(state.sessions))
    for session in sorted(state.sessions):
        st = state.sessions[session]
        w.string(session)
        _pack_refs(w, st.buffer)
        _pack_refs(w, _sorted_refs(st.consumed))
        _pack_refs(w, _sorted_refs(st.seen))
        w.u32(len(st.running_sources))
        for rs in st.running_sources:
            w.string(rs.function)
            w.u64(rs.started_at)
            w.string(rs.request_id)
            w.u16(len(rs.args))
            for a in rs.args:
                tp._pack_arg(w, a)
        for ids in (st.notified_ids, st.completed_ids):
            w.u32(len(ids))
            for i in sorted(ids):
                w.string(i)
        w.u32(len(st.ready_keys))
        for key in sorted(st.ready_keys):
            w.string(key)
        _pack_refs(w, st.ready_order)
        w.flag(st.expected_keys is not None)
        if st.expected_keys is not None:
            w.u32(len(st.expected_keys))
            for k in st.expected_keys:
                w.string(k)
        w.flag(st.expected_count is not None)
        if st.expected_count is not None:
            w.u64(st.expected_count)
        w.u32(len(st.groups))
        for gid in sorted(st.groups):
            w.string(gid)
            _pack_refs(w, st.groups[gid])
        w.u32(st.completed_source_count)
        w.flag(st.expected_source_count is not None)
        if st.expected_source_count is not None:
            w.u32(st.expected_source_count)
        w.flag(st.expected_preset)
        w.flag(st.fired)
        w.flag(st.window_start is not None)
        if st.window_start is not None:
            w.u64(st.window_start)


def _unpack_state_sessions(r: Reader, state: TriggerState) -> None:
    for _ in range(r.u32()):
        session = r.string()
        st = SessionTriggerState()
        st.buffer = _unpack_refs(r)
        st.consumed = set(_unpack_refs(r))
        st.seen = set(_unpack_refs(r))
        for _ in range(r.u32()):
            fn = r.string()
            started_at = r.u64()
            rid = r.string()
            args = [tp._unpack_arg(r) for _ in range(r.u16())]
            st.running_sources.append(RunningSource(fn, args, started_at, rid))
        st.notified_ids = {r.string() for _ in range(r.u32())}
        st.completed_ids = {r.string() for _ in range(r.u32())}
        ready_keys = [r.string() for _ in range(r.u32())]
        st.ready_order = _unpack_refs(r)
        by_key = {ref.key: ref for ref in st.ready_order}
        st.ready_keys = {k: by_key[k] for k in ready_keys if k in by_key}
        if r.flag():
            st.expected_keys = [r.string() for _ in range(r.u32())]
        if r.flag():
            st.expected_count = r.u64()
        for _ in range(r.u32()):
            gid = r.string()
            st.groups[gid] = _unpack_refs(r)
        st.completed_source_count = r.u32()
        if r.flag():
            st.expected_source_count = r.u32()
        st.expected_preset = r.flag()
        st.fired = r.flag()
        if r.flag():
            st.window_start = r.u64()
        state.sessions[session] = st


def encode_trigger_states(states: dict[tuple[str, str, str], TriggerState]) -> bytes:
    """Standalone trigger-state checkpoint; also used by the chaos tests."""
    w = Writer()
    w.u32(len(states))
    for key in sorted(states):
        app, bucket, name = key
        w.string(app)
        w.string(bucket)
        w.string(name)
        _pack_state_sessions(w, states[key])
    return bytes(w.buf)


def decode_trigger_states(blob: bytes, specs: dict[tuple[str, str, str], object]):
    r = Reader(blob)
    states: dict[tuple[str, str, str], TriggerState] = {}
    for _ in range(r.u32()):
        key = (r.string(), r.string(), r.string())
        state = TriggerState(specs[key])
        _unpack_state_sessions(r, state)
        states[key] = state
    return states


def encode_scheduler_state(sched: LocalScheduler) -> bytes:
    w = Writer()
    w.u32(len(sched.apps))
    for name in sorted(sched.apps):
        tp._pack_app_spec(w, sched.apps[name])
    w.u32(len(sched.reclaimed))
    for session in sorted(sched.reclaimed):
        w.string(session)
    w.u32(len(sched.local_states))
    for (app, bucket, name) in sorted(sched.local_states):
        state = sched.local_states[(app, bucket, name)]
        w.string(app)
        w.string(bucket)
        w.string(name)
        _pack_state_sessions(w, state)
    w.u32(len(sched.pending))
    for req, enqueued in sched.pending:
        tp._pack_request(w, req)
        w.u64(enqueued)
    w.u32(len(sched.books))
    for session in sorted(sched.books):
        book = sched.books[session]
        w.string(session)
        w.string(book.app)
        w.u32(book.received)
        w.u32(book.started)
        w.u32(book.completed)
        _pack_refs(w, _sorted_refs(book.consumed))
    return bytes(w.buf)


def decode_scheduler_state(sched: LocalScheduler, blob: bytes) -> None:
    r = Reader(blob)
    for _ in range(r.u32()):
        sched.install_app(tp._unpack_app_spec(r))
    for _ in range(r.u32()):
        sched.reclaimed.add(r.string())
    for _ in range(r.u32()):
        app, bucket, name = r.string(), r.string(), r.string()
        state = sched.local_states.get((app, bucket, name))
        if state is None:
            spec = sched.apps.get(app)
            match = next((t for t in spec.triggers if t.bucket == bucket and t.name == name), None) if spec else None
            if match is None:
                raise ValueError(f"checkpoint references unknown trigger {app}/{bucket}/{name}")
            state = sched.local_states[(app, bucket, name)] = TriggerState(match)
        _unpack_state_sessions(r, state)
    for _ in range(r.u32()):
        req = tp._unpack_request(r)
        enqueued = r.u64()
        sched.pending.append((req, enqueued))
    for _ in range(r.u32()):
        session = r.string()
        book = SessionBook(app=r.string())
        book.received = r.u32()
        book.started = r.u32()
        book.completed = r.u32()
        book.consumed = set(_unpack_refs(r))
        sched.books[session] = book


class WorkerRuntime:
    """Threads + sockets around a LocalScheduler: the worker daemon's engine."""

    def __init__(
        self,
        node_id: str,
        listen: str,
        coordinators: list[str],
        registry: HandlerRegistry,
        durable: DurableStore,
        executors: int = 4,
        mem_budget: int = None,
        config: Optional[NodeConfig] = None,
        connect_timeout: float = 10.0,
    ) -> None:
        from .store import DEFAULT_BUDGET

        self.store = ObjectStore(durable, mem_budget or DEFAULT_BUDGET)
        self.server = tp.MessageServer(listen, self._on_message, name=f"node-{node_id}")
        self.links: dict[int, tp.Connection] = {}
        for shard_id, addr in enumerate(coordinators):
            conn = _dial_with_retry(addr, connect_timeout)
            self.links[shard_id] = conn
        self.sched = LocalScheduler(
            node_id, registry, self.store, self.links, max(len(coordinators), 1),
            config, addr=self.server.addr, executor_count=executors,
        )
        for shard_id, conn in self.links.items():
            conn.send(NodeStatusMsg(self.sched.report_node_status()))
            t = threading.Thread(target=self._link_reader, args=(conn,),
                                 name=f"node-{node_id}-shard{shard_id}", daemon=True)
            t.start()
        self._loop_thread = threading.Thread(target=self._run_loop, name=f"sched-{node_id}", daemon=True)
        self._loop_thread.start()

    def _on_message(self, msg, conn: tp.Connection) -> None:
        if isinstance(msg, tp.FetchObject):
            tp.serve_fetch(self.store, msg, conn)  # served on the I/O thread
        elif isinstance(msg, Invoke):
            self.sched.post("invoke", msg)
        elif isinstance(msg, Reset):
            self.sched.post("reset", msg)
        elif isinstance(msg, Reclaim):
            self.sched.post("reclaim", msg.session)

    def _link_reader(self, conn: tp.Connection) -> None:
        try:
            while True:
                msg = conn.recv()
                self._on_message(msg, conn)
        except (ConnectionError, OSError):
            pass

    def _run_loop(self) -> None:
        while True:
            try:
                event = self.sched.events.get(timeout=0.002)
            except queue.Empty:
                self.sched.on_tick(self.sched.clock())
                continue
            try:
                self.sched.process(event)
            except StopIteration:
                return
            except Exception:
                log.exception("scheduler event failed")

    def stop(self) -> None:
        self.sched.post("stop")
        self._loop_thread.join(timeout=2)
        for w in self.sched.workers:
            w.stop()
        for conn in self.links.values():
            conn.close()
        self.server.stop()


def _dial_with_retry(addr: str, timeout: float) -> tp.Connection:
    deadline = time.monotonic() + timeout
    delay = 0.05
    while True:
        try:
            return tp.dial(addr, timeout=min(timeout, 2.0))
        except OSError:
            if time.monotonic() >= deadline:
                raise
            time.sleep(delay)
            delay = min(delay * 2, 1.0)
