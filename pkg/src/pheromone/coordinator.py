"""Sharded global coordinator: client API, GLOBAL trigger evaluation, routing.

Each shard owns the apps whose 64-bit FNV-1a hash maps to it and shares
nothing with other shards. Node status deltas feed the GLOBAL trigger states;
satisfied triggers turn into routed invocations plus reset messages to every
node holding a consumed object.
"""

from __future__ import annotations

import copy
import logging
import queue
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

from .core import (
    AppSpec,
    FunctionRequest,
    InlineArg,
    NodeStatus,
    ObjectRef,
    ProtocolError,
    RefArg,
    Registry,
    RequestOrigin,
    SpecError,
    TriggerKind,
    TriggerScope,
    UnknownAppError,
    compile_dependencies,
    fnv1a64,
    new_session,
    session_app,
)
from .node import monotonic_ms
from .store import ARGS_PREFIX, DurableStore, OUT_PREFIX
from . import transport as tp
from .transport import (
    Ack,
    AddTrigger,
    CallApp,
    CollectOutputs,
    Completion,
    ConfigureJoin,
    CreateBucket,
    Invoke,
    ListTriggers,
    NodeStatusMsg,
    Outputs,
    Reclaim,
    RegisterApp,
    Reset,
    StatusDelta,
)
from .triggers import TriggerState

log = logging.getLogger("pheromone.coordinator")


def shard_of(app: str, shard_count: int) -> int:
    return fnv1a64(app.encode()) % shard_count


@dataclass
class NodeView:
    status: NodeStatus
    link: object = None
    last_seen: int = 0


@dataclass
class NodeCounters:
    received: int = 0
    started: int = 0
    completed: int = 0
    pending_local: int = 0
    pending_sources: int = 0


@dataclass
class SessionEntry:
    app: str
    bundle: AppSpec
    routed: int = 0
    closed: bool = True
    entry_functions_called: set[str] = field(default_factory=set)
    counters: dict[str, NodeCounters] = field(default_factory=dict)
    ref_node: dict[ObjectRef, str] = field(default_factory=dict)
    involved: set[str] = field(default_factory=set)
    staged_args: int = 0
    created_at: int = 0


class CoordinatorShard:
    """One shard's state and logic; a single loop thread owns all mutation."""

    def __init__(
        self,
        shard_id: int,
        shard_count: int,
        durable: DurableStore,
        clock=monotonic_ms,
        rng: Optional[random.Random] = None,
        piggyback_threshold: int = tp.DEFAULT_PIGGYBACK_THRESHOLD,
    ) -> None:
        self.shard_id = shard_id
        self.shard_count = shard_count
        self.durable = durable
        self.clock = clock
        self.rng = rng or random.Random()
        self.piggyback_threshold = piggyback_threshold
        self.registry = Registry()
        self.nodes: dict[str, NodeView] = {}
        self.sessions: dict[str, SessionEntry] = {}
        self.completed_sessions: set[str] = set()
        self.global_states: dict[tuple[str, str, str], TriggerState] = {}
        self.bundle_sent: set[tuple[str, str]] = set()  # (node, session)

    # -- ownership ---------------------------------------------------------------

    def owns(self, app: str) -> bool:
        return shard_of(app, self.shard_count) == self.shard_id

    def _own_or_raise(self, app: str) -> None:
        if not self.owns(app):
            raise SpecError(f"app {app!r} belongs to shard {shard_of(app, self.shard_count)}")

    # -- client API ----------------------------------------------------------------

    def register_app(self, msg: RegisterApp) -> str:
        spec = msg.spec
        if msg.dependencies is not None:
            spec = compile_dependencies(spec.name, [f.name for f in spec.functions],
                                        msg.dependencies)
            if msg.spec.entry_functions:
                spec.entry_functions = list(msg.spec.entry_functions)
        self._own_or_raise(spec.name)
        if "/" in spec.name:
            raise SpecError("app names may not contain '/'")
        self.registry.register(spec)
        for t in spec.triggers:
            self._instantiate_global(t)
        return spec.name

    def create_bucket(self, app: str, bucket: str) -> None:
        self._own_or_raise(app)
        if "/" in bucket or not bucket:
            raise SpecError(f"invalid bucket name {bucket!r}")
        self.registry.add_bucket(app, bucket)

    def add_trigger(self, spec) -> None:
        self._own_or_raise(spec.app)
        self.registry.add_trigger(spec.app, spec)
        self._instantiate_global(spec)

    def _instantiate_global(self, spec) -> None:
        if spec.scope is TriggerScope.GLOBAL:
            key = (spec.app, spec.bucket, spec.name)
            if key not in self.global_states:
                self.global_states[key] = TriggerState(spec)

    def call_app(self, msg: CallApp) -> str:
        now = self.clock()
        if msg.session:
            entry = self.sessions.get(msg.session)
            if entry is None:
                raise SpecError(f"unknown or completed session {msg.session!r}")
            if not msg.invocations:
                entry.closed = not msg.keep_open
                return msg.session
            session = msg.session
        else:
            if not msg.invocations:
                raise SpecError("call_app needs at least one invocation")
            app_spec = self.registry.get(msg.app)
            if not app_spec.entry_functions:
                raise SpecError(f"app {msg.app!r} has no entry functions")
            session = new_session(self.registry, msg.app, self.rng)
            entry = SessionEntry(app=msg.app, bundle=copy.deepcopy(app_spec),
                                 closed=not msg.keep_open, created_at=now)
            self.sessions[session] = entry
        names = entry.bundle.function_names()
        entries_allowed = set(entry.bundle.entry_functions) or names
        for function, _ in msg.invocations:
            if function not in names or function not in entries_allowed:
                raise SpecError(f"unknown entry function {function!r}")
        if not msg.session:
            self._preset_group_fanout(session, entry, len(msg.invocations))
        for function, raw_args in msg.invocations:
            req = FunctionRequest(session, function, self._stage_args(session, entry, raw_args),
                                  RequestOrigin.CLIENT, app=msg.app,
                                  request_id=f"c-{self.rng.getrandbits(64):016x}")
            entry.entry_functions_called.add(function)
            self.route_and_send(entry, req)
        return session

    def _preset_group_fanout(self, session: str, entry: SessionEntry, width: int) -> None:
        for t in entry.bundle.triggers:
            if t.kind is TriggerKind.DYNAMIC_GROUP and t.scope is TriggerScope.GLOBAL:
                state = self.global_states.get((t.app, t.bucket, t.name))
                if state is not None:
                    state.set_expected_sources(session, t.num_sources() or width)

    def _stage_args(self, session: str, entry: SessionEntry, raw_args: list[bytes]):
        """Inline small client args; stage big ones in the durable store."""
        args = []
        for raw in raw_args:
            if len(raw) <= self.piggyback_threshold:
                args.append(InlineArg(raw))
            else:
                seq = entry.staged_args
                entry.staged_args += 1
                self.durable.put(f"{ARGS_PREFIX}/{session}/{seq}", raw)
                args.append(RefArg(ObjectRef("__args__", str(seq), session)))
        return args

    def configure_join(self, msg: ConfigureJoin) -> None:
        state = self.global_states.get((msg.app, msg.bucket, msg.trigger))
        if state is None:
            raise SpecError(f"no global trigger {msg.trigger!r} on {msg.bucket!r}")
        entry = self.sessions.get(msg.session)
        if entry is None:
            raise SpecError(f"unknown session {msg.session!r}")
        actions = state.configure_join(msg.session, msg.keys, msg.count)
        self._apply_actions(entry, state, actions)

    def collect_outputs(self, session: str) -> Outputs:
        prefix = f"{OUT_PREFIX}/{session}/"
        entries = []
        for key in self.durable.scan_prefix(prefix):
            rest = key[len(prefix):]
            bucket, _, obj_key = rest.partition("/")
            payload = self.durable.get(key)
            if payload is not None:
                entries.append((bucket, obj_key, payload))
        return Outputs(entries, complete=session in self.completed_sessions)

    def list_triggers(self, app: str) -> ListTriggers:
        spec = self.registry.get(app)
        return ListTriggers(app, list(spec.triggers))

    # -- node traffic -----------------------------------------------------------------

    def on_node_status(self, status: NodeStatus, link=None) -> None:
        view = self.nodes.get(status.node_id)
        if view is None:
            self.nodes[status.node_id] = NodeView(status, link, self.clock())
        else:
            view.status = status
            view.last_seen = self.clock()
            if link is not None:
                view.link = link

    def on_status_delta(self, delta: StatusDelta) -> None:
        entry = self.sessions.get(delta.session)
        if entry is None:
            if delta.session in self.completed_sessions:
                return  # late replay after reclamation: harmless
            raise ProtocolError(f"delta for unknown session {delta.session!r}")
        if not self.owns(entry.app):
            raise ProtocolError(f"delta for foreign shard app {entry.app!r}")
        if delta.status is not None:
            self.on_node_status(delta.status)
        entry.involved.add(delta.node_id)
        now = self.clock()
        for function, request_id, at, args in delta.starts:
            for state in self._states_for(entry):
                rule_match = any(r.source_function == function for r in state.spec.re_exec)
                is_group_source = (state.spec.kind is TriggerKind.DYNAMIC_GROUP
                                   and function in entry.entry_functions_called)
                if rule_match or is_group_source:
                    state.notify_source_func(function, delta.session, args, at, request_id)
        for ref, producer in delta.ready:
            entry.ref_node[ref] = delta.node_id
            for state in self._states_for(entry, bucket=ref.bucket):
                actions = state.action_for_new_object(ref, now, producer)
                self._apply_actions(entry, state, actions)

    def on_completion(self, msg: Completion) -> None:
        entry = self.sessions.get(msg.session)
        if entry is None:
            return
        entry.involved.add(msg.node_id)
        counters = entry.counters.setdefault(msg.node_id, NodeCounters())
        counters.received = max(counters.received, msg.received)
        counters.started = max(counters.started, msg.started)
        counters.completed = max(counters.completed, msg.completed)
        counters.pending_local = msg.pending_local
        counters.pending_sources = msg.pending_sources
        for function, request_id, ok, _emitted in msg.entries:
            if not ok:
                continue
            for state in self._states_for(entry):
                if (state.spec.kind is TriggerKind.DYNAMIC_GROUP
                        and state.was_notified(msg.session, request_id)):
                    actions = state.complete_source(msg.session, function, request_id)
                    self._apply_actions(entry, state, actions)

    def on_forwarded_invoke(self, msg: Invoke) -> None:
        entry = self.sessions.get(msg.request.session)
        if entry is None:
            log.warning("forwarded invoke for unknown session %r", msg.request.session)
            return
        self.route_and_send(entry, msg.request)

    # -- trigger action plumbing ---------------------------------------------------------

    def _states_for(self, entry: SessionEntry, bucket: Optional[str] = None):
        for t in entry.bundle.triggers:
            if t.scope is not TriggerScope.GLOBAL:
                continue
            if bucket is not None and t.bucket != bucket:
                continue
            state = self.global_states.get((t.app, t.bucket, t.name))
            if state is not None:
                yield state

    def _apply_actions(self, entry: SessionEntry, state: TriggerState, actions) -> None:
        for action in actions:
            if action.rerun_args is not None:
                req = FunctionRequest(action.session, action.target_function,
                                      list(action.rerun_args), RequestOrigin.RE_EXEC,
                                      app=entry.app,
                                      request_id=f"x-{self.rng.getrandbits(64):016x}")
                self.route_and_send(entry, req)
                continue
            args = []
            for ref in action.inputs:
                holder = entry.ref_node.get(ref, "")
                locator = self.nodes[holder].status.addr if holder in self.nodes else ""
                args.append(RefArg(ref, locator))
            req = FunctionRequest(action.session, action.target_function, args,
                                  RequestOrigin.TRIGGER, app=entry.app,
                                  request_id=f"t-{self.rng.getrandbits(64):016x}",
                                  group_id=action.group_id)
            self.route_and_send(entry, req)
            self._send_resets(entry, action.session, action.inputs)

    def _send_resets(self, entry: SessionEntry, session: str, refs) -> None:
        by_node: dict[str, list[ObjectRef]] = {}
        for ref in refs:
            node = entry.ref_node.get(ref)
            if node is not None:
                by_node.setdefault(node, []).append(ref)
        for node_id, node_refs in by_node.items():
            view = self.nodes.get(node_id)
            if view is not None and view.link is not None:
                view.link.send(Reset(session, node_refs))

    # -- routing -------------------------------------------------------------------------

    def route_request(self, req: FunctionRequest) -> str:
        """Pick the target node (locality, warmth, idleness; lowest id breaks ties)."""
        if not self.nodes:
            raise SpecError("no live nodes")
        session_objs = {nid: v.status.session_objects.get(req.session, 0)
                        for nid, v in self.nodes.items()}
        idle = [nid for nid, v in self.nodes.items() if v.status.idle_executors > 0]
        if idle:
            return sorted(
                idle,
                key=lambda nid: (-session_objs[nid],
                                 0 if req.function in self.nodes[nid].status.loaded_functions else 1,
                                 -self.nodes[nid].status.idle_executors,
                                 nid),
            )[0]
        return sorted(self.nodes, key=lambda nid: (self.nodes[nid].status.queue_depth, nid))[0]

    def route_and_send(self, entry: SessionEntry, req: FunctionRequest) -> str:
        session = req.session
        node_id = self.route_request(req)
        view = self.nodes[node_id]
        entry.routed += 1
        entry.involved.add(node_id)
        # optimistic adjustment until the next status report lands
        if view.status.idle_executors > 0:
            view.status.idle_executors -= 1
        else:
            view.status.queue_depth += 1
        bundle = None
        if (node_id, session) not in self.bundle_sent:
            self.bundle_sent.add((node_id, session))
            bundle = entry.bundle
        if view.link is not None:
            view.link.send(Invoke(req, bundle))
        return node_id

    # -- periodic work ----------------------------------------------------------------------

    def tick(self, now: Optional[int] = None) -> None:
        now = self.clock() if now is None else now
        for (app, _, _), state in list(self.global_states.items()):
            for session in list(state.sessions):
                entry = self.sessions.get(session)
                if entry is None:
                    continue
                if state.spec.kind is TriggerKind.BY_TIME:
                    self._apply_actions(entry, state, state.periodic_check(session, now))
                if state.spec.re_exec:
                    self._apply_actions(entry, state, state.action_for_rerun(session, now))
        for session in [s for s, e in self.sessions.items() if self._session_complete(s, e)]:
            self._finish_session(session)

    def _session_complete(self, session: str, entry: SessionEntry) -> bool:
        if not entry.closed or entry.routed == 0:
            return False
        total_received = sum(c.received for c in entry.counters.values())
        if total_received != entry.routed:
            return False
        for c in entry.counters.values():
            if c.pending_local or c.pending_sources or c.started != c.completed:
                return False
        for state in self._states_for(entry):
            if state.blocks_completion(session):
                return False
        return True

    def _finish_session(self, session: str) -> None:
        entry = self.sessions.pop(session)
        self.completed_sessions.add(session)
        for state in self._states_for(entry):
            state.drop_session(session)
        for node_id in entry.involved:
            view = self.nodes.get(node_id)
            if view is not None and view.link is not None:
                view.link.send(Reclaim(session))
        for key in self.durable.scan_prefix(f"{ARGS_PREFIX}/{session}/"):
            self.durable.delete(key)
        self.bundle_sent = {(n, s) for (n, s) in self.bundle_sent if s != session}


class CoordinatorServer:
    """TCP front end running one CoordinatorShard on its own event loop."""

    def __init__(self, shard_id: int, shard_count: int, listen: str,
                 durable: DurableStore, tick_ms: int = 10,
                 rng: Optional[random.Random] = None) -> None:
        self.shard = CoordinatorShard(shard_id, shard_count, durable, rng=rng)
        self.tick_ms = tick_ms
        self.events: queue.SimpleQueue = queue.SimpleQueue()
        self.server = tp.MessageServer(listen, self._on_message, name=f"coord-{shard_id}")
        self.addr = self.server.addr
        self._thread = threading.Thread(target=self._run_loop, name=f"shard-{shard_id}", daemon=True)
        self._thread.start()

    def _on_message(self, msg, conn: tp.Connection) -> None:
        self.events.put((msg, conn))

    def _run_loop(self) -> None:
        last_tick = 0.0
        while True:
            try:
                item = self.events.get(timeout=self.tick_ms / 2000)
            except queue.Empty:
                item = None
            if item is not None:
                if item[0] is None:
                    return
                msg, conn = item
                try:
                    self._handle(msg, conn)
                except (SpecError, UnknownAppError, ProtocolError) as exc:
                    if self._expects_reply(msg):
                        conn.send(Ack(ok=False, error=str(exc)))
                except Exception:
                    log.exception("coordinator failed handling %s", type(msg).__name__)
                    if self._expects_reply(msg):
                        conn.send(Ack(ok=False, error="internal error"))
            now = time.monotonic()
            if (now - last_tick) * 1000 >= self.tick_ms:
                last_tick = now
                try:
                    self.shard.tick()
                except Exception:
                    log.exception("tick failed")

    @staticmethod
    def _expects_reply(msg) -> bool:
        return isinstance(msg, (RegisterApp, CreateBucket, AddTrigger, CallApp,
                                ConfigureJoin, CollectOutputs, ListTriggers))

    def _handle(self, msg, conn: tp.Connection) -> None:
        shard = self.shard
        if isinstance(msg, NodeStatusMsg):
            shard.on_node_status(msg.status, link=conn)
        elif isinstance(msg, StatusDelta):
            try:
                shard.on_status_delta(msg)
            except ProtocolError as exc:
                log.warning("%s", exc)
        elif isinstance(msg, Completion):
            shard.on_completion(msg)
        elif isinstance(msg, Invoke):
            shard.on_forwarded_invoke(msg)
        elif isinstance(msg, RegisterApp):
            name = shard.register_app(msg)
            conn.send(Ack(ok=True, value=name))
        elif isinstance(msg, CreateBucket):
            shard.create_bucket(msg.app, msg.bucket)
            conn.send(Ack(ok=True))
        elif isinstance(msg, AddTrigger):
            shard.add_trigger(msg.spec)
            conn.send(Ack(ok=True))
        elif isinstance(msg, CallApp):
            session = shard.call_app(msg)
            conn.send(Ack(ok=True, value=session))
        elif isinstance(msg, ConfigureJoin):
            shard.configure_join(msg)
            conn.send(Ack(ok=True))
        elif isinstance(msg, CollectOutputs):
            conn.send(shard.collect_outputs(msg.session))
        elif isinstance(msg, ListTriggers):
            conn.send(shard.list_triggers(msg.app))
        else:
            log.warning("unexpected message %s", type(msg).__name__)

    def stop(self) -> None:
        self.events.put((None, None))
        self._thread.join(timeout=2)
        self.server.stop()
