"""The eight trigger primitive state machines behind one event interface.

A TriggerState consumes object-readiness events for its bucket and decides
when to invoke the target function. State is partitioned by session; events in
one session never affect another. Duplicate deliveries of the same object ref
are ignored, which makes replay after checkpoint restore idempotent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

from .core import (
    Arg,
    ObjectRef,
    ONE_SHOT_KINDS,
    ReExecMode,
    TriggerAction,
    TriggerError,
    TriggerKind,
    TriggerSpec,
)


def group_of(key: str) -> str:
    """Group id of an object key: the substring before the first ':'."""
    return key.split(":", 1)[0]


@dataclass
class RunningSource:
    """One tracked upstream function instance awaiting its output."""

    function: str
    args: list[Arg]
    started_at: int
    request_id: str = ""


@dataclass
class SessionTriggerState:
    buffer: list[ObjectRef] = field(default_factory=list)
    consumed: set[ObjectRef] = field(default_factory=set)
    seen: set[ObjectRef] = field(default_factory=set)
    running_sources: list[RunningSource] = field(default_factory=list)
    notified_ids: set[str] = field(default_factory=set)
    completed_ids: set[str] = field(default_factory=set)
    # arrival bookkeeping for the set-shaped kinds
    ready_keys: dict[str, ObjectRef] = field(default_factory=dict)
    ready_order: list[ObjectRef] = field(default_factory=list)
    # DYNAMIC_JOIN runtime expectation
    expected_keys: Optional[list[str]] = None
    expected_count: Optional[int] = None
    # DYNAMIC_GROUP
    groups: dict[str, list[ObjectRef]] = field(default_factory=dict)
    completed_source_count: int = 0
    expected_source_count: Optional[int] = None
    expected_preset: bool = False
    # one-shot kinds fire at most once per session
    fired: bool = False
    # BY_TIME window anchor: time of the first delivered object
    window_start: Optional[int] = None


class TriggerState:
    """Per-trigger state machine; owned by a single event loop."""

    def __init__(self, spec: TriggerSpec) -> None:
        self.spec = spec
        self.sessions: dict[str, SessionTriggerState] = {}

    def _session(self, session: str) -> SessionTriggerState:
        st = self.sessions.get(session)
        if st is None:
            st = self.sessions[session] = SessionTriggerState()
        return st

    def drop_session(self, session: str) -> None:
        self.sessions.pop(session, None)

    def _action(self, session: str, inputs: list[ObjectRef], group_id: Optional[str] = None) -> TriggerAction:
        return TriggerAction(
            session=session,
            target_function=self.spec.target_function,
            inputs=inputs,
            reason=self.spec.kind,
            group_id=group_id,
        )

    # -- object readiness ----------------------------------------------------

    def action_for_new_object(self, ref: ObjectRef, now: int, producer: Optional[str] = None) -> list[TriggerAction]:
        """Feed one ready object; returns the actions it releases (often none)."""
        if ref.bucket != self.spec.bucket:
            raise TriggerError(f"trigger {self.spec.name!r} got object for foreign bucket {ref.bucket!r}")
        st = self._session(ref.session)
        if ref in st.seen:
            return []
        st.seen.add(ref)
        if producer:
            self._clear_source(st, producer)
        if st.running_sources:
            # a PER_SESSION obligation is met by any arrival in this bucket
            per_session = {r.source_function for r in self.spec.re_exec
                           if r.mode is ReExecMode.PER_SESSION}
            if per_session:
                st.running_sources = [rs for rs in st.running_sources
                                      if rs.function not in per_session]
        kind = self.spec.kind
        if kind is TriggerKind.IMMEDIATE:
            st.consumed.add(ref)
            return [self._action(ref.session, [ref])]
        if kind is TriggerKind.BY_BATCH_SIZE:
            st.buffer.append(ref)
            size = self.spec.count()
            if len(st.buffer) >= size:
                batch, st.buffer = st.buffer[:size], st.buffer[size:]
                st.consumed.update(batch)
                return [self._action(ref.session, batch)]
            return []
        if kind is TriggerKind.BY_TIME:
            if st.window_start is None:
                st.window_start = now
            st.buffer.append(ref)
            return []
        if kind is TriggerKind.BY_NAME:
            if ref.key == self.spec.key():
                st.consumed.add(ref)
                return [self._action(ref.session, [ref])]
            st.buffer.append(ref)  # accessible but never triggering
            return []
        if kind is TriggerKind.BY_SET:
            keys = self.spec.key_set()
            if ref.key not in keys or ref.key in st.ready_keys:
                st.buffer.append(ref)
                return []
            st.ready_keys[ref.key] = ref
            st.ready_order.append(ref)
            if not st.fired and all(k in st.ready_keys for k in keys):
                st.fired = True
                ordered = [st.ready_keys[k] for k in keys]
                st.consumed.update(ordered)
                return [self._action(ref.session, ordered)]
            return []
        if kind is TriggerKind.REDUNDANT:
            keys = self.spec.key_set()
            k, _n = self.spec.k_of_n()
            if ref.key not in keys or ref.key in st.ready_keys:
                st.buffer.append(ref)
                return []
            st.ready_keys[ref.key] = ref
            if st.fired:
                st.consumed.add(ref)  # late replica: recorded, never fires
                return []
            st.ready_order.append(ref)
            if len(st.ready_order) >= k:
                st.fired = True
                first_k = st.ready_order[:k]
                st.consumed.update(first_k)
                return [self._action(ref.session, first_k)]
            return []
        if kind is TriggerKind.DYNAMIC_JOIN:
            if st.fired:
                st.consumed.add(ref)
                return []
            if ref.key in st.ready_keys:
                st.buffer.append(ref)
                return []
            st.ready_keys[ref.key] = ref
            st.ready_order.append(ref)
            return self._check_join(ref.session, st)
        if kind is TriggerKind.DYNAMIC_GROUP:
            if st.fired:
                st.consumed.add(ref)
                return []
            st.groups.setdefault(group_of(ref.key), []).append(ref)
            return []
        raise TriggerError(f"unhandled trigger kind {kind}")

    # -- timers ----------------------------------------------------------------

    def periodic_check(self, session: str, now: int) -> list[TriggerAction]:
        """Close elapsed BY_TIME windows; other kinds never fire here."""
        if self.spec.kind is not TriggerKind.BY_TIME:
            return []
        st = self.sessions.get(session)
        if st is None or st.window_start is None:
            return []
        window = self.spec.time_window()
        elapsed = now - st.window_start
        if elapsed < window:
            return []
        st.window_start += (elapsed // window) * window
        batch, st.buffer = st.buffer, []
        if not batch and not self.spec.fire_on_empty():
            return []
        st.consumed.update(batch)
        return [self._action(session, batch)]

    # -- re-execution bookkeeping -----------------------------------------------

    def notify_source_func(
        self,
        function: str,
        session: str,
        args: list[Arg],
        now: int,
        request_id: str = "",
    ) -> None:
        """Record a started upstream instance so its output can be awaited."""
        st = self._session(session)
        if request_id and request_id in st.notified_ids:
            return
        if request_id:
            st.notified_ids.add(request_id)
        mode = None
        for rule in self.spec.re_exec:
            if rule.source_function == function:
                mode = rule.mode
                break
        if mode is ReExecMode.PER_SESSION:
            if any(rs.function == function for rs in st.running_sources):
                return
        st.running_sources.append(RunningSource(function, list(args), now, request_id))
        if self.spec.kind is TriggerKind.DYNAMIC_GROUP and not st.expected_preset:
            st.expected_source_count = (st.expected_source_count or 0) + 1

    def _clear_source(self, st: SessionTriggerState, producer: str) -> None:
        for i, rs in enumerate(st.running_sources):
            if rs.function == producer:
                del st.running_sources[i]
                return

    def action_for_rerun(self, session: str, now: int) -> list[TriggerAction]:
        """Return one re-execution action per tracked source past its timeout."""
        st = self.sessions.get(session)
        if st is None or not st.running_sources:
            return []
        actions: list[TriggerAction] = []
        by_source = {rule.source_function: rule for rule in self.spec.re_exec}
        for rs in st.running_sources:
            rule = by_source.get(rs.function)
            if rule is None:
                continue
            if now - rs.started_at > rule.timeout_ms:
                rs.started_at = now  # the re-execution itself gets a fresh timeout
                actions.append(
                    TriggerAction(
                        session=session,
                        target_function=rs.function,
                        inputs=[],
                        reason=self.spec.kind,
                        rerun_args=list(rs.args),
                    )
                )
        return actions

    # -- runtime configuration ----------------------------------------------------

    def configure_join(
        self,
        session: str,
        expected_keys: Optional[Iterable[str]] = None,
        expected_count: Optional[int] = None,
    ) -> list[TriggerAction]:
        """Set a DYNAMIC_JOIN expectation; fires immediately if already satisfied."""
        if self.spec.kind is not TriggerKind.DYNAMIC_JOIN:
            raise TriggerError(f"configure_join on {self.spec.kind} trigger {self.spec.name!r}")
        st = self._session(session)
        if st.fired:
            raise TriggerError(f"trigger {self.spec.name!r} already fired for session {session!r}")
        if expected_keys is not None:
            st.expected_keys = list(expected_keys)
        elif expected_count is not None:
            st.expected_count = int(expected_count)
        else:
            raise TriggerError("configure_join needs a key set or a count")
        return self._check_join(session, st)

    def _check_join(self, session: str, st: SessionTriggerState) -> list[TriggerAction]:
        if st.fired:
            return []
        if st.expected_keys is not None:
            if all(k in st.ready_keys for k in st.expected_keys):
                st.fired = True
                ordered = [st.ready_keys[k] for k in st.expected_keys]
                st.consumed.update(ordered)
                return [self._action(session, ordered)]
        elif st.expected_count is not None and len(st.ready_order) >= st.expected_count:
            st.fired = True
            take = st.ready_order[: st.expected_count]
            st.consumed.update(take)
            return [self._action(session, take)]
        return []

    def complete_source(self, session: str, function: str, request_id: str = "") -> list[TriggerAction]:
        """Count a successful upstream return; fires the groups once all sources completed."""
        if self.spec.kind is not TriggerKind.DYNAMIC_GROUP:
            raise TriggerError(f"complete_source on {self.spec.kind} trigger {self.spec.name!r}")
        st = self.sessions.get(session)
        if st is None:
            raise TriggerError(f"completion of {function!r} without prior notify")
        running = any(rs.function == function for rs in st.running_sources)
        if not running and not (request_id and request_id in st.notified_ids):
            raise TriggerError(f"completion of {function!r} without prior notify")
        if request_id:
            if request_id in st.completed_ids:
                return []
            st.completed_ids.add(request_id)
        self._clear_source(st, function)
        st.completed_source_count += 1
        if st.fired or st.expected_source_count is None:
            return []
        if st.completed_source_count < st.expected_source_count:
            return []
        st.fired = True
        actions = []
        for gid in sorted(st.groups):
            refs = st.groups[gid]
            if not refs:
                continue
            st.consumed.update(refs)
            actions.append(self._action(session, list(refs), group_id=gid))
        return actions

    def set_expected_sources(self, session: str, count: int) -> None:
        """Preset the DYNAMIC_GROUP fan-out width (from the invoker)."""
        st = self._session(session)
        st.expected_source_count = count
        st.expected_preset = True

    def was_notified(self, session: str, request_id: str) -> bool:
        st = self.sessions.get(session)
        return bool(st and request_id in st.notified_ids)

    # -- coordinator reset / replay support -------------------------------------

    def mark_consumed(self, session: str, refs: Iterable[ObjectRef]) -> None:
        """Apply a coordinator reset: these refs are globally consumed."""
        st = self._session(session)
        for ref in refs:
            st.seen.add(ref)
            st.consumed.add(ref)
            if ref in st.buffer:
                st.buffer.remove(ref)

    def has_pending_sources(self, session: str) -> bool:
        st = self.sessions.get(session)
        return bool(st and st.running_sources)

    def blocks_completion(self, session: str) -> bool:
        """True while this trigger could still fire or awaits a source for the session."""
        st = self.sessions.get(session)
        if st is None:
            return False
        if st.running_sources:
            return True
        kind = self.spec.kind
        if kind is TriggerKind.BY_TIME:
            return bool(st.buffer)
        if kind in ONE_SHOT_KINDS and not st.fired:
            return bool(st.ready_order or any(st.groups.values()))
        return False
