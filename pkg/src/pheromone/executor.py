"""Function runtime: handler registry, per-executor execution loop, user library.

Handlers are in-process callables with the shape handler(library, args) -> int
(0 = OK). Each executor runs at most one request at a time; a handler id stays
"loaded" on the executor after first use so later invocations take the warm
path.
"""

from __future__ import annotations

import queue
import random
import struct
import threading
import time
import uuid
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

from .core import (
    AppSpec,
    FunctionRequest,
    InlineArg,
    ObjectRef,
    PheromoneError,
    RefArg,
    SpecError,
    StoreError,
    fnv1a64,
)
from .store import ARGS_PREFIX, ObjectStore

Handler = Callable[["UserLibrary", list[bytes]], int]


class HandlerRegistry:
    """Named in-process handlers; idempotent for identical re-registration."""

    def __init__(self) -> None:
        self._handlers: dict[str, Handler] = {}
        self._lock = threading.Lock()

    def register(self, handler_id: str, handler: Handler) -> None:
        with self._lock:
            existing = self._handlers.get(handler_id)
            if existing is not None and existing is not handler:
                raise SpecError(f"handler {handler_id!r} already registered with a different body")
            self._handlers[handler_id] = handler

    def get(self, handler_id: str) -> Handler:
        with self._lock:
            try:
                return self._handlers[handler_id]
            except KeyError:
                raise SpecError(f"no handler registered for {handler_id!r}") from None

    def contains(self, handler_id: str) -> bool:
        with self._lock:
            return handler_id in self._handlers


class ExecStatus(Enum):
    OK = 0
    HANDLER_ERROR = 1
    CRASH_INJECTED = 2


@dataclass
class CompletionReport:
    request: FunctionRequest
    status: ExecStatus
    objects_emitted: int = 0
    executor_id: int = -1
    duration_ms: float = 0.0


class CrashInjector:
    """Per-handler crash probabilities with one rng stream per handler.

    Separate streams keep one handler's draw consumption from perturbing
    another's, so seeded failure patterns stay reproducible.
    """

    def __init__(self, probabilities: Optional[dict[str, float]] = None, seed: Optional[int] = None) -> None:
        self.probabilities = dict(probabilities or {})
        self._seed = seed
        self._rngs: dict[str, random.Random] = {}

    def _rng(self, handler_id: str) -> random.Random:
        rng = self._rngs.get(handler_id)
        if rng is None:
            seed = None if self._seed is None else f"{self._seed}:{handler_id}"
            rng = self._rngs[handler_id] = random.Random(seed)
        return rng

    def should_crash(self, handler_id: str) -> bool:
        p = self.probabilities.get(handler_id, 0.0)
        return p > 0 and self._rng(handler_id).random() < p


class UserLibrary:
    """Capability handed to handlers: object operations scoped to one session."""

    def __init__(
        self,
        session: str,
        function: str,
        app_spec: AppSpec,
        store: ObjectStore,
        request: FunctionRequest,
        fetch: Optional[Callable[[str, ObjectRef], bytes]] = None,
    ) -> None:
        self.session = session
        self.function = function
        self.app_spec = app_spec
        self.store = store
        self.request = request
        self._fetch = fetch
        self.objects_emitted = 0
        self.arg_refs: list[Optional[ObjectRef]] = []

    # -- object API ---------------------------------------------------------------

    def gen_unique_key(self) -> str:
        return uuid.uuid4().hex

    def create_object(self, bucket: Optional[str] = None, key: Optional[str] = None,
                      function: Optional[str] = None, size_hint: int = 0):
        if bucket is None:
            bucket = self._resolve_bucket(function)
        if key is None:
            key = self.gen_unique_key()
        return self.store.create_object(bucket, key, self.session, producer=self.function,
                                        size_hint=size_hint, created_at=int(time.time() * 1000))

    def _resolve_bucket(self, function: Optional[str]) -> str:
        if function is not None:
            # resolve via the unique trigger targeting that function
            matches = [t.bucket for t in self.app_spec.triggers if t.target_function == function]
            if not matches:
                raise SpecError(f"no trigger targets function {function!r}")
            if len(set(matches)) > 1:
                raise SpecError(f"ambiguous target {function!r}: triggers on {sorted(set(matches))}")
            return matches[0]
        # bucket-less form: only valid for apps compiled from dependencies
        mapped = self.app_spec.dependency_buckets.get(self.function)
        if mapped is None:
            raise SpecError(
                f"function {self.function!r} has no compiled dependency bucket; pass a bucket name"
            )
        if mapped == "":
            raise SpecError(f"function {self.function!r} has multiple outgoing dependencies; ambiguous")
        return mapped

    def send_object(self, obj, output: bool = False) -> None:
        self.store.send_object(obj, output=output)
        self.objects_emitted += 1

    def get_object(self, bucket: str, key: str):
        return self.store.get_object(bucket, key, self.session)

    def resolve_args(self) -> list[bytes]:
        """Materialize request args as read-only byte payloads (local first, then remote)."""
        payloads: list[bytes] = []
        self.arg_refs = []
        for arg in self.request.args:
            if isinstance(arg, InlineArg):
                payloads.append(arg.payload)
                self.arg_refs.append(None)
                continue
            self.arg_refs.append(arg.ref)
            local = self.store.get_ready(arg.ref)
            if local is not None:
                payloads.append(local.payload)
                continue
            if arg.ref.bucket == "__args__":
                staged = self.store.durable.get(f"{ARGS_PREFIX}/{arg.ref.session}/{arg.ref.key}")
                if staged is not None:
                    payloads.append(staged)
                    continue
            if arg.locator and self._fetch is not None:
                payloads.append(self._fetch(arg.locator, arg.ref))
                continue
            raise StoreError(f"cannot resolve argument object {arg.ref}")
        return payloads


class Executor:
    """One worker slot; processes requests strictly serially."""

    def __init__(self, executor_id: int) -> None:
        self.id = executor_id
        self.busy = False
        self.loaded: set[str] = set()
        self.cold_loads = 0
        self.warm_hits = 0
        self._cached: dict[str, Handler] = {}
        self._lock = threading.Lock()


def execute(
    executor: Executor,
    req: FunctionRequest,
    registry: HandlerRegistry,
    library: UserLibrary,
    crash: Optional[CrashInjector] = None,
) -> CompletionReport:
    """Run one request on an idle executor and report the outcome."""
    with executor._lock:
        if executor.busy:
            raise PheromoneError(f"executor {executor.id} is busy")
        executor.busy = True
    started = time.monotonic()
    try:
        handler_id = library.app_spec.handler_for(req.function) if library.app_spec.functions else req.function
        if handler_id in executor.loaded:
            executor.warm_hits += 1
            handler = executor._cached[handler_id]
        else:
            handler = registry.get(handler_id)
            executor.loaded.add(handler_id)
            executor._cached[handler_id] = handler
            executor.cold_loads += 1
        if crash is not None and crash.should_crash(handler_id):
            return CompletionReport(req, ExecStatus.CRASH_INJECTED, library.objects_emitted,
                                    executor.id, (time.monotonic() - started) * 1000)
        try:
            args = library.resolve_args()
            status = handler(library, args)
        except Exception:
            return CompletionReport(req, ExecStatus.HANDLER_ERROR, library.objects_emitted,
                                    executor.id, (time.monotonic() - started) * 1000)
        code = ExecStatus.OK if status == 0 else ExecStatus.HANDLER_ERROR
        return CompletionReport(req, code, library.objects_emitted, executor.id,
                                (time.monotonic() - started) * 1000)
    finally:
        with executor._lock:
            executor.busy = False


class ExecutorWorker(threading.Thread):
    """Thread wrapper: waits on a mailbox, runs execute(), posts the report."""

    def __init__(self, executor: Executor, registry: HandlerRegistry,
                 make_library: Callable[[FunctionRequest], UserLibrary],
                 on_done: Callable[[CompletionReport], None],
                 crash: Optional[CrashInjector] = None) -> None:
        super().__init__(name=f"executor-{executor.id}", daemon=True)
        self.executor = executor
        self.registry = registry
        self.make_library = make_library
        self.on_done = on_done
        self.crash = crash
        self.mailbox: queue.SimpleQueue = queue.SimpleQueue()

    def submit(self, req: FunctionRequest) -> None:
        self.mailbox.put(req)

    def stop(self) -> None:
        self.mailbox.put(None)

    def run(self) -> None:
        while True:
            req = self.mailbox.get()
            if req is None:
                return
            library = self.make_library(req)
            report = execute(self.executor, req, self.registry, library, self.crash)
            self.on_done(report)


# -- MapReduce wrapping -------------------------------------------------------------
#
# Shuffle objects carry length-prefixed binary records:
#   u32 key length | key bytes | u32 value length | value bytes


def encode_records(records: list[tuple[bytes, bytes]]) -> bytes:
    parts = []
    for key, value in records:
        parts.append(struct.pack(">I", len(key)))
        parts.append(key)
        parts.append(struct.pack(">I", len(value)))
        parts.append(value)
    return b"".join(parts)


def decode_records(payload: bytes) -> list[tuple[bytes, bytes]]:
    records = []
    view = memoryview(payload)
    pos = 0
    while pos < len(view):
        (klen,) = struct.unpack_from(">I", view, pos)
        pos += 4
        key = bytes(view[pos : pos + klen])
        pos += klen
        (vlen,) = struct.unpack_from(">I", view, pos)
        pos += 4
        value = bytes(view[pos : pos + vlen])
        pos += vlen
        records.append((key, value))
    if pos != len(view):
        raise PheromoneError("trailing bytes in record stream")
    return records


def default_partitioner(key: bytes, partitions: int) -> int:
    return fnv1a64(key) % partitions


def mapreduce_wrap(
    mapper: Callable[[bytes, Callable[[bytes, bytes], None]], None],
    reducer: Callable[[bytes, list[bytes], Callable[[bytes, bytes], None]], None],
    shuffle_bucket: str,
    output_bucket: str,
    partitions: int,
    partitioner: Callable[[bytes, int], int] = default_partitioner,
    group_label: Callable[[int], str] = str,
) -> tuple[Handler, Handler]:
    """Package user map/reduce snippets as platform handlers.

    The map handler buffers emits, partitions keys, and sends one shuffle
    object per non-empty reducer group named "<group>:<mapper-id>:<seq>"; its
    return signals source completion. The reduce handler decodes its group's
    objects, groups values by key, and persists one output object.
    """

    def map_handler(library: UserLibrary, args: list[bytes]) -> int:
        buffered: dict[int, list[tuple[bytes, bytes]]] = {}

        def emit(key: bytes, value: bytes) -> None:
            buffered.setdefault(partitioner(key, partitions), []).append((key, value))

        for split in args:
            mapper(split, emit)
        mapper_id = library.request.request_id or library.gen_unique_key()
        for seq, part in enumerate(sorted(buffered)):
            obj = library.create_object(shuffle_bucket, f"{group_label(part)}:{mapper_id}:{seq}")
            obj.set_value(encode_records(buffered[part]))
            library.send_object(obj)
        return 0

    def reduce_handler(library: UserLibrary, args: list[bytes]) -> int:
        refs = [r for r in library.arg_refs if r is not None]
        group = library.request.group_id or (refs[0].key.split(":", 1)[0] if refs else "0")
        grouped: dict[bytes, list[bytes]] = {}
        for payload in args:
            for key, value in decode_records(payload):
                grouped.setdefault(key, []).append(value)
        out: list[tuple[bytes, bytes]] = []

        def emit(key: bytes, value: bytes) -> None:
            out.append((key, value))

        for key in sorted(grouped):
            reducer(key, grouped[key], emit)
        result = library.create_object(output_bucket, f"part-{group}")
        result.set_value(encode_records(out))
        library.send_object(result, output=True)
        return 0

    return map_handler, reduce_handler
