"""Shared domain types, session identity, and the application registry."""

from __future__ import annotations

import random
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Union


class PheromoneError(Exception):
    """Base class for platform errors."""


class SpecError(PheromoneError):
    """Invalid application, bucket, or trigger configuration."""


class UnknownAppError(SpecError):
    """Lookup of an app that was never registered."""


class StoreError(PheromoneError):
    """Object store contract violation (duplicate create, double send, ...)."""


class TriggerError(PheromoneError):
    """Trigger state machine used outside its contract."""


class ProtocolError(PheromoneError):
    """Malformed or unexpected wire traffic."""


class RemoteError(PheromoneError):
    """Failure reported by a remote coordinator."""


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash; used for shard ownership, shuffle partitioning and payload checksums."""
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


class TriggerKind(Enum):
    IMMEDIATE = 1
    BY_BATCH_SIZE = 2
    BY_TIME = 3
    BY_NAME = 4
    BY_SET = 5
    REDUNDANT = 6
    DYNAMIC_JOIN = 7
    DYNAMIC_GROUP = 8


class TriggerScope(Enum):
    LOCAL = 1
    GLOBAL = 2


class ReExecMode(Enum):
    EVERY_OBJ = 1
    PER_SESSION = 2


class RequestOrigin(Enum):
    CLIENT = 1
    TRIGGER = 2
    RE_EXEC = 3


class DepType(Enum):
    DIRECT = 1
    PERIODIC = 2


# Trigger kinds that fire at most once per session.
ONE_SHOT_KINDS = frozenset(
    {TriggerKind.BY_SET, TriggerKind.REDUNDANT, TriggerKind.DYNAMIC_JOIN, TriggerKind.DYNAMIC_GROUP}
)

# Kinds whose trigger condition can be evaluated on the producing node alone.
_LOCAL_BY_DEFAULT = frozenset({TriggerKind.IMMEDIATE, TriggerKind.BY_NAME})


@dataclass(frozen=True)
class ObjectRef:
    """Platform-wide identity of one intermediate object: (bucket, key, session)."""

    bucket: str
    key: str
    session: str

    def __post_init__(self) -> None:
        if not self.bucket or not self.key:
            raise SpecError("object ref needs a non-empty bucket and key")
        if "\n" in self.key or "\x00" in self.key:
            raise SpecError(f"object key may not contain newline or NUL: {self.key!r}")


class DataObject:
    """A named, session-scoped intermediate payload. Immutable once sent."""

    __slots__ = ("ref", "payload", "ready", "persist", "producer", "created_at")

    def __init__(self, ref: ObjectRef, producer: str, created_at: int, size_hint: int = 0) -> None:
        self.ref = ref
        self.payload: bytes = b""
        self.ready = False
        self.persist = False
        self.producer = producer
        self.created_at = created_at

    @property
    def size(self) -> int:
        return len(self.payload)

    def set_value(self, value: bytes) -> None:
        if self.ready:
            raise StoreError(f"object {self.ref} is already sent and immutable")
        self.payload = bytes(value) if not isinstance(value, bytes) else value

    def get_value(self) -> bytes:
        return self.payload


@dataclass(frozen=True)
class ReExecRule:
    """Re-execute `source_function` if its output misses `timeout_ms` after it starts."""

    source_function: str
    mode: ReExecMode
    timeout_ms: int

    def __post_init__(self) -> None:
        if self.timeout_ms <= 0:
            raise SpecError("re-execution timeout must be > 0 ms")
        if not self.source_function:
            raise SpecError("re-execution rule needs a source function")


# Exact metadata keys understood by trigger specs.
META_KEYS = ("function", "count", "time_window", "key", "key_set", "k", "n", "num_sources", "scope", "fire_on_empty")


@dataclass
class TriggerSpec:
    name: str
    app: str
    bucket: str
    kind: TriggerKind
    target_function: str
    metadata: dict[str, str] = field(default_factory=dict)
    scope: TriggerScope = TriggerScope.GLOBAL
    re_exec: list[ReExecRule] = field(default_factory=list)

    # -- metadata accessors -------------------------------------------------

    def count(self) -> int:
        return int(self.metadata["count"])

    def time_window(self) -> int:
        return int(self.metadata["time_window"])

    def key(self) -> str:
        return self.metadata["key"]

    def key_set(self) -> list[str]:
        return [k for k in self.metadata["key_set"].split(",") if k]

    def k_of_n(self) -> tuple[int, int]:
        keys = self.key_set()
        return int(self.metadata["k"]), int(self.metadata.get("n", len(keys)))

    def num_sources(self) -> Optional[int]:
        raw = self.metadata.get("num_sources")
        return int(raw) if raw is not None else None

    def fire_on_empty(self) -> bool:
        return self.metadata.get("fire_on_empty", "false").lower() == "true"


def make_trigger_spec(
    name: str,
    app: str,
    bucket: str,
    kind: TriggerKind,
    metadata: dict[str, str],
    re_exec: Sequence[ReExecRule] = (),
) -> TriggerSpec:
    """Build and validate a trigger spec; scope defaults by kind unless overridden."""
    target = metadata.get("function", "")
    scope_raw = metadata.get("scope")
    if scope_raw is not None:
        try:
            scope = TriggerScope[scope_raw.upper()]
        except KeyError:
            raise SpecError(f"unknown trigger scope {scope_raw!r}") from None
    else:
        scope = TriggerScope.LOCAL if kind in _LOCAL_BY_DEFAULT else TriggerScope.GLOBAL
    spec = TriggerSpec(
        name=name, app=app, bucket=bucket, kind=kind, target_function=target,
        metadata=dict(metadata), scope=scope, re_exec=list(re_exec),
    )
    validate_trigger_spec(spec)
    return spec


def validate_trigger_spec(spec: TriggerSpec) -> None:
    if not spec.name or not spec.bucket:
        raise SpecError("trigger needs a name and a bucket")
    if not spec.target_function:
        raise SpecError(f"trigger {spec.name!r} needs metadata 'function'")
    kind, meta = spec.kind, spec.metadata
    if kind is TriggerKind.BY_BATCH_SIZE:
        if int(meta.get("count", 0)) < 1:
            raise SpecError(f"trigger {spec.name!r}: BY_BATCH_SIZE needs metadata 'count' >= 1")
    elif kind is TriggerKind.BY_TIME:
        if int(meta.get("time_window", 0)) < 1:
            raise SpecError(f"trigger {spec.name!r}: BY_TIME needs metadata 'time_window' >= 1 ms")
    elif kind is TriggerKind.BY_NAME:
        if not meta.get("key"):
            raise SpecError(f"trigger {spec.name!r}: BY_NAME needs metadata 'key'")
    elif kind is TriggerKind.BY_SET:
        if not meta.get("key_set") or not spec.key_set():
            raise SpecError(f"trigger {spec.name!r}: BY_SET needs a non-empty 'key_set'")
    elif kind is TriggerKind.REDUNDANT:
        keys = spec.key_set() if meta.get("key_set") else []
        if not keys:
            raise SpecError(f"trigger {spec.name!r}: REDUNDANT needs a non-empty 'key_set'")
        k = int(meta.get("k", 0))
        n = int(meta.get("n", len(keys)))
        if n != len(keys):
            raise SpecError(f"trigger {spec.name!r}: 'n' ({n}) disagrees with key_set size {len(keys)}")
        if not 1 <= k <= n:
            raise SpecError(f"trigger {spec.name!r}: REDUNDANT needs 1 <= k <= n, got k={k} n={n}")


@dataclass(frozen=True)
class FunctionSpec:
    name: str
    handler_id: str


@dataclass
class AppSpec:
    name: str
    functions: list[FunctionSpec] = field(default_factory=list)
    buckets: list[str] = field(default_factory=list)
    triggers: list[TriggerSpec] = field(default_factory=list)
    entry_functions: list[str] = field(default_factory=list)
    # source function -> bucket compiled from dependencies; "" marks an
    # ambiguous source (more than one outgoing dependency).
    dependency_buckets: dict[str, str] = field(default_factory=dict)

    def function_names(self) -> set[str]:
        return {f.name for f in self.functions}

    def triggers_on(self, bucket: str) -> list[TriggerSpec]:
        return [t for t in self.triggers if t.bucket == bucket]

    def handler_for(self, function: str) -> str:
        for f in self.functions:
            if f.name == function:
                return f.handler_id
        raise SpecError(f"app {self.name!r} has no function {function!r}")


def validate_app_spec(spec: AppSpec) -> None:
    if not spec.name:
        raise SpecError("app needs a name")
    names = [f.name for f in spec.functions]
    if len(set(names)) != len(names):
        raise SpecError(f"app {spec.name!r}: duplicate function names")
    if len(set(spec.buckets)) != len(spec.buckets):
        raise SpecError(f"app {spec.name!r}: duplicate bucket names")
    per_bucket: dict[str, set[str]] = {}
    for t in spec.triggers:
        if t.bucket not in spec.buckets:
            raise SpecError(f"trigger {t.name!r} references unknown bucket {t.bucket!r}")
        if t.target_function not in names:
            raise SpecError(f"trigger {t.name!r} targets unknown function {t.target_function!r}")
        seen = per_bucket.setdefault(t.bucket, set())
        if t.name in seen:
            raise SpecError(f"duplicate trigger name {t.name!r} on bucket {t.bucket!r}")
        seen.add(t.name)
        validate_trigger_spec(t)
    for e in spec.entry_functions:
        if e not in names:
            raise SpecError(f"entry function {e!r} is not part of app {spec.name!r}")


@dataclass
class TriggerAction:
    """Instruction to invoke one target function with specific inputs in a session."""

    session: str
    target_function: str
    inputs: list[ObjectRef]
    reason: TriggerKind
    group_id: Optional[str] = None
    # Re-execution actions carry the source's original arguments instead of inputs.
    rerun_args: Optional[list["Arg"]] = None


@dataclass(frozen=True)
class InlineArg:
    """Argument payload carried inside the invocation message (piggybacked)."""

    payload: bytes


@dataclass(frozen=True)
class RefArg:
    """Argument naming an object; `locator` is the holder's address ("" = resolve locally)."""

    ref: ObjectRef
    locator: str = ""


Arg = Union[InlineArg, RefArg]


@dataclass
class FunctionRequest:
    """A routable invocation of one function."""

    session: str
    function: str
    args: list[Arg]
    origin: RequestOrigin
    app: str = ""
    request_id: str = ""
    group_id: Optional[str] = None
    forwarded: bool = False


@dataclass
class NodeStatus:
    """Per-node load snapshot used for locality-aware routing."""

    node_id: str
    addr: str = ""
    idle_executors: int = 0
    total_executors: int = 0
    loaded_functions: frozenset[str] = frozenset()
    session_objects: dict[str, int] = field(default_factory=dict)
    queue_depth: int = 0
    bytes_live: int = 0


class Registry:
    """Thread-safe application registry. Reads are cheap; mutations re-validate."""

    def __init__(self) -> None:
        self._apps: dict[str, AppSpec] = {}
        self._lock = threading.RLock()

    def register(self, spec: AppSpec) -> None:
        validate_app_spec(spec)
        with self._lock:
            existing = self._apps.get(spec.name)
            if existing is not None:
                if existing == spec:
                    return  # idempotent re-registration
                raise SpecError(f"app {spec.name!r} already registered with a different spec")
            self._apps[spec.name] = spec

    def get(self, name: str) -> AppSpec:
        with self._lock:
            try:
                return self._apps[name]
            except KeyError:
                raise UnknownAppError(f"unknown app {name!r}") from None

    def contains(self, name: str) -> bool:
        with self._lock:
            return name in self._apps

    def names(self) -> list[str]:
        with self._lock:
            return sorted(self._apps)

    def add_bucket(self, app: str, bucket: str) -> None:
        with self._lock:
            spec = self.get(app)
            if bucket in spec.buckets:
                return
            spec.buckets.append(bucket)

    def add_trigger(self, app: str, trigger: TriggerSpec) -> None:
        with self._lock:
            spec = self.get(app)
            if trigger.bucket not in spec.buckets:
                raise SpecError(f"bucket {trigger.bucket!r} not created for app {app!r}")
            if trigger.target_function not in spec.function_names():
                raise SpecError(f"trigger targets unknown function {trigger.target_function!r}")
            for t in spec.triggers_on(trigger.bucket):
                if t.name == trigger.name:
                    if t == trigger:
                        return
                    raise SpecError(f"trigger {trigger.name!r} already exists on {trigger.bucket!r}")
            validate_trigger_spec(trigger)
            spec.triggers.append(trigger)


def new_session(registry: Registry, app: str, rng: random.Random) -> str:
    """Mint a session id "<app>/<128-bit hex>" for a registered app."""
    if not registry.contains(app):
        raise UnknownAppError(f"unknown app {app!r}")
    return f"{app}/{rng.getrandbits(128):032x}"


def session_app(session: str) -> str:
    return session.split("/", 1)[0]


# -- canonical structured-text file form --------------------------------------
#
# Line-oriented `section.key = value`, the same shape as the cluster config.
# Function, bucket, entry and trigger names may not contain '=' or newlines;
# trigger names additionally may not contain '.'.


def app_spec_to_text(spec: AppSpec) -> str:
    lines = [f"app.name = {spec.name}"]
    for f in spec.functions:
        lines.append(f"function.{f.name} = {f.handler_id}")
    for i, b in enumerate(spec.buckets):
        lines.append(f"bucket.{i} = {b}")
    for i, e in enumerate(spec.entry_functions):
        lines.append(f"entry.{i} = {e}")
    for t in spec.triggers:
        if "." in t.name:
            raise SpecError(f"trigger name {t.name!r} not representable in text form")
        base = f"trigger.{t.name}"
        lines.append(f"{base}.bucket = {t.bucket}")
        lines.append(f"{base}.kind = {t.kind.name}")
        lines.append(f"{base}.scope = {t.scope.name}")
        for k in sorted(t.metadata):
            lines.append(f"{base}.meta.{k} = {t.metadata[k]}")
        for i, rule in enumerate(t.re_exec):
            lines.append(f"{base}.re_exec.{i} = {rule.source_function} "
                         f"{rule.mode.name} {rule.timeout_ms}")
    for source in sorted(spec.dependency_buckets):
        lines.append(f"dependency.{source} = {spec.dependency_buckets[source]}")
    return "\n".join(lines) + "\n"


def app_spec_from_text(text: str) -> AppSpec:
    name = ""
    functions: list[FunctionSpec] = []
    buckets: dict[int, str] = {}
    entries: dict[int, str] = {}
    triggers: dict[str, dict] = {}
    dep_buckets: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        dotted, eq, value = line.partition("=")
        if not eq:
            raise SpecError(f"app file line {lineno}: expected 'section.key = value'")
        dotted, value = dotted.strip(), value.strip()
        section, _, key = dotted.partition(".")
        if section == "app" and key == "name":
            name = value
        elif section == "function":
            functions.append(FunctionSpec(key, value))
        elif section == "bucket":
            buckets[int(key)] = value
        elif section == "entry":
            entries[int(key)] = value
        elif section == "trigger":
            t_name, _, field_path = key.partition(".")
            t = triggers.setdefault(t_name, {"meta": {}, "re_exec": [], "scope": None})
            if field_path == "bucket":
                t["bucket"] = value
            elif field_path == "kind":
                t["kind"] = TriggerKind[value]
            elif field_path == "scope":
                t["scope"] = TriggerScope[value]
            elif field_path.startswith("meta."):
                t["meta"][field_path[len("meta."):]] = value
            elif field_path.startswith("re_exec."):
                source, mode, timeout = value.split()
                t["re_exec"].append(ReExecRule(source, ReExecMode[mode], int(timeout)))
            else:
                raise SpecError(f"app file line {lineno}: unknown trigger field {field_path!r}")
        elif section == "dependency":
            dep_buckets[key] = value
        else:
            raise SpecError(f"app file line {lineno}: unknown section {section!r}")
    built = []
    for t_name, t in triggers.items():
        trig = TriggerSpec(t_name, name, t["bucket"], t["kind"],
                           t["meta"].get("function", ""), t["meta"],
                           t["scope"] or TriggerScope.GLOBAL, t["re_exec"])
        validate_trigger_spec(trig)
        built.append(trig)
    spec = AppSpec(
        name=name,
        functions=functions,
        buckets=[buckets[i] for i in sorted(buckets)],
        triggers=built,
        entry_functions=[entries[i] for i in sorted(entries)],
        dependency_buckets=dep_buckets,
    )
    validate_app_spec(spec)
    return spec


Dependency = tuple  # (sources, targets, DepType) or (sources, targets, DepType, meta)


def compile_dependencies(app: str, functions: Sequence[str], deps: Sequence[Dependency]) -> AppSpec:
    """Translate function-to-function dependencies into buckets plus triggers.

    DIRECT becomes an IMMEDIATE trigger, PERIODIC a BY_TIME trigger whose window
    is the dependency's metadata (ms). Each dependency gets a fresh bucket that
    bucket-less create_object() calls by its sources resolve to; a source with
    more than one outgoing dependency is flagged ambiguous at compile time.
    """
    fnames = list(functions)
    if len(set(fnames)) != len(fnames):
        raise SpecError("duplicate function names")
    spec = AppSpec(
        name=app,
        functions=[FunctionSpec(f, f) for f in fnames],
        entry_functions=list(fnames),
    )
    known = set(fnames)
    for i, dep in enumerate(deps):
        if len(dep) == 3:
            sources, targets, dep_type = dep
            meta_val: Optional[int] = None
        elif len(dep) == 4:
            sources, targets, dep_type, meta_val = dep
        else:
            raise SpecError(f"dependency #{i} must be (sources, targets, type[, meta])")
        for f in list(sources) + list(targets):
            if f not in known:
                raise SpecError(f"dependency #{i} references unknown function {f!r}")
        bucket = f"dep{i}_bck"
        spec.buckets.append(bucket)
        for target in targets:
            if dep_type is DepType.DIRECT:
                meta = {"function": target}
                kind = TriggerKind.IMMEDIATE
            elif dep_type is DepType.PERIODIC:
                if meta_val is None or int(meta_val) < 1:
                    raise SpecError(f"dependency #{i}: PERIODIC needs a time window in ms")
                meta = {"function": target, "time_window": str(int(meta_val))}
                kind = TriggerKind.BY_TIME
            else:
                raise SpecError(f"dependency #{i}: unknown type {dep_type!r}")
            spec.triggers.append(make_trigger_spec(f"dep{i}_to_{target}", app, bucket, kind, meta))
        for source in sources:
            if source in spec.dependency_buckets:
                spec.dependency_buckets[source] = ""  # ambiguous outgoing bucket
            else:
                spec.dependency_buckets[source] = bucket
    validate_app_spec(spec)
    return spec
