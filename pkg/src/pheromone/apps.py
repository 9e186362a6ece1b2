"""Reference applications: ad-event stream, MapReduce WordCount/sort, bench apps.

Apps are pure handler definitions plus AppSpecs; all concurrency comes from
the platform. Handlers are registered under stable ids so any worker can run
any demo app.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass
from enum import Enum

from .core import (
    AppSpec,
    FunctionSpec,
    ReExecMode,
    ReExecRule,
    TriggerKind,
    make_trigger_spec,
)
from .executor import HandlerRegistry, UserLibrary, decode_records, encode_records, mapreduce_wrap


class AdEventType(Enum):
    VIEW = 1
    CLICK = 2
    PURCHASE = 3


@dataclass(frozen=True)
class AdEvent:
    event_id: str
    campaign_id: str
    event_type: AdEventType
    ts: int

    def __post_init__(self) -> None:
        if not self.campaign_id:
            raise ValueError("ad event needs a campaign id")


def encode_events(events: list[AdEvent]) -> bytes:
    """One length-prefixed record per event (strings u16-prefixed)."""
    parts = [struct.pack(">I", len(events))]
    for e in events:
        eid = e.event_id.encode()
        cid = e.campaign_id.encode()
        parts.append(struct.pack(">H", len(eid)))
        parts.append(eid)
        parts.append(struct.pack(">H", len(cid)))
        parts.append(cid)
        parts.append(struct.pack(">BQ", e.event_type.value, e.ts))
    return b"".join(parts)


def decode_events(payload: bytes) -> list[AdEvent]:
    view = memoryview(payload)
    (count,) = struct.unpack_from(">I", view, 0)
    pos = 4
    events = []
    for _ in range(count):
        (elen,) = struct.unpack_from(">H", view, pos)
        pos += 2
        eid = bytes(view[pos : pos + elen]).decode()
        pos += elen
        (clen,) = struct.unpack_from(">H", view, pos)
        pos += 2
        cid = bytes(view[pos : pos + clen]).decode()
        pos += clen
        etype, ts = struct.unpack_from(">BQ", view, pos)
        pos += 9
        events.append(AdEvent(eid, cid, AdEventType(etype), ts))
    return events


# -- advertisement event stream ------------------------------------------------------


def _preprocess(lib: UserLibrary, args: list[bytes]) -> int:
    """Filter non-click events; forward surviving batches."""
    for payload in args:
        clicks = [e for e in decode_events(payload) if e.event_type is AdEventType.CLICK]
        if not clicks:
            continue
        obj = lib.create_object("immed_bck", lib.gen_unique_key())
        obj.set_value(encode_events(clicks))
        lib.send_object(obj)
    return 0


def _query_event_info(lib: UserLibrary, args: list[bytes]) -> int:
    """Map each event to its campaign; one record batch per input object."""
    records = []
    for payload in args:
        for event in decode_events(payload):
            records.append((event.campaign_id.encode(), event.event_id.encode()))
    if records:
        obj = lib.create_object("by_time_bck", lib.gen_unique_key())
        obj.set_value(encode_records(records))
        lib.send_object(obj)
    return 0


def _aggregate(lib: UserLibrary, args: list[bytes]) -> int:
    """Count events per campaign over one window; persist the counts."""
    counts: dict[bytes, int] = {}
    for payload in args:
        for campaign, _event in decode_records(payload):
            counts[campaign] = counts.get(campaign, 0) + 1
    obj = lib.create_object("results", f"window-{lib.gen_unique_key()}")
    obj.set_value(encode_records([(c, str(n).encode()) for c, n in sorted(counts.items())]))
    lib.send_object(obj, output=True)
    return 0


STREAM_APP = "ad-event-stream"


def stream_app(time_window_ms: int = 1000, re_exec_timeout_ms: int = 100) -> AppSpec:
    functions = [FunctionSpec(f, f) for f in ("preprocess", "query_event_info", "aggregate")]
    t1 = make_trigger_spec("immediate_trigger", STREAM_APP, "immed_bck",
                           TriggerKind.IMMEDIATE, {"function": "query_event_info"})
    t2 = make_trigger_spec("by_time_trigger", STREAM_APP, "by_time_bck",
                           TriggerKind.BY_TIME,
                           {"function": "aggregate", "time_window": str(time_window_ms)},
                           [ReExecRule("query_event_info", ReExecMode.EVERY_OBJ, re_exec_timeout_ms)])
    return AppSpec(STREAM_APP, functions, ["immed_bck", "by_time_bck", "results"],
                   [t1, t2], ["preprocess"])


# -- MapReduce apps ----------------------------------------------------------------------
#
# The driver passes the reducer count as the first argument of every map
# invocation so one registered handler serves any fan-out.


def _wc_mapper(split: bytes, emit) -> None:
    for word in split.split():
        emit(word, b"1")


def _wc_reducer(key: bytes, values: list[bytes], emit) -> None:
    emit(key, str(sum(int(v) for v in values)).encode())


def _wc_map_handler(lib: UserLibrary, args: list[bytes]) -> int:
    partitions = int(args[0])
    map_h, _ = mapreduce_wrap(_wc_mapper, _wc_reducer, "shuffle", "results", partitions)
    return map_h(lib, args[1:])


def _wc_reduce_handler(lib: UserLibrary, args: list[bytes]) -> int:
    _, reduce_h = mapreduce_wrap(_wc_mapper, _wc_reducer, "shuffle", "results", 1)
    return reduce_h(lib, args)


SORT_RECORD = 100


def _sort_mapper(split: bytes, emit) -> None:
    for i in range(0, len(split), SORT_RECORD):
        emit(split[i : i + SORT_RECORD], b"")


def _sort_reducer(key: bytes, values: list[bytes], emit) -> None:
    for _ in values:
        emit(key, b"")


def range_partitioner(key: bytes, partitions: int) -> int:
    """Fixed-width key-prefix ranges so group order equals global sort order."""
    return min(key[0] * partitions // 256, partitions - 1) if key else 0


def _sort_map_handler(lib: UserLibrary, args: list[bytes]) -> int:
    partitions = int(args[0])
    map_h, _ = mapreduce_wrap(_sort_mapper, _sort_reducer, "shuffle", "results", partitions,
                              partitioner=range_partitioner, group_label=lambda p: f"{p:04d}")
    return map_h(lib, args[1:])


def _sort_reduce_handler(lib: UserLibrary, args: list[bytes]) -> int:
    _, reduce_h = mapreduce_wrap(_sort_mapper, _sort_reducer, "shuffle", "results", 1)
    return reduce_h(lib, args)


def _mapreduce_app(name: str, map_fn: str, reduce_fn: str, reducers: int) -> AppSpec:
    functions = [FunctionSpec(map_fn, map_fn), FunctionSpec(reduce_fn, reduce_fn)]
    shuffle = make_trigger_spec("shuffle_trigger", name, "shuffle", TriggerKind.DYNAMIC_GROUP,
                                {"function": reduce_fn})
    return AppSpec(name, functions, ["shuffle", "results"], [shuffle], [map_fn])


WORDCOUNT_APP = "wordcount"
SORT_APP = "mr-sort"


def wordcount_app(reducers: int) -> AppSpec:
    assert reducers >= 1
    return _mapreduce_app(WORDCOUNT_APP, "wc_map", "wc_reduce", reducers)


def sort_app(reducers: int) -> AppSpec:
    assert reducers >= 1
    return _mapreduce_app(SORT_APP, "sort_map", "sort_reduce", reducers)


# -- bench apps ------------------------------------------------------------------------------


def _hop(lib: UserLibrary, args: list[bytes]) -> int:
    """No-op chain hop: increment the counter and pass it on."""
    value, _, target = args[0].partition(b":")
    v = int(value) + 1
    if v < int(target):
        obj = lib.create_object("chain", f"h{v}")
        obj.set_value(b"%d:%s" % (v, target))
        lib.send_object(obj)
    else:
        obj = lib.create_object("chain_out", "final")
        obj.set_value(b"%d" % v)
        lib.send_object(obj, output=True)
    return 0


CHAIN_APP = "chain"


def chain_app() -> AppSpec:
    functions = [FunctionSpec("hop", "hop")]
    t = make_trigger_spec("next_hop", CHAIN_APP, "chain", TriggerKind.IMMEDIATE,
                          {"function": "hop"})
    return AppSpec(CHAIN_APP, functions, ["chain", "chain_out"], [t], ["hop"])


def _sleep_step(lib: UserLibrary, args: list[bytes]) -> int:
    step = int(lib.function.removeprefix("step"))
    time.sleep(0.1)
    if step < 4:
        obj = lib.create_object(function=f"step{step + 1}")
        obj.set_value(b"x")
        lib.send_object(obj)
    else:
        obj = lib.create_object("fault_out", "final")
        obj.set_value(b"done")
        lib.send_object(obj, output=True)
    return 0


def fault_app_name(mode: str) -> str:
    return f"fault-{mode}"


def fault_chain_app(mode: str = "none", function_timeout_ms: int = 200,
                    workflow_timeout_ms: int = 800) -> AppSpec:
    """Four chained 100 ms sleep functions with optional re-execution rules.

    mode "function": each step is re-executed if its output misses its bucket
    within function_timeout_ms. mode "workflow": the chain restarts from step1
    if the final output misses within workflow_timeout_ms.
    """
    assert mode in ("none", "function", "workflow")
    name = fault_app_name(mode)
    # each mode runs under its own handler alias: crash injection is keyed by
    # handler id, so the baseline stays crash-free and the two recovery modes
    # draw from independent failure streams
    handler = {"none": "sleep_step_safe", "function": "sleep_step",
               "workflow": "sleep_step_w"}[mode]
    functions = [FunctionSpec(f"step{i}", handler) for i in range(1, 5)]
    triggers = []
    for i in range(1, 4):
        rules = []
        if mode == "function":
            rules = [ReExecRule(f"step{i}", ReExecMode.EVERY_OBJ, function_timeout_ms)]
        triggers.append(make_trigger_spec(f"fwd{i}", name, f"fb{i}", TriggerKind.IMMEDIATE,
                                          {"function": f"step{i + 1}"}, rules))
    if mode == "function":
        guard_rules = [ReExecRule("step4", ReExecMode.EVERY_OBJ, function_timeout_ms)]
        guard_meta = {"function": "step1", "key": "__guard__"}
    elif mode == "workflow":
        guard_rules = [ReExecRule("step1", ReExecMode.PER_SESSION, workflow_timeout_ms)]
        guard_meta = {"function": "step1", "key": "__guard__", "scope": "GLOBAL"}
    else:
        guard_rules = []
        guard_meta = {"function": "step1", "key": "__guard__"}
    guard = make_trigger_spec("guard", name, "fault_out", TriggerKind.BY_NAME,
                              guard_meta, guard_rules)
    return AppSpec(name, functions, [f"fb{i}" for i in range(1, 4)] + ["fault_out"],
                   triggers + [guard], ["step1"])


def _replica(lib: UserLibrary, args: list[bytes]) -> int:
    """ML-serving stand-in: sleep the requested time, then vote."""
    name, _, delay_ms = args[0].partition(b":")
    time.sleep(int(delay_ms) / 1000)
    obj = lib.create_object("votes", name.decode())
    obj.set_value(b"vote from " + name)
    lib.send_object(obj)
    return 0


def _combine(lib: UserLibrary, args: list[bytes]) -> int:
    obj = lib.create_object("combined", "result")
    obj.set_value(b"|".join(args))
    lib.send_object(obj, output=True)
    return 0


REDUNDANT_APP = "k-of-n"
REDUNDANT_BASELINE_APP = "all-of-n"


def redundant_app(n: int = 3, k: int = 2, late_binding: bool = True) -> AppSpec:
    """n replicas vote; the combiner runs on the first k (or all, as baseline)."""
    name = REDUNDANT_APP if late_binding else REDUNDANT_BASELINE_APP
    functions = [FunctionSpec("replica", "replica"), FunctionSpec("combine", "combine")]
    keys = ",".join(f"r{i}" for i in range(n))
    if late_binding:
        t = make_trigger_spec("first_k", name, "votes", TriggerKind.REDUNDANT,
                              {"function": "combine", "key_set": keys, "k": str(k)})
    else:
        t = make_trigger_spec("all_n", name, "votes", TriggerKind.BY_SET,
                              {"function": "combine", "key_set": keys})
    return AppSpec(name, functions, ["votes", "combined"], [t], ["replica"])


def _burst(lib: UserLibrary, args: list[bytes]) -> int:
    count, _, size = args[0].partition(b":")
    for i in range(int(count)):
        obj = lib.create_object("junk", f"blob{i}")
        obj.set_value(bytes(int(size)))
        lib.send_object(obj)
    return 0


def _sink(lib: UserLibrary, args: list[bytes]) -> int:
    return 0


BURST_APP = "burst"


def burst_app() -> AppSpec:
    """Producer fans out fixed-size blobs; a no-op consumer drains them."""
    functions = [FunctionSpec("burst", "burst"), FunctionSpec("sink", "sink")]
    t = make_trigger_spec("drain", BURST_APP, "junk", TriggerKind.IMMEDIATE,
                          {"function": "sink"})
    return AppSpec(BURST_APP, functions, ["junk"], [t], ["burst"])


def _sleeper(lib: UserLibrary, args: list[bytes]) -> int:
    time.sleep(int(args[0]) / 1000 if args else 0.1)
    obj = lib.create_object("done", lib.gen_unique_key())
    obj.set_value(b"slept")
    lib.send_object(obj, output=True)
    return 0


PARALLEL_APP = "parallel"


def parallel_app() -> AppSpec:
    return AppSpec(PARALLEL_APP, [FunctionSpec("sleeper", "sleeper")], ["done"], [],
                   ["sleeper"])


def register_demo_handlers(registry: HandlerRegistry) -> None:
    """Install every demo handler; worker daemons call this at startup."""
    registry.register("preprocess", _preprocess)
    registry.register("query_event_info", _query_event_info)
    registry.register("aggregate", _aggregate)
    registry.register("wc_map", _wc_map_handler)
    registry.register("wc_reduce", _wc_reduce_handler)
    registry.register("sort_map", _sort_map_handler)
    registry.register("sort_reduce", _sort_reduce_handler)
    registry.register("hop", _hop)
    registry.register("sleep_step", _sleep_step)
    registry.register("sleep_step_safe", _sleep_step)
    registry.register("sleep_step_w", _sleep_step)
    registry.register("replica", _replica)
    registry.register("combine", _combine)
    registry.register("burst", _burst)
    registry.register("sink", _sink)
    registry.register("sleeper", _sleeper)
