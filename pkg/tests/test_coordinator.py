"""Coordinator shard: client ops, delta handling, routing, ticks, completion."""

from __future__ import annotations

import random

import pytest

from pheromone.core import (
    AppSpec,
    FunctionRequest,
    FunctionSpec,
    NodeStatus,
    ObjectRef,
    ProtocolError,
    RequestOrigin,
    SpecError,
    TriggerKind,
    make_trigger_spec,
    fnv1a64,
)
from pheromone.coordinator import CoordinatorShard, shard_of
from pheromone.store import MemoryDurableStore
from pheromone.transport import (
    CallApp,
    Completion,
    Invoke,
    ListTriggers,
    Reclaim,
    RegisterApp,
    Reset,
    StatusDelta,
)


class FakeLink:
    def __init__(self):
        self.sent = []

    def send(self, msg):
        self.sent.append(msg)

    def of_type(self, cls):
        return [m for m in self.sent if isinstance(m, cls)]


class FakeClock:
    def __init__(self):
        self.now = 0

    def __call__(self):
        return self.now

    def advance(self, ms):
        self.now += ms


def fanin_app(kind=TriggerKind.BY_SET, meta=None):
    base = {"function": "combine", "key_set": "a,b"}
    base.update(meta or {})
    t = make_trigger_spec("t_fanin", "fanin", "votes", kind, base)
    return AppSpec("fanin", [FunctionSpec("writer", "writer"), FunctionSpec("combine", "combine")],
                   ["votes"], [t], ["writer"])


def make_shard(shards=1, shard_id=0):
    shard = CoordinatorShard(shard_id, shards, MemoryDurableStore(),
                             clock=FakeClock(), rng=random.Random(1))
    return shard


def add_node(shard, node_id, idle=4, loaded=(), session_objects=None, queue_depth=0):
    link = FakeLink()
    shard.on_node_status(NodeStatus(node_id, f"addr-{node_id}", idle, 4,
                                    frozenset(loaded), session_objects or {}, queue_depth), link)
    return link


def start_session(shard, app="fanin", invocations=(("writer", [b"x"]),)):
    return shard.call_app(CallApp(app, [(f, list(a)) for f, a in invocations]))


def test_register_and_add_trigger_validation():
    shard = make_shard()
    shard.register_app(RegisterApp(fanin_app()))
    with pytest.raises(SpecError):
        shard.add_trigger(make_trigger_spec("bad", "fanin", "nowhere", TriggerKind.IMMEDIATE,
                                            {"function": "combine"}))
    with pytest.raises(SpecError):
        # missing required metadata is rejected before it ever reaches a bucket
        shard.add_trigger(make_trigger_spec("b2", "fanin", "votes", TriggerKind.BY_BATCH_SIZE,
                                            {"function": "combine"}))
    ok = make_trigger_spec("with_hints", "fanin", "votes", TriggerKind.BY_TIME,
                           {"function": "combine", "time_window": "1000"})
    shard.add_trigger(ok)
    listed = shard.list_triggers("fanin")
    assert [t.name for t in listed.triggers] == ["t_fanin", "with_hints"]


def test_call_app_errors():
    shard = make_shard()
    shard.register_app(RegisterApp(fanin_app()))
    add_node(shard, "n1")
    with pytest.raises(SpecError):
        shard.call_app(CallApp("fanin", []))
    with pytest.raises(SpecError):
        shard.call_app(CallApp("fanin", [("ghost", [])]))
    session = start_session(shard)
    assert session.startswith("fanin/")
    assert shard.sessions[session].routed == 1


def test_call_app_presets_group_fanout():
    shard = make_shard()
    t = make_trigger_spec("shuffle", "mr", "sh", TriggerKind.DYNAMIC_GROUP, {"function": "red"})
    spec = AppSpec("mr", [FunctionSpec("map", "map"), FunctionSpec("red", "red")],
                   ["sh"], [t], ["map"])
    shard.register_app(RegisterApp(spec))
    add_node(shard, "n1", idle=8)
    session = shard.call_app(CallApp("mr", [("map", [b""])] * 4))
    state = shard.global_states[("mr", "sh", "shuffle")]
    assert state.sessions[session].expected_source_count == 4
    assert state.sessions[session].expected_preset is True


def test_by_set_across_nodes_fires_once_with_resets():
    shard = make_shard()
    shard.register_app(RegisterApp(fanin_app()))
    link1 = add_node(shard, "n1", idle=2, loaded=("combine",))
    link2 = add_node(shard, "n2", idle=2)
    session = start_session(shard)
    ra = ObjectRef("votes", "a", session)
    rb = ObjectRef("votes", "b", session)
    shard.on_status_delta(StatusDelta("n1", session, ready=[(ra, "writer")]))
    assert not [m for l in (link1, link2) for m in l.of_type(Invoke) if m.request.function == "combine"]
    shard.on_status_delta(StatusDelta("n2", session, ready=[(rb, "writer")]))
    combines = [m for l in (link1, link2) for m in l.of_type(Invoke)
                if m.request.function == "combine"]
    assert len(combines) == 1
    req = combines[0].request
    assert [a.ref for a in req.args] == [ra, rb]
    assert [a.locator for a in req.args] == ["addr-n1", "addr-n2"]
    # a reset listing its consumed ref reached each holder
    assert link1.of_type(Reset)[0].refs == [ra]
    assert link2.of_type(Reset)[0].refs == [rb]
    # replayed deltas never fire twice
    shard.on_status_delta(StatusDelta("n1", session, ready=[(ra, "writer")]))
    shard.on_status_delta(StatusDelta("n2", session, ready=[(rb, "writer")]))
    combines = [m for l in (link1, link2) for m in l.of_type(Invoke)
                if m.request.function == "combine"]
    assert len(combines) == 1


def test_delta_for_unknown_session_is_protocol_error():
    shard = make_shard()
    with pytest.raises(ProtocolError):
        shard.on_status_delta(StatusDelta("n1", "ghost/0", ready=[]))


def test_route_request_lexicographic_rule():
    shard = make_shard()
    shard.register_app(RegisterApp(fanin_app()))
    add_node(shard, "n1", idle=2, loaded=("f",), session_objects={"fanin/s": 5})
    add_node(shard, "n2", idle=4)
    req = FunctionRequest("fanin/s", "f", [], RequestOrigin.TRIGGER, app="fanin")
    assert shard.route_request(req) == "n1"  # most relevant objects wins


def test_route_request_tie_breaks_by_node_id():
    shard = make_shard()
    add_node(shard, "n2", idle=3)
    add_node(shard, "n1", idle=3)
    req = FunctionRequest("fanin/s", "f", [], RequestOrigin.TRIGGER, app="fanin")
    assert shard.route_request(req) == "n1"


def test_route_request_all_busy_least_queue():
    shard = make_shard()
    add_node(shard, "n1", idle=0, queue_depth=5)
    add_node(shard, "n2", idle=0, queue_depth=2)
    req = FunctionRequest("fanin/s", "f", [], RequestOrigin.TRIGGER, app="fanin")
    assert shard.route_request(req) == "n2"


def test_route_request_no_nodes():
    shard = make_shard()
    with pytest.raises(SpecError):
        shard.route_request(FunctionRequest("s", "f", [], RequestOrigin.CLIENT, app="a"))


def test_warm_preferred_when_relevance_equal():
    shard = make_shard()
    add_node(shard, "n2", idle=2, loaded=("f",))
    add_node(shard, "n1", idle=4)
    req = FunctionRequest("fanin/s", "f", [], RequestOrigin.TRIGGER, app="fanin")
    assert shard.route_request(req) == "n2"


def test_shard_disjointness():
    for shards in (1, 2, 4, 7):
        for i in range(300):
            app = f"app-{i}"
            owners = [sid for sid in range(shards)
                      if CoordinatorShard(sid, shards, MemoryDurableStore()).owns(app)]
            assert len(owners) == 1
            assert owners[0] == fnv1a64(app.encode()) % shards == shard_of(app, shards)


def test_by_time_tick_fires_with_cross_node_refs():
    shard = make_shard()
    t = make_trigger_spec("win", "stream", "wb", TriggerKind.BY_TIME,
                          {"function": "agg", "time_window": "1000"})
    spec = AppSpec("stream", [FunctionSpec("q", "q"), FunctionSpec("agg", "agg")],
                   ["wb"], [t], ["q"])
    shard.register_app(RegisterApp(spec))
    link1 = add_node(shard, "n1", idle=2, session_objects={})
    link2 = add_node(shard, "n2", idle=2)
    session = shard.call_app(CallApp("stream", [("q", [b""])]))
    refs = [ObjectRef("wb", f"k{i}", session) for i in range(5)]
    for i, ref in enumerate(refs):
        shard.on_status_delta(StatusDelta("n1" if i % 2 else "n2", session, ready=[(ref, "q")]))
    shard.clock.advance(999)
    shard.tick()
    assert not [m for l in (link1, link2) for m in l.of_type(Invoke)
                if m.request.function == "agg"]
    shard.clock.advance(2)
    shard.tick()
    aggs = [m for l in (link1, link2) for m in l.of_type(Invoke) if m.request.function == "agg"]
    assert len(aggs) == 1
    assert [a.ref for a in aggs[0].request.args] == refs


def test_completion_detection_and_reclaim():
    shard = make_shard()
    spec = AppSpec("plain", [FunctionSpec("f", "f")], [], [], ["f"])
    shard.register_app(RegisterApp(spec))
    link = add_node(shard, "n1")
    session = shard.call_app(CallApp("plain", [("f", [b""])]))
    shard.tick()
    assert session in shard.sessions  # nothing reported yet
    shard.on_completion(Completion("n1", session, [("f", "rid", True, 0)],
                                   received=1, started=1, completed=1,
                                   pending_local=0, pending_sources=0))
    shard.tick()
    assert session not in shard.sessions
    assert session in shard.completed_sessions
    assert [m.session for m in link.of_type(Reclaim)] == [session]


def test_incomplete_while_pending_or_open():
    shard = make_shard()
    spec = AppSpec("plain", [FunctionSpec("f", "f")], [], [], ["f"])
    shard.register_app(RegisterApp(spec))
    add_node(shard, "n1")
    session = shard.call_app(CallApp("plain", [("f", [b""])], keep_open=True))
    shard.on_completion(Completion("n1", session, [], 1, 1, 1, 0, 0))
    shard.tick()
    assert session in shard.sessions  # still open for the client
    shard.call_app(CallApp("plain", [], session))  # close
    shard.on_completion(Completion("n1", session, [], 1, 2, 1, 1, 0))
    shard.tick()
    assert session in shard.sessions  # pending work on the node
    shard.on_completion(Completion("n1", session, [], 1, 2, 2, 0, 0))
    shard.tick()
    assert session not in shard.sessions


def test_global_rerun_routed_on_tick():
    shard = make_shard()
    from pheromone.core import ReExecMode, ReExecRule

    t = make_trigger_spec("win", "stream", "wb", TriggerKind.BY_TIME,
                          {"function": "agg", "time_window": "60000"},
                          [ReExecRule("q", ReExecMode.EVERY_OBJ, 100)])
    spec = AppSpec("stream", [FunctionSpec("q", "q"), FunctionSpec("agg", "agg")],
                   ["wb"], [t], ["q"])
    shard.register_app(RegisterApp(spec))
    link = add_node(shard, "n1")
    session = shard.call_app(CallApp("stream", [("q", [b"payload"])]))
    shard.on_status_delta(StatusDelta("n1", session,
                                      starts=[("q", "rid1", 0, [])]))
    shard.clock.advance(150)
    shard.tick()
    reruns = [m for m in link.of_type(Invoke) if m.request.origin is RequestOrigin.RE_EXEC]
    assert len(reruns) == 1 and reruns[0].request.function == "q"


def test_collect_outputs_reads_durable():
    shard = make_shard()
    session = "any/123"
    shard.durable.put(f"out/{session}/results/part-0", b"alpha")
    shard.durable.put(f"out/{session}/results/part-1", b"beta")
    shard.durable.put("out/other/results/part-0", b"nope")
    out = shard.collect_outputs(session)
    assert sorted(out.entries) == [("results", "part-0", b"alpha"), ("results", "part-1", b"beta")]
    assert out.complete is False
    assert shard.collect_outputs("unknown/1").entries == []


def test_foreign_app_rejected_on_wrong_shard():
    # find an app that shard 0 of 2 does not own
    name = next(f"app{i}" for i in range(100) if shard_of(f"app{i}", 2) == 1)
    shard = make_shard(shards=2, shard_id=0)
    with pytest.raises(SpecError):
        shard.register_app(RegisterApp(AppSpec(name, [FunctionSpec("f", "f")], [], [], ["f"])))


def test_configure_join_fires_when_satisfied():
    shard = make_shard()
    t = make_trigger_spec("join_t", "fanin", "votes", TriggerKind.DYNAMIC_JOIN,
                          {"function": "combine"})
    spec = AppSpec("fanin", [FunctionSpec("writer", "writer"), FunctionSpec("combine", "combine")],
                   ["votes"], [t], ["writer"])
    shard.register_app(RegisterApp(spec))
    link = add_node(shard, "n1")
    session = start_session(shard)
    from pheromone.transport import ConfigureJoin as CfgMsg

    with pytest.raises(SpecError):
        shard.configure_join(CfgMsg("fanin", "votes", "nope", session, None, 2))
    shard.configure_join(CfgMsg("fanin", "votes", "join_t", session, None, 2))
    shard.on_status_delta(StatusDelta("n1", session,
                                      ready=[(ObjectRef("votes", "x", session), "writer")]))
    assert not [m for m in link.of_type(Invoke) if m.request.function == "combine"]
    shard.on_status_delta(StatusDelta("n1", session,
                                      ready=[(ObjectRef("votes", "y", session), "writer")]))
    fired = [m for m in link.of_type(Invoke) if m.request.function == "combine"]
    assert len(fired) == 1 and [a.ref.key for a in fired[0].request.args] == ["x", "y"]


def test_routing_deterministic_for_identical_tables():
    def build():
        shard = make_shard()
        add_node(shard, "n1", idle=3, loaded=("f",), session_objects={"a/s": 2})
        add_node(shard, "n2", idle=3, loaded=("g",), session_objects={"a/s": 2})
        add_node(shard, "n3", idle=1)
        return shard

    requests = [FunctionRequest("a/s", fn, [], RequestOrigin.TRIGGER, app="a")
                for fn in ("f", "g", "h", "f", "g")]
    first = [build().route_request(r) for r in requests]
    second = [build().route_request(r) for r in requests]
    assert first == second


def test_staged_args_for_large_payloads():
    shard = make_shard()
    spec = AppSpec("plain", [FunctionSpec("f", "f")], [], [], ["f"])
    shard.register_app(RegisterApp(spec))
    link = add_node(shard, "n1")
    big = bytes(10_000)
    session = shard.call_app(CallApp("plain", [("f", [big, b"small"])]))
    inv = link.of_type(Invoke)[0]
    ref_args = [a for a in inv.request.args if hasattr(a, "ref")]
    inline = [a for a in inv.request.args if hasattr(a, "payload")]
    assert len(ref_args) == 1 and ref_args[0].ref.bucket == "__args__"
    assert inline[0].payload == b"small"
    assert shard.durable.get(f"args/{session}/0") == big
