"""Domain types, registry semantics, sessions, and dependency compilation."""

from __future__ import annotations

import random

import pytest
from hypothesis import given, settings, strategies as st

from pheromone.core import (
    AppSpec,
    DepType,
    FunctionSpec,
    ObjectRef,
    ReExecMode,
    ReExecRule,
    Registry,
    SpecError,
    TriggerKind,
    TriggerScope,
    UnknownAppError,
    app_spec_from_text,
    app_spec_to_text,
    compile_dependencies,
    make_trigger_spec,
    new_session,
    session_app,
    validate_app_spec,
)


def stream_app_spec() -> AppSpec:
    """The three-function event-stream deployment: Immediate plus ByTime triggers."""
    functions = [FunctionSpec(f, f) for f in ("preprocess", "query_event_info", "aggregate")]
    t1 = make_trigger_spec("immediate_trigger", "event-stream-processing", "immed_bck",
                           TriggerKind.IMMEDIATE, {"function": "query_event_info"})
    t2 = make_trigger_spec("by_time_trigger", "event-stream-processing", "by_time_bck",
                           TriggerKind.BY_TIME, {"function": "aggregate", "time_window": "1000"},
                           [ReExecRule("query_event_info", ReExecMode.EVERY_OBJ, 100)])
    return AppSpec("event-stream-processing", functions, ["immed_bck", "by_time_bck"],
                   [t1, t2], ["preprocess"])


def test_object_ref_invariants():
    with pytest.raises(SpecError):
        ObjectRef("", "k", "s")
    with pytest.raises(SpecError):
        ObjectRef("b", "", "s")
    with pytest.raises(SpecError):
        ObjectRef("b", "bad\nkey", "s")
    with pytest.raises(SpecError):
        ObjectRef("b", "bad\x00key", "s")
    assert ObjectRef("b", "k", "s") == ObjectRef("b", "k", "s")


def test_register_stream_app():
    reg = Registry()
    reg.register(stream_app_spec())
    assert reg.get("event-stream-processing").buckets == ["immed_bck", "by_time_bck"]


def test_register_rejects_dangling_bucket():
    spec = stream_app_spec()
    spec.buckets.remove("immed_bck")
    with pytest.raises(SpecError):
        Registry().register(spec)


def test_register_rejects_dangling_function():
    spec = stream_app_spec()
    spec.triggers[0].target_function = "ghost"
    spec.triggers[0].metadata["function"] = "ghost"
    with pytest.raises(SpecError):
        Registry().register(spec)


def test_reregistration_idempotent():
    reg = Registry()
    reg.register(stream_app_spec())
    reg.register(stream_app_spec())  # identical spec: no-op
    assert len(reg.get("event-stream-processing").triggers) == 2
    changed = stream_app_spec()
    changed.entry_functions = ["aggregate"]
    with pytest.raises(SpecError):
        reg.register(changed)


def test_registry_fails_closed():
    with pytest.raises(UnknownAppError):
        Registry().get("nope")


def test_trigger_metadata_validation():
    with pytest.raises(SpecError):
        make_trigger_spec("t", "a", "b", TriggerKind.BY_BATCH_SIZE, {"function": "f"})
    with pytest.raises(SpecError):
        make_trigger_spec("t", "a", "b", TriggerKind.BY_TIME, {"function": "f", "time_window": "0"})
    with pytest.raises(SpecError):
        make_trigger_spec("t", "a", "b", TriggerKind.REDUNDANT,
                          {"function": "f", "key_set": "a,b", "k": "3"})
    with pytest.raises(SpecError):
        make_trigger_spec("t", "a", "b", TriggerKind.REDUNDANT,
                          {"function": "f", "key_set": "a,b", "k": "1", "n": "5"})
    ok = make_trigger_spec("t", "a", "b", TriggerKind.REDUNDANT,
                           {"function": "f", "key_set": "a,b,c", "k": "2"})
    assert ok.k_of_n() == (2, 3)


def test_scope_defaults_and_override():
    local = make_trigger_spec("t", "a", "b", TriggerKind.IMMEDIATE, {"function": "f"})
    assert local.scope is TriggerScope.LOCAL
    byname = make_trigger_spec("t", "a", "b", TriggerKind.BY_NAME, {"function": "f", "key": "k"})
    assert byname.scope is TriggerScope.LOCAL
    for kind, meta in [
        (TriggerKind.BY_BATCH_SIZE, {"count": "2"}),
        (TriggerKind.BY_TIME, {"time_window": "5"}),
        (TriggerKind.BY_SET, {"key_set": "a"}),
        (TriggerKind.REDUNDANT, {"key_set": "a,b", "k": "1"}),
        (TriggerKind.DYNAMIC_JOIN, {}),
        (TriggerKind.DYNAMIC_GROUP, {}),
    ]:
        spec = make_trigger_spec("t", "a", "b", kind, {"function": "f", **meta})
        assert spec.scope is TriggerScope.GLOBAL, kind
    overridden = make_trigger_spec("t", "a", "b", TriggerKind.IMMEDIATE,
                                   {"function": "f", "scope": "GLOBAL"})
    assert overridden.scope is TriggerScope.GLOBAL


def test_new_session_format():
    reg = Registry()
    reg.register(AppSpec("wordcount", [FunctionSpec("m", "m")], entry_functions=["m"]))
    sid = new_session(reg, "wordcount", random.Random(42))
    app, _, suffix = sid.partition("/")
    assert app == "wordcount"
    assert len(suffix) == 32 and all(c in "0123456789abcdef" for c in suffix)
    assert session_app(sid) == "wordcount"
    assert new_session(reg, "wordcount", random.Random()) != new_session(reg, "wordcount", random.Random())
    with pytest.raises(UnknownAppError):
        new_session(reg, "", random.Random())


def test_session_ids_collision_free():
    reg = Registry()
    reg.register(AppSpec("a", [FunctionSpec("f", "f")]))
    rng = random.Random(7)
    ids = {new_session(reg, "a", rng) for _ in range(1_000_000)}
    assert len(ids) == 1_000_000


def test_compile_dependencies_stream_shape():
    deps = [
        (["preprocess"], ["query_event_info"], DepType.DIRECT),
        (["query_event_info"], ["aggregate"], DepType.PERIODIC, 1000),
    ]
    spec = compile_dependencies("ad-stream", ["preprocess", "query_event_info", "aggregate"], deps)
    kinds = sorted(t.kind.name for t in spec.triggers)
    assert kinds == ["BY_TIME", "IMMEDIATE"]
    by_time = next(t for t in spec.triggers if t.kind is TriggerKind.BY_TIME)
    assert by_time.time_window() == 1000
    assert by_time.target_function == "aggregate"
    assert spec.dependency_buckets["preprocess"] == spec.triggers[0].bucket
    validate_app_spec(spec)


def test_compile_dependencies_empty():
    spec = compile_dependencies("x", ["f", "g"], [])
    assert spec.buckets == [] and spec.triggers == []


def test_compile_dependencies_ambiguous_source_flagged():
    deps = [
        (["f"], ["g"], DepType.DIRECT),
        (["f"], ["h"], DepType.DIRECT),
    ]
    spec = compile_dependencies("x", ["f", "g", "h"], deps)
    assert spec.dependency_buckets["f"] == ""  # ambiguous marker


def test_compile_dependencies_unknown_function():
    with pytest.raises(SpecError):
        compile_dependencies("x", ["f"], [(["f"], ["ghost"], DepType.DIRECT)])


def test_app_spec_text_round_trip():
    spec = stream_app_spec()
    text = app_spec_to_text(spec)
    assert "trigger.by_time_trigger.meta.time_window = 1000" in text
    assert app_spec_from_text(text) == spec
    # compiled dependency maps survive the round trip too
    compiled = compile_dependencies("d", ["f", "g"], [(["f"], ["g"], DepType.DIRECT)])
    assert app_spec_from_text(app_spec_to_text(compiled)) == compiled


def test_app_spec_text_rejects_malformed():
    with pytest.raises(SpecError):
        app_spec_from_text("app.name")
    with pytest.raises(SpecError):
        app_spec_from_text("app.name = x\nmystery.key = 1")


@settings(max_examples=120, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_compiled_specs_always_valid(seed):
    """compile_dependencies output satisfies every AppSpec invariant."""
    rnd = random.Random(seed)
    functions = [f"f{i}" for i in range(rnd.randint(1, 6))]
    deps = []
    for _ in range(rnd.randint(0, 6)):
        sources = rnd.sample(functions, rnd.randint(1, len(functions)))
        targets = rnd.sample(functions, rnd.randint(1, len(functions)))
        if rnd.random() < 0.5:
            deps.append((sources, targets, DepType.DIRECT))
        else:
            deps.append((sources, targets, DepType.PERIODIC, rnd.randint(1, 10_000)))
    spec = compile_dependencies("app", functions, deps)
    validate_app_spec(spec)  # raises on any invariant violation
    assert len(spec.buckets) == len(deps)
