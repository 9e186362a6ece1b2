"""Catalog of client frames encoded two ways: by this SDK and by the platform.

Each entry produces one wire frame. The platform side is the source of truth
used to generate the checked-in fixtures; the SDK side must match them byte
for byte.
"""

from __future__ import annotations

from pheromone_client import wire as sdk


def _platform_modules():
    from pheromone import core, transport

    return core, transport


STREAM_APP = "event-stream-processing"
STREAM_FUNCTIONS = ["preprocess", "query_event_info", "aggregate"]


def catalog() -> list[tuple[str, bytes]]:
    """(name, sdk-encoded frame) for every client message shape."""
    return [
        ("register_simple",
         sdk.encode_register_app(STREAM_APP, STREAM_FUNCTIONS)),
        ("register_with_deps",
         sdk.encode_register_app(
             "ad-stream", STREAM_FUNCTIONS,
             [(["preprocess"], ["query_event_info"], sdk.DIRECT),
              (["query_event_info"], ["aggregate"], sdk.PERIODIC, 1000)])),
        ("create_bucket",
         sdk.encode_create_bucket(STREAM_APP, "immed_bck")),
        ("add_trigger_immediate",
         sdk.encode_add_trigger(STREAM_APP, "immed_bck", "immediate_trigger",
                                sdk.IMMEDIATE, {"function": "query_event_info"})),
        ("add_trigger_by_time_with_hints",
         sdk.encode_add_trigger(STREAM_APP, "by_time_bck", "by_time_trigger",
                                sdk.BY_TIME,
                                {"function": "aggregate", "time_window": 1000},
                                hints=([("query_event_info", sdk.EVERY_OBJ)], 100))),
        ("add_trigger_redundant",
         sdk.encode_add_trigger("serve", "votes", "first_k", sdk.REDUNDANT,
                                {"function": "combine", "key_set": "r0,r1,r2", "k": 2})),
        ("add_trigger_scope_override",
         sdk.encode_add_trigger("app", "b", "t", sdk.IMMEDIATE,
                                {"function": "f", "scope": "GLOBAL"})),
        ("call_app_new_session",
         sdk.encode_call_app("wordcount", [("wc_map", [b"4", b"a b a"]),
                                           ("wc_map", [b"4", b"c d"])])),
        ("call_app_follow_up",
         sdk.encode_call_app(STREAM_APP, [("preprocess", [b"\x00\x01batch"])],
                             session=f"{STREAM_APP}/00ff", keep_open=True)),
        ("call_app_close",
         sdk.encode_call_app(STREAM_APP, [], session=f"{STREAM_APP}/00ff")),
        ("configure_join_keys",
         sdk.encode_configure_join("app", "jb", "join_t", "app/001",
                                   keys=["x", "y", "z"])),
        ("configure_join_count",
         sdk.encode_configure_join("app", "jb", "join_t", "app/001", count=17)),
        ("collect_outputs",
         sdk.encode_collect_outputs("wordcount/12ab")),
        ("list_triggers",
         sdk.encode_list_triggers(STREAM_APP)),
    ]


def platform_catalog() -> list[tuple[str, bytes]]:
    """The same frames produced by the platform's own encoder."""
    core, tp = _platform_modules()

    def app_spec(name, functions):
        return core.AppSpec(name, [core.FunctionSpec(f, f) for f in functions],
                            [], [], list(functions))

    def trigger(name, app, bucket, kind, meta, rules=()):
        return core.make_trigger_spec(
            name, app, bucket, core.TriggerKind(kind),
            {k: str(v) for k, v in meta.items()},
            [core.ReExecRule(f, core.ReExecMode(m), t) for f, m, t in rules])

    frames = [
        ("register_simple",
         tp.RegisterApp(app_spec(STREAM_APP, STREAM_FUNCTIONS))),
        ("register_with_deps",
         tp.RegisterApp(app_spec("ad-stream", STREAM_FUNCTIONS),
                        [(["preprocess"], ["query_event_info"], core.DepType.DIRECT),
                         (["query_event_info"], ["aggregate"], core.DepType.PERIODIC, 1000)])),
        ("create_bucket", tp.CreateBucket(STREAM_APP, "immed_bck")),
        ("add_trigger_immediate",
         tp.AddTrigger(trigger("immediate_trigger", STREAM_APP, "immed_bck",
                               sdk.IMMEDIATE, {"function": "query_event_info"}))),
        ("add_trigger_by_time_with_hints",
         tp.AddTrigger(trigger("by_time_trigger", STREAM_APP, "by_time_bck",
                               sdk.BY_TIME,
                               {"function": "aggregate", "time_window": 1000},
                               [("query_event_info", sdk.EVERY_OBJ, 100)]))),
        ("add_trigger_redundant",
         tp.AddTrigger(trigger("first_k", "serve", "votes", sdk.REDUNDANT,
                               {"function": "combine", "key_set": "r0,r1,r2", "k": 2}))),
        ("add_trigger_scope_override",
         tp.AddTrigger(trigger("t", "app", "b", sdk.IMMEDIATE,
                               {"function": "f", "scope": "GLOBAL"}))),
        ("call_app_new_session",
         tp.CallApp("wordcount", [("wc_map", [b"4", b"a b a"]), ("wc_map", [b"4", b"c d"])])),
        ("call_app_follow_up",
         tp.CallApp(STREAM_APP, [("preprocess", [b"\x00\x01batch"])],
                    f"{STREAM_APP}/00ff", True)),
        ("call_app_close",
         tp.CallApp(STREAM_APP, [], f"{STREAM_APP}/00ff", False)),
        ("configure_join_keys",
         tp.ConfigureJoin("app", "jb", "join_t", "app/001", ["x", "y", "z"], None)),
        ("configure_join_count",
         tp.ConfigureJoin("app", "jb", "join_t", "app/001", None, 17)),
        ("collect_outputs", tp.CollectOutputs("wordcount/12ab")),
        ("list_triggers", tp.ListTriggers(STREAM_APP, None)),
    ]
    return [(name, tp.encode_message(msg)) for name, msg in frames]
