"""Self-contained encoder/decoder for the coordinator wire protocol.

Frames are `total_len:u32be | version:u8 | msg_type:u8 | body`; strings travel
as u16 length + UTF-8, payloads as u32 length + raw bytes. Encodings here are
byte-identical to the platform's own.
"""

from __future__ import annotations

import struct
from typing import Optional

VERSION = 1

MSG_REGISTER_APP = 1
MSG_CREATE_BUCKET = 2
MSG_ADD_TRIGGER = 3
MSG_CALL_APP = 4
MSG_CONFIGURE_JOIN = 13
MSG_COLLECT_OUTPUTS = 14
MSG_OUTPUTS = 15
MSG_ACK = 16
MSG_LIST_TRIGGERS = 17

# trigger primitive kinds
IMMEDIATE = 1
BY_BATCH_SIZE = 2
BY_TIME = 3
BY_NAME = 4
BY_SET = 5
REDUNDANT = 6
DYNAMIC_JOIN = 7
DYNAMIC_GROUP = 8

# trigger scopes
LOCAL = 1
GLOBAL = 2

# re-execution modes
EVERY_OBJ = 1
PER_SESSION = 2

# dependency types (function-oriented interface)
DIRECT = 1
PERIODIC = 2

KIND_NAMES = {
    IMMEDIATE: "IMMEDIATE", BY_BATCH_SIZE: "BY_BATCH_SIZE", BY_TIME: "BY_TIME",
    BY_NAME: "BY_NAME", BY_SET: "BY_SET", REDUNDANT: "REDUNDANT",
    DYNAMIC_JOIN: "DYNAMIC_JOIN", DYNAMIC_GROUP: "DYNAMIC_GROUP",
}

# kinds whose condition the producing node can evaluate alone
_LOCAL_BY_DEFAULT = {IMMEDIATE, BY_NAME}


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def shard_of(app: str, shard_count: int) -> int:
    return fnv1a64(app.encode()) % shard_count


class Writer:
    def __init__(self) -> None:
        self.buf = bytearray()

    def u8(self, v: int) -> None:
        self.buf.append(v & 0xFF)

    def u16(self, v: int) -> None:
        self.buf += struct.pack(">H", v)

    def u32(self, v: int) -> None:
        self.buf += struct.pack(">I", v)

    def u64(self, v: int) -> None:
        self.buf += struct.pack(">Q", v)

    def string(self, s: str) -> None:
        raw = s.encode("utf-8")
        self.u16(len(raw))
        self.buf += raw

    def blob(self, b: bytes) -> None:
        self.u32(len(b))
        self.buf += b

    def flag(self, v: bool) -> None:
        self.u8(1 if v else 0)


class Reader:
    def __init__(self, data: bytes) -> None:
        self.view = memoryview(data)
        self.pos = 0

    def _take(self, n: int) -> memoryview:
        if self.pos + n > len(self.view):
            raise WireError("truncated frame")
        out = self.view[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self._take(8))[0]

    def string(self) -> str:
        return bytes(self._take(self.u16())).decode("utf-8")

    def blob(self) -> bytes:
        return bytes(self._take(self.u32()))

    def flag(self) -> bool:
        return self.u8() != 0


class WireError(Exception):
    """Malformed frame or unexpected reply."""


class ServerError(Exception):
    """ERROR frame reported by the coordinator."""


def frame(msg_type: int, body: Writer) -> bytes:
    head = Writer()
    head.u8(VERSION)
    head.u8(msg_type)
    payload = bytes(head.buf) + bytes(body.buf)
    return struct.pack(">I", len(payload)) + payload


def default_scope(kind: int, metadata: dict) -> int:
    override = metadata.get("scope")
    if override is not None:
        return {"LOCAL": LOCAL, "GLOBAL": GLOBAL}[str(override).upper()]
    return LOCAL if kind in _LOCAL_BY_DEFAULT else GLOBAL


def pack_trigger(w: Writer, name: str, app: str, bucket: str, kind: int,
                 metadata: dict, rules: list[tuple[str, int, int]]) -> None:
    """TriggerSpec encoding: rules are (source_function, mode, timeout_ms)."""
    meta = {k: str(v) for k, v in metadata.items()}
    w.string(name)
    w.string(app)
    w.string(bucket)
    w.u8(kind)
    w.string(meta.get("function", ""))
    w.u16(len(meta))
    for key in sorted(meta):
        w.string(key)
        w.string(meta[key])
    w.u8(default_scope(kind, meta))
    w.u16(len(rules))
    for source, mode, timeout_ms in rules:
        w.string(source)
        w.u8(mode)
        w.u64(timeout_ms)


def expand_hints(hints) -> list[tuple[str, int, int]]:
    """([(function, mode)], timeout_ms) -> per-rule tuples."""
    if hints is None:
        return []
    pairs, timeout = hints
    return [(function, int(mode), int(timeout)) for function, mode in pairs]


def encode_register_app(name: str, functions: list[str],
                        dependencies: Optional[list[tuple]] = None) -> bytes:
    w = Writer()
    w.string(name)
    w.u16(len(functions))
    for f in functions:
        w.string(f)  # function name
        w.string(f)  # handler id
    w.u16(0)  # buckets
    w.u16(0)  # triggers
    w.u16(len(functions))  # every function is client-invocable
    for f in functions:
        w.string(f)
    w.u16(0)  # compiled dependency buckets
    w.flag(dependencies is not None)
    if dependencies is not None:
        w.u16(len(dependencies))
        for dep in dependencies:
            sources, targets, dep_type = dep[0], dep[1], dep[2]
            meta = dep[3] if len(dep) > 3 else None
            w.u16(len(sources))
            for s in sources:
                w.string(s)
            w.u16(len(targets))
            for t in targets:
                w.string(t)
            w.u8(int(dep_type))
            w.flag(meta is not None)
            if meta is not None:
                w.u64(int(meta))
    return frame(MSG_REGISTER_APP, w)


def encode_create_bucket(app: str, bucket: str) -> bytes:
    w = Writer()
    w.string(app)
    w.string(bucket)
    return frame(MSG_CREATE_BUCKET, w)


def encode_add_trigger(app: str, bucket: str, trigger_name: str, kind: int,
                       prim_meta: dict, hints=None) -> bytes:
    w = Writer()
    pack_trigger(w, trigger_name, app, bucket, kind, prim_meta, expand_hints(hints))
    return frame(MSG_ADD_TRIGGER, w)


def encode_call_app(app: str, invocations: list[tuple[str, list[bytes]]],
                    session: str = "", keep_open: bool = False) -> bytes:
    w = Writer()
    w.string(app)
    w.string(session)
    w.flag(keep_open)
    w.u16(len(invocations))
    for function, args in invocations:
        w.string(function)
        w.u16(len(args))
        for a in args:
            w.blob(a if isinstance(a, bytes) else str(a).encode())
    return frame(MSG_CALL_APP, w)


def encode_configure_join(app: str, bucket: str, trigger: str, session: str,
                          keys: Optional[list[str]] = None,
                          count: Optional[int] = None) -> bytes:
    w = Writer()
    w.string(app)
    w.string(bucket)
    w.string(trigger)
    w.string(session)
    w.flag(keys is not None)
    if keys is not None:
        w.u16(len(keys))
        for k in keys:
            w.string(k)
    w.flag(count is not None)
    if count is not None:
        w.u64(count)
    return frame(MSG_CONFIGURE_JOIN, w)


def encode_collect_outputs(session: str) -> bytes:
    w = Writer()
    w.string(session)
    return frame(MSG_COLLECT_OUTPUTS, w)


def encode_list_triggers(app: str) -> bytes:
    w = Writer()
    w.string(app)
    w.flag(False)  # request form carries no trigger list
    return frame(MSG_LIST_TRIGGERS, w)


# -- replies ----------------------------------------------------------------------


def decode_reply(body: bytes):
    """Decode one reply frame body into (kind, payload)."""
    r = Reader(body)
    version = r.u8()
    if version != VERSION:
        raise WireError(f"unsupported protocol version {version}")
    msg_type = r.u8()
    if msg_type == MSG_ACK:
        ok = r.flag()
        value = r.string()
        error = r.string()
        if not ok:
            raise ServerError(error)
        return "ack", value
    if msg_type == MSG_OUTPUTS:
        entries = [(r.string(), r.string(), r.blob()) for _ in range(r.u32())]
        complete = r.flag()
        return "outputs", (entries, complete)
    if msg_type == MSG_LIST_TRIGGERS:
        app = r.string()
        triggers = []
        if r.flag():
            for _ in range(r.u16()):
                name = r.string()
                t_app = r.string()
                bucket = r.string()
                kind = r.u8()
                target = r.string()
                metadata = {}
                for _ in range(r.u16()):
                    k = r.string()
                    metadata[k] = r.string()
                scope = r.u8()
                rules = [(r.string(), r.u8(), r.u64()) for _ in range(r.u16())]
                triggers.append({
                    "name": name, "app": t_app, "bucket": bucket,
                    "kind": KIND_NAMES.get(kind, str(kind)), "function": target,
                    "metadata": metadata,
                    "scope": "LOCAL" if scope == LOCAL else "GLOBAL",
                    "re_exec": rules,
                })
        return "triggers", triggers
    raise WireError(f"unexpected reply type {msg_type}")
