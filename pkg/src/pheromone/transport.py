"""Framed binary wire protocol plus TCP plumbing.

Every frame is `total_len:u32be | version:u8 | msg_type:u8 | body`, where
`total_len` counts the bytes after itself. Strings travel as u16 length +
UTF-8, payloads as u32 length + raw bytes; object payloads cross the wire
verbatim with no structural re-encoding.
"""

from __future__ import annotations

import socket
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

from .core import (
    AppSpec,
    Arg,
    DepType,
    FunctionRequest,
    FunctionSpec,
    InlineArg,
    NodeStatus,
    ObjectRef,
    ProtocolError,
    ReExecMode,
    ReExecRule,
    RefArg,
    RequestOrigin,
    TriggerScope,
    TriggerSpec,
    TriggerKind,
    fnv1a64,
)

VERSION = 1

MSG_REGISTER_APP = 1
MSG_CREATE_BUCKET = 2
MSG_ADD_TRIGGER = 3
MSG_CALL_APP = 4
MSG_INVOKE = 5
MSG_STATUS_DELTA = 6
MSG_RESET = 7
MSG_FETCH_OBJECT = 8
MSG_OBJECT_DATA = 9
MSG_NODE_STATUS = 10
MSG_COMPLETION = 11
MSG_RECLAIM = 12
MSG_CONFIGURE_JOIN = 13
MSG_COLLECT_OUTPUTS = 14
MSG_OUTPUTS = 15
MSG_ACK = 16
MSG_LIST_TRIGGERS = 17

DEFAULT_PIGGYBACK_THRESHOLD = 4 * 1024
DEFAULT_IO_POOL = 4


class Writer:
    __slots__ = ("buf",)

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
        if len(raw) > 0xFFFF:
            raise ProtocolError(f"string too long for u16 length: {len(raw)}")
        self.u16(len(raw))
        self.buf += raw

    def blob(self, b: bytes) -> None:
        self.u32(len(b))
        self.buf += b

    def flag(self, v: bool) -> None:
        self.u8(1 if v else 0)


class Reader:
    __slots__ = ("view", "pos")

    def __init__(self, data: bytes) -> None:
        self.view = memoryview(data)
        self.pos = 0

    def _take(self, n: int) -> memoryview:
        if self.pos + n > len(self.view):
            raise ProtocolError("truncated frame")
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
        n = self.u16()
        return bytes(self._take(n)).decode("utf-8")

    def blob(self) -> bytes:
        n = self.u32()
        return bytes(self._take(n))

    def flag(self) -> bool:
        return self.u8() != 0

    def done(self) -> bool:
        return self.pos == len(self.view)


# -- shared sub-encodings ------------------------------------------------------


def _pack_ref(w: Writer, ref: ObjectRef) -> None:
    w.string(ref.bucket)
    w.string(ref.key)
    w.string(ref.session)


def _unpack_ref(r: Reader) -> ObjectRef:
    return ObjectRef(r.string(), r.string(), r.string())


def _pack_arg(w: Writer, arg: Arg) -> None:
    if isinstance(arg, InlineArg):
        w.u8(0)
        w.blob(arg.payload)
    else:
        w.u8(1)
        _pack_ref(w, arg.ref)
        w.string(arg.locator)


def _unpack_arg(r: Reader) -> Arg:
    tag = r.u8()
    if tag == 0:
        return InlineArg(r.blob())
    if tag == 1:
        return RefArg(_unpack_ref(r), r.string())
    raise ProtocolError(f"unknown arg tag {tag}")


def _pack_trigger(w: Writer, t: TriggerSpec) -> None:
    w.string(t.name)
    w.string(t.app)
    w.string(t.bucket)
    w.u8(t.kind.value)
    w.string(t.target_function)
    w.u16(len(t.metadata))
    for k in sorted(t.metadata):
        w.string(k)
        w.string(t.metadata[k])
    w.u8(t.scope.value)
    w.u16(len(t.re_exec))
    for rule in t.re_exec:
        w.string(rule.source_function)
        w.u8(rule.mode.value)
        w.u64(rule.timeout_ms)


def _unpack_trigger(r: Reader) -> TriggerSpec:
    name, app, bucket = r.string(), r.string(), r.string()
    kind = TriggerKind(r.u8())
    target = r.string()
    metadata = {}
    for _ in range(r.u16()):
        k = r.string()
        metadata[k] = r.string()
    scope = TriggerScope(r.u8())
    rules = []
    for _ in range(r.u16()):
        rules.append(ReExecRule(r.string(), ReExecMode(r.u8()), r.u64()))
    return TriggerSpec(name, app, bucket, kind, target, metadata, scope, rules)


def _pack_app_spec(w: Writer, spec: AppSpec) -> None:
    w.string(spec.name)
    w.u16(len(spec.functions))
    for f in spec.functions:
        w.string(f.name)
        w.string(f.handler_id)
    w.u16(len(spec.buckets))
    for b in spec.buckets:
        w.string(b)
    w.u16(len(spec.triggers))
    for t in spec.triggers:
        _pack_trigger(w, t)
    w.u16(len(spec.entry_functions))
    for e in spec.entry_functions:
        w.string(e)
    w.u16(len(spec.dependency_buckets))
    for k in sorted(spec.dependency_buckets):
        w.string(k)
        w.string(spec.dependency_buckets[k])


def _unpack_app_spec(r: Reader) -> AppSpec:
    name = r.string()
    functions = [FunctionSpec(r.string(), r.string()) for _ in range(r.u16())]
    buckets = [r.string() for _ in range(r.u16())]
    triggers = [_unpack_trigger(r) for _ in range(r.u16())]
    entries = [r.string() for _ in range(r.u16())]
    deps = {}
    for _ in range(r.u16()):
        k = r.string()
        deps[k] = r.string()
    return AppSpec(name, functions, buckets, triggers, entries, deps)


def _pack_request(w: Writer, req: FunctionRequest) -> None:
    w.string(req.session)
    w.string(req.function)
    w.string(req.app)
    w.string(req.request_id)
    w.u8(req.origin.value)
    w.flag(req.forwarded)
    w.string(req.group_id or "")
    w.u16(len(req.args))
    for a in req.args:
        _pack_arg(w, a)


def _unpack_request(r: Reader) -> FunctionRequest:
    session, function, app, request_id = r.string(), r.string(), r.string(), r.string()
    origin = RequestOrigin(r.u8())
    forwarded = r.flag()
    group_id = r.string() or None
    args = [_unpack_arg(r) for _ in range(r.u16())]
    return FunctionRequest(session, function, args, origin, app, request_id, group_id, forwarded)


def _pack_status(w: Writer, s: NodeStatus) -> None:
    w.string(s.node_id)
    w.string(s.addr)
    w.u16(s.idle_executors)
    w.u16(s.total_executors)
    w.u16(len(s.loaded_functions))
    for f in sorted(s.loaded_functions):
        w.string(f)
    w.u16(len(s.session_objects))
    for k in sorted(s.session_objects):
        w.string(k)
        w.u32(s.session_objects[k])
    w.u32(s.queue_depth)
    w.u64(s.bytes_live)


def _unpack_status(r: Reader) -> NodeStatus:
    node_id, addr = r.string(), r.string()
    idle, total = r.u16(), r.u16()
    loaded = frozenset(r.string() for _ in range(r.u16()))
    sessions = {}
    for _ in range(r.u16()):
        k = r.string()
        sessions[k] = r.u32()
    return NodeStatus(node_id, addr, idle, total, loaded, sessions, r.u32(), r.u64())


# -- messages --------------------------------------------------------------------


@dataclass
class RegisterApp:
    TYPE = MSG_REGISTER_APP
    spec: AppSpec
    # Optional function-oriented dependency form, compiled server-side:
    # (sources, targets, DepType, meta-ms or None)
    dependencies: Optional[list[tuple]] = None

    def pack(self, w: Writer) -> None:
        _pack_app_spec(w, self.spec)
        deps = self.dependencies
        w.flag(deps is not None)
        if deps is not None:
            w.u16(len(deps))
            for dep in deps:
                sources, targets, dep_type = dep[0], dep[1], dep[2]
                meta = dep[3] if len(dep) > 3 else None
                w.u16(len(sources))
                for s in sources:
                    w.string(s)
                w.u16(len(targets))
                for t in targets:
                    w.string(t)
                w.u8(dep_type.value)
                w.flag(meta is not None)
                if meta is not None:
                    w.u64(int(meta))

    @classmethod
    def unpack(cls, r: Reader) -> "RegisterApp":
        spec = _unpack_app_spec(r)
        deps = None
        if r.flag():
            deps = []
            for _ in range(r.u16()):
                sources = [r.string() for _ in range(r.u16())]
                targets = [r.string() for _ in range(r.u16())]
                dep_type = DepType(r.u8())
                meta = r.u64() if r.flag() else None
                deps.append((sources, targets, dep_type) if meta is None
                            else (sources, targets, dep_type, meta))
        return cls(spec, deps)


@dataclass
class CreateBucket:
    TYPE = MSG_CREATE_BUCKET
    app: str
    bucket: str

    def pack(self, w: Writer) -> None:
        w.string(self.app)
        w.string(self.bucket)

    @classmethod
    def unpack(cls, r: Reader) -> "CreateBucket":
        return cls(r.string(), r.string())


@dataclass
class AddTrigger:
    TYPE = MSG_ADD_TRIGGER
    spec: TriggerSpec

    def pack(self, w: Writer) -> None:
        _pack_trigger(w, self.spec)

    @classmethod
    def unpack(cls, r: Reader) -> "AddTrigger":
        return cls(_unpack_trigger(r))


@dataclass
class CallApp:
    TYPE = MSG_CALL_APP
    app: str
    invocations: list[tuple[str, list[bytes]]]
    session: str = ""  # non-empty: add invocations to an existing session
    keep_open: bool = False

    def pack(self, w: Writer) -> None:
        w.string(self.app)
        w.string(self.session)
        w.flag(self.keep_open)
        w.u16(len(self.invocations))
        for function, args in self.invocations:
            w.string(function)
            w.u16(len(args))
            for a in args:
                w.blob(a)

    @classmethod
    def unpack(cls, r: Reader) -> "CallApp":
        app, session, keep_open = r.string(), r.string(), r.flag()
        invocations = []
        for _ in range(r.u16()):
            fn = r.string()
            invocations.append((fn, [r.blob() for _ in range(r.u16())]))
        return cls(app, invocations, session, keep_open)


@dataclass
class Invoke:
    TYPE = MSG_INVOKE
    request: FunctionRequest
    bundle: Optional[AppSpec] = None  # app spec, sent on first session contact

    def pack(self, w: Writer) -> None:
        _pack_request(w, self.request)
        w.flag(self.bundle is not None)
        if self.bundle is not None:
            _pack_app_spec(w, self.bundle)

    @classmethod
    def unpack(cls, r: Reader) -> "Invoke":
        req = _unpack_request(r)
        bundle = _unpack_app_spec(r) if r.flag() else None
        return cls(req, bundle)


@dataclass
class StatusDelta:
    TYPE = MSG_STATUS_DELTA
    node_id: str
    session: str
    ready: list[tuple[ObjectRef, str]] = field(default_factory=list)  # (ref, producer)
    starts: list[tuple[str, str, int, list[Arg]]] = field(default_factory=list)  # (function, request_id, at, args)
    status: Optional[NodeStatus] = None

    def pack(self, w: Writer) -> None:
        w.string(self.node_id)
        w.string(self.session)
        w.u16(len(self.ready))
        for ref, producer in self.ready:
            _pack_ref(w, ref)
            w.string(producer)
        w.u16(len(self.starts))
        for function, request_id, at, args in self.starts:
            w.string(function)
            w.string(request_id)
            w.u64(at)
            w.u16(len(args))
            for a in args:
                _pack_arg(w, a)
        w.flag(self.status is not None)
        if self.status is not None:
            _pack_status(w, self.status)

    @classmethod
    def unpack(cls, r: Reader) -> "StatusDelta":
        node_id, session = r.string(), r.string()
        ready = [(_unpack_ref(r), r.string()) for _ in range(r.u16())]
        starts = []
        for _ in range(r.u16()):
            fn, rid, at = r.string(), r.string(), r.u64()
            starts.append((fn, rid, at, [_unpack_arg(r) for _ in range(r.u16())]))
        status = _unpack_status(r) if r.flag() else None
        return cls(node_id, session, ready, starts, status)


@dataclass
class Reset:
    TYPE = MSG_RESET
    session: str
    refs: list[ObjectRef]

    def pack(self, w: Writer) -> None:
        w.string(self.session)
        w.u16(len(self.refs))
        for ref in self.refs:
            _pack_ref(w, ref)

    @classmethod
    def unpack(cls, r: Reader) -> "Reset":
        session = r.string()
        return cls(session, [_unpack_ref(r) for _ in range(r.u16())])


@dataclass
class FetchObject:
    TYPE = MSG_FETCH_OBJECT
    ref: ObjectRef

    def pack(self, w: Writer) -> None:
        _pack_ref(w, self.ref)

    @classmethod
    def unpack(cls, r: Reader) -> "FetchObject":
        return cls(_unpack_ref(r))


@dataclass
class ObjectData:
    TYPE = MSG_OBJECT_DATA
    found: bool
    payload: bytes = b""
    checksum: int = 0

    def pack(self, w: Writer) -> None:
        w.flag(self.found)
        w.blob(self.payload)
        w.u64(self.checksum)

    @classmethod
    def unpack(cls, r: Reader) -> "ObjectData":
        return cls(r.flag(), r.blob(), r.u64())


@dataclass
class NodeStatusMsg:
    TYPE = MSG_NODE_STATUS
    status: NodeStatus

    def pack(self, w: Writer) -> None:
        _pack_status(w, self.status)

    @classmethod
    def unpack(cls, r: Reader) -> "NodeStatusMsg":
        return cls(_unpack_status(r))


@dataclass
class Completion:
    TYPE = MSG_COMPLETION
    node_id: str
    session: str
    entries: list[tuple[str, str, bool, int]] = field(default_factory=list)  # (function, request_id, ok, emitted)
    received: int = 0
    started: int = 0
    completed: int = 0
    pending_local: int = 0
    pending_sources: int = 0

    def pack(self, w: Writer) -> None:
        w.string(self.node_id)
        w.string(self.session)
        w.u16(len(self.entries))
        for fn, rid, ok, emitted in self.entries:
            w.string(fn)
            w.string(rid)
            w.flag(ok)
            w.u32(emitted)
        w.u32(self.received)
        w.u32(self.started)
        w.u32(self.completed)
        w.u32(self.pending_local)
        w.u32(self.pending_sources)

    @classmethod
    def unpack(cls, r: Reader) -> "Completion":
        node_id, session = r.string(), r.string()
        entries = [(r.string(), r.string(), r.flag(), r.u32()) for _ in range(r.u16())]
        return cls(node_id, session, entries, r.u32(), r.u32(), r.u32(), r.u32(), r.u32())


@dataclass
class Reclaim:
    TYPE = MSG_RECLAIM
    session: str

    def pack(self, w: Writer) -> None:
        w.string(self.session)

    @classmethod
    def unpack(cls, r: Reader) -> "Reclaim":
        return cls(r.string())


@dataclass
class ConfigureJoin:
    TYPE = MSG_CONFIGURE_JOIN
    app: str
    bucket: str
    trigger: str
    session: str
    keys: Optional[list[str]] = None
    count: Optional[int] = None

    def pack(self, w: Writer) -> None:
        w.string(self.app)
        w.string(self.bucket)
        w.string(self.trigger)
        w.string(self.session)
        w.flag(self.keys is not None)
        if self.keys is not None:
            w.u16(len(self.keys))
            for k in self.keys:
                w.string(k)
        w.flag(self.count is not None)
        if self.count is not None:
            w.u64(self.count)

    @classmethod
    def unpack(cls, r: Reader) -> "ConfigureJoin":
        app, bucket, trigger, session = r.string(), r.string(), r.string(), r.string()
        keys = [r.string() for _ in range(r.u16())] if r.flag() else None
        count = r.u64() if r.flag() else None
        return cls(app, bucket, trigger, session, keys, count)


@dataclass
class CollectOutputs:
    TYPE = MSG_COLLECT_OUTPUTS
    session: str

    def pack(self, w: Writer) -> None:
        w.string(self.session)

    @classmethod
    def unpack(cls, r: Reader) -> "CollectOutputs":
        return cls(r.string())


@dataclass
class Outputs:
    TYPE = MSG_OUTPUTS
    entries: list[tuple[str, str, bytes]]  # (bucket, key, payload)
    complete: bool = False

    def pack(self, w: Writer) -> None:
        w.u32(len(self.entries))
        for bucket, key, payload in self.entries:
            w.string(bucket)
            w.string(key)
            w.blob(payload)
        w.flag(self.complete)

    @classmethod
    def unpack(cls, r: Reader) -> "Outputs":
        entries = [(r.string(), r.string(), r.blob()) for _ in range(r.u32())]
        return cls(entries, r.flag())


@dataclass
class Ack:
    TYPE = MSG_ACK
    ok: bool = True
    value: str = ""
    error: str = ""

    def pack(self, w: Writer) -> None:
        w.flag(self.ok)
        w.string(self.value)
        w.string(self.error)

    @classmethod
    def unpack(cls, r: Reader) -> "Ack":
        return cls(r.flag(), r.string(), r.string())


@dataclass
class ListTriggers:
    TYPE = MSG_LIST_TRIGGERS
    app: str
    triggers: Optional[list[TriggerSpec]] = None  # None in requests

    def pack(self, w: Writer) -> None:
        w.string(self.app)
        w.flag(self.triggers is not None)
        if self.triggers is not None:
            w.u16(len(self.triggers))
            for t in self.triggers:
                _pack_trigger(w, t)

    @classmethod
    def unpack(cls, r: Reader) -> "ListTriggers":
        app = r.string()
        triggers = [_unpack_trigger(r) for _ in range(r.u16())] if r.flag() else None
        return cls(app, triggers)


MESSAGE_TYPES = {
    cls.TYPE: cls
    for cls in (
        RegisterApp, CreateBucket, AddTrigger, CallApp, Invoke, StatusDelta, Reset,
        FetchObject, ObjectData, NodeStatusMsg, Completion, Reclaim, ConfigureJoin,
        CollectOutputs, Outputs, Ack, ListTriggers,
    )
}

Message = object


def encode_message(msg) -> bytes:
    w = Writer()
    w.u8(VERSION)
    w.u8(msg.TYPE)
    msg.pack(w)
    return struct.pack(">I", len(w.buf)) + bytes(w.buf)


def decode_message(frame: bytes):
    """Decode one frame (with its length prefix); round-trips encode_message."""
    if len(frame) < 4:
        raise ProtocolError("frame shorter than its length field")
    (total,) = struct.unpack(">I", frame[:4])
    body = frame[4:]
    if len(body) != total:
        raise ProtocolError(f"frame length mismatch: header says {total}, got {len(body)}")
    return decode_body(body)


def decode_body(body: bytes):
    r = Reader(body)
    version = r.u8()
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    msg_type = r.u8()
    cls = MESSAGE_TYPES.get(msg_type)
    if cls is None:
        raise ProtocolError(f"unknown message type {msg_type}")
    msg = cls.unpack(r)
    if not r.done():
        raise ProtocolError(f"{cls.__name__}: {len(r.view) - r.pos} trailing bytes")
    return msg


# -- piggybacking ----------------------------------------------------------------


def piggyback(arg: Arg, threshold: int, local_payload: Optional[bytes]) -> Arg:
    """Inline a small payload the sender holds; pure in (size, threshold)."""
    if isinstance(arg, InlineArg):
        return arg
    if local_payload is not None and len(local_payload) <= threshold:
        return InlineArg(local_payload)
    return arg


def prepare_invocation(req: FunctionRequest, lookup: Callable[[ObjectRef], Optional[bytes]],
                       threshold: int = DEFAULT_PIGGYBACK_THRESHOLD,
                       locator: str = "") -> FunctionRequest:
    """Inline small locally-held object args; tag the rest with the holder's locator."""
    args: list[Arg] = []
    for a in req.args:
        if isinstance(a, RefArg):
            payload = lookup(a.ref)
            inlined = piggyback(a, threshold, payload)
            if isinstance(inlined, RefArg) and payload is not None and not a.locator:
                inlined = RefArg(a.ref, locator)
            args.append(inlined)
        else:
            args.append(a)
    return FunctionRequest(req.session, req.function, args, req.origin, req.app,
                           req.request_id, req.group_id, req.forwarded)


# -- sockets ----------------------------------------------------------------------


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


def send_on(sock: socket.socket, msg, lock: Optional[threading.Lock] = None) -> None:
    frame = encode_message(msg)
    if lock is not None:
        with lock:
            sock.sendall(frame)
    else:
        sock.sendall(frame)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(min(n - got, 4 << 20))
        if not chunk:
            raise ConnectionError("peer closed")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks) if len(chunks) != 1 else chunks[0]


def recv_on(sock: socket.socket):
    header = _recv_exact(sock, 4)
    (total,) = struct.unpack(">I", header)
    return decode_body(_recv_exact(sock, total))


class Connection:
    """One long-lived peer connection with a write lock and message counters."""

    def __init__(self, sock: socket.socket) -> None:
        self.sock = sock
        self.write_lock = threading.Lock()
        self.sent_by_type: dict[int, int] = {}

    def send(self, msg) -> None:
        self.sent_by_type[msg.TYPE] = self.sent_by_type.get(msg.TYPE, 0) + 1
        send_on(self.sock, msg, self.write_lock)

    def recv(self):
        return recv_on(self.sock)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def dial(addr: str, timeout: Optional[float] = None) -> Connection:
    """Connect with an optional connect timeout; the stream itself blocks."""
    host, port = parse_addr(addr)
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return Connection(sock)


class MessageServer:
    """Accepts connections; each runs a reader loop on an I/O worker thread.

    The handler gets (msg, conn) and may send replies or pushes on the same
    connection at any time. Payload serving (FETCH_OBJECT) therefore proceeds
    concurrently with scheduling.
    """

    def __init__(self, listen: str, handler: Callable[[object, Connection], None],
                 name: str = "srv", io_pool: int = DEFAULT_IO_POOL) -> None:
        host, port = parse_addr(listen)
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(128)
        self.addr = f"{host}:{self._sock.getsockname()[1]}"
        self._handler = handler
        self._name = name
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._conns: list[Connection] = []
        self._accept_thread = threading.Thread(target=self._accept_loop, name=f"{name}-accept", daemon=True)
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, _ = self._sock.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = Connection(sock)
            self._conns.append(conn)
            t = threading.Thread(target=self._reader_loop, args=(conn,),
                                 name=f"{self._name}-io{len(self._threads)}", daemon=True)
            self._threads.append(t)
            t.start()

    def _reader_loop(self, conn: Connection) -> None:
        try:
            while not self._stop.is_set():
                msg = conn.recv()
                self._handler(msg, conn)
        except (ConnectionError, OSError):
            pass
        except ProtocolError:
            conn.close()

    def stop(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass
        for conn in self._conns:
            conn.close()


def serve_fetch(store, msg: FetchObject, conn: Connection) -> None:
    """Answer a direct-transfer request from the local store, payload verbatim."""
    obj = store.get_ready(msg.ref)
    if obj is None:
        conn.send(ObjectData(found=False))
    else:
        conn.send(ObjectData(found=True, payload=obj.payload, checksum=fnv1a64(obj.payload)))


def fetch_object(locator: str, ref: ObjectRef, timeout: float = 10.0) -> bytes:
    """Retrieve an object payload straight from the node that holds it."""
    conn = dial(locator, timeout=timeout)
    try:
        conn.send(FetchObject(ref))
        reply = conn.recv()
    finally:
        conn.close()
    if not isinstance(reply, ObjectData):
        raise ProtocolError(f"expected OBJECT_DATA, got {type(reply).__name__}")
    if not reply.found:
        raise KeyError(f"object not found at {locator}: {ref}")
    if fnv1a64(reply.payload) != reply.checksum:
        raise ProtocolError(f"checksum mismatch fetching {ref}")
    return reply.payload
