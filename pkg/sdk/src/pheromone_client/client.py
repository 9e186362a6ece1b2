"""Synchronous coordinator client: register apps, configure triggers, invoke."""

from __future__ import annotations

import os
import socket
import struct
import time
from typing import Optional, Sequence

from . import wire

ENV_COORDINATORS = "PHEROMONE_COORDINATORS"


class Client:
    """Single-connection-per-shard synchronous client; not thread-safe.

    Coordinator addresses come from the constructor or the
    PHEROMONE_COORDINATORS environment variable (comma-separated host:port,
    one per shard, in shard order).
    """

    def __init__(self, coordinators: Optional[Sequence[str]] = None,
                 connect_timeout: float = 10.0) -> None:
        if coordinators is None:
            raw = os.environ.get(ENV_COORDINATORS, "")
            coordinators = [a for a in raw.split(",") if a]
        if not coordinators:
            raise ValueError(f"no coordinators given and {ENV_COORDINATORS} is unset")
        self.coordinators = list(coordinators)
        self._timeout = connect_timeout
        self._socks: dict[int, socket.socket] = {}

    # -- plumbing ---------------------------------------------------------------

    def _sock_for(self, app: str) -> socket.socket:
        shard = wire.shard_of(app, len(self.coordinators))
        sock = self._socks.get(shard)
        if sock is None:
            host, _, port = self.coordinators[shard].rpartition(":")
            sock = socket.create_connection((host or "127.0.0.1", int(port)),
                                            timeout=self._timeout)
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._socks[shard] = sock
        return sock

    def _rpc(self, app: str, frame_bytes: bytes):
        sock = self._sock_for(app)
        sock.sendall(frame_bytes)
        header = self._recv_exact(sock, 4)
        (total,) = struct.unpack(">I", header)
        return wire.decode_reply(self._recv_exact(sock, total))

    @staticmethod
    def _recv_exact(sock: socket.socket, n: int) -> bytes:
        chunks = []
        got = 0
        while got < n:
            chunk = sock.recv(n - got)
            if not chunk:
                raise ConnectionError("coordinator closed the connection")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def close(self) -> None:
        for sock in self._socks.values():
            sock.close()
        self._socks.clear()

    # -- API --------------------------------------------------------------------

    def register_app(self, name: str, functions: Sequence[str],
                     dependencies: Optional[list] = None) -> None:
        self._rpc(name, wire.encode_register_app(name, list(functions), dependencies))

    def create_bucket(self, app: str, bucket: str) -> None:
        self._rpc(app, wire.encode_create_bucket(app, bucket))

    def add_trigger(self, app: str, bucket: str, trigger_name: str, kind: int,
                    prim_meta: dict, hints=None) -> None:
        self._rpc(app, wire.encode_add_trigger(app, bucket, trigger_name, kind,
                                               prim_meta, hints))

    def call_app(self, app: str, invocations: Sequence[tuple], session: str = "",
                 keep_open: bool = False) -> str:
        frame_bytes = wire.encode_call_app(
            app, [(f, list(args)) for f, args in invocations], session, keep_open)
        _, value = self._rpc(app, frame_bytes)
        return value

    def close_session(self, session: str) -> None:
        app = session.split("/", 1)[0]
        self._rpc(app, wire.encode_call_app(app, [], session, keep_open=False))

    def configure_join(self, app: str, bucket: str, trigger: str, session: str,
                       keys: Optional[list[str]] = None,
                       count: Optional[int] = None) -> None:
        self._rpc(app, wire.encode_configure_join(app, bucket, trigger, session,
                                                  keys, count))

    def collect_outputs(self, session: str) -> tuple[list[tuple[str, str, bytes]], bool]:
        app = session.split("/", 1)[0]
        _, payload = self._rpc(app, wire.encode_collect_outputs(session))
        return payload

    def list_triggers(self, app: str) -> list[dict]:
        _, triggers = self._rpc(app, wire.encode_list_triggers(app))
        return triggers

    def wait_complete(self, session: str, timeout: float = 30.0):
        deadline = time.monotonic() + timeout
        entries, complete = [], False
        while time.monotonic() < deadline:
            entries, complete = self.collect_outputs(session)
            if complete:
                return entries
            time.sleep(0.01)
        raise TimeoutError(f"session {session} incomplete after {timeout}s "
                           f"({len(entries)} outputs)")
