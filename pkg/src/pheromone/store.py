"""Per-node in-memory object store with spill, reclamation, and a durable backend.

Local handoff never copies payload bytes: senders and consumers share the same
immutable bytes object. `copy_counter` tracks every payload byte that does get
copied (spill writes and spill reloads), which the zero-copy tests assert on.
"""

from __future__ import annotations

import base64
import os
import tempfile
import threading
from enum import Enum
from typing import Callable, Optional

from .core import DataObject, ObjectRef, StoreError

DEFAULT_BUDGET = 512 * 1024 * 1024

OUT_PREFIX = "out"
SPILL_PREFIX = "spill"
CKPT_PREFIX = "ckpt"
ARGS_PREFIX = "args"


def out_key(ref: ObjectRef) -> str:
    return f"{OUT_PREFIX}/{ref.session}/{ref.bucket}/{ref.key}"


def spill_key(ref: ObjectRef) -> str:
    return f"{SPILL_PREFIX}/{ref.session}/{ref.bucket}/{ref.key}"


class DurableStore:
    """Pluggable durable key-value backend. Read-your-writes per client."""

    def put(self, key: str, value: bytes) -> None:
        raise NotImplementedError

    def get(self, key: str) -> Optional[bytes]:
        raise NotImplementedError

    def delete(self, key: str) -> None:
        raise NotImplementedError

    def scan_prefix(self, prefix: str) -> list[str]:
        raise NotImplementedError


class FileDurableStore(DurableStore):
    """One file per key under a root directory; atomic via write-to-temp + rename."""

    def __init__(self, root: str) -> None:
        self.root = root
        os.makedirs(root, exist_ok=True)

    def _path(self, key: str) -> str:
        name = base64.urlsafe_b64encode(key.encode()).decode()
        return os.path.join(self.root, name)

    def put(self, key: str, value: bytes) -> None:
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(value)
            os.replace(tmp, self._path(key))
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def get(self, key: str) -> Optional[bytes]:
        try:
            with open(self._path(key), "rb") as f:
                return f.read()
        except FileNotFoundError:
            return None

    def delete(self, key: str) -> None:
        try:
            os.unlink(self._path(key))
        except FileNotFoundError:
            pass

    def scan_prefix(self, prefix: str) -> list[str]:
        keys = []
        for name in os.listdir(self.root):
            if name.startswith(".tmp-"):
                continue
            try:
                key = base64.urlsafe_b64decode(name.encode()).decode()
            except Exception:
                continue
            if key.startswith(prefix):
                keys.append(key)
        return sorted(keys)


class MemoryDurableStore(DurableStore):
    """Dict-backed durable store for tests."""

    def __init__(self) -> None:
        self._data: dict[str, bytes] = {}
        self._lock = threading.Lock()

    def put(self, key: str, value: bytes) -> None:
        with self._lock:
            self._data[key] = bytes(value)

    def get(self, key: str) -> Optional[bytes]:
        with self._lock:
            return self._data.get(key)

    def delete(self, key: str) -> None:
        with self._lock:
            self._data.pop(key, None)

    def scan_prefix(self, prefix: str) -> list[str]:
        with self._lock:
            return sorted(k for k in self._data if k.startswith(prefix))


class Placement(Enum):
    MEMORY = 1
    SPILLED = 2


class ObjectStore:
    """Node-local store of session-scoped objects with a memory budget."""

    def __init__(
        self,
        durable: DurableStore,
        budget: int = DEFAULT_BUDGET,
        on_ready: Optional[Callable[[ObjectRef, str], None]] = None,
        bucket_validator: Optional[Callable[[str, str], bool]] = None,
    ) -> None:
        self.durable = durable
        self.budget = budget
        self.on_ready = on_ready
        self.bucket_validator = bucket_validator
        self._lock = threading.RLock()
        self._live: dict[ObjectRef, DataObject] = {}
        self._pending: dict[ObjectRef, DataObject] = {}  # created, not yet sent
        self._spilled: set[ObjectRef] = set()
        self.bytes_live = 0
        self.copy_counter = 0

    # -- lifecycle -------------------------------------------------------------

    def create_object(self, bucket: str, key: str, session: str, producer: str = "",
                      size_hint: int = 0, created_at: int = 0) -> DataObject:
        ref = ObjectRef(bucket, key, session)
        if self.bucket_validator is not None and not self.bucket_validator(session, bucket):
            raise StoreError(f"unknown bucket {bucket!r} for session {session!r}")
        with self._lock:
            if ref in self._live or ref in self._pending or ref in self._spilled:
                raise StoreError(f"object {ref} already exists")
            obj = DataObject(ref, producer, created_at, size_hint)
            self._pending[ref] = obj
            return obj

    def send_object(self, obj: DataObject, output: bool = False) -> Placement:
        with self._lock:
            if obj.ready:
                raise StoreError(f"object {obj.ref} already sent")
            if self._pending.pop(obj.ref, None) is None:
                raise StoreError(f"object {obj.ref} was not created in this store")
            obj.ready = True
            obj.persist = output
            placement = self._admit_or_spill(obj)
        if output:
            self.durable.put(out_key(obj.ref), obj.payload)
        if self.on_ready is not None:
            self.on_ready(obj.ref, obj.producer)
        return placement

    def _admit_or_spill(self, obj: DataObject) -> Placement:
        if self.bytes_live + obj.size <= self.budget:
            self._live[obj.ref] = obj
            self.bytes_live += obj.size
            return Placement.MEMORY
        self.durable.put(spill_key(obj.ref), obj.payload)
        self.copy_counter += obj.size
        self._spilled.add(obj.ref)
        return Placement.SPILLED

    def get_object(self, bucket: str, key: str, session: str) -> Optional[DataObject]:
        ref = ObjectRef(bucket, key, session)
        with self._lock:
            obj = self._live.get(ref)
            if obj is not None:
                return obj
            spilled = ref in self._spilled
        if not spilled:
            return None
        payload = self.durable.get(spill_key(ref))
        if payload is None:
            return None
        with self._lock:
            self.copy_counter += len(payload)
        reloaded = DataObject(ref, "", 0)
        reloaded.payload = payload
        reloaded.ready = True
        return reloaded

    def get_ready(self, ref: ObjectRef) -> Optional[DataObject]:
        return self.get_object(ref.bucket, ref.key, ref.session)

    # -- reclamation -------------------------------------------------------------

    def reclaim_session(self, session: str) -> int:
        """Remove the session's ephemeral objects; durable outputs stay."""
        with self._lock:
            freed = 0
            for ref in [r for r in self._live if r.session == session]:
                freed += self._live.pop(ref).size
            self.bytes_live -= freed
            for ref in [r for r in self._pending if r.session == session]:
                del self._pending[ref]
            spilled = [r for r in self._spilled if r.session == session]
            self._spilled.difference_update(spilled)
        for ref in spilled:
            self.durable.delete(spill_key(ref))
        return freed

    # -- introspection -------------------------------------------------------------

    def session_object_counts(self) -> dict[str, int]:
        with self._lock:
            counts: dict[str, int] = {}
            for ref in self._live:
                counts[ref.session] = counts.get(ref.session, 0) + 1
            for ref in self._spilled:
                counts[ref.session] = counts.get(ref.session, 0) + 1
            return counts

    def session_refs(self, session: str) -> list[ObjectRef]:
        with self._lock:
            live = [r for r in self._live if r.session == session]
            return live + [r for r in self._spilled if r.session == session]

    def holds(self, ref: ObjectRef) -> bool:
        with self._lock:
            return ref in self._live or ref in self._spilled

    def verify_conservation(self) -> bool:
        with self._lock:
            return self.bytes_live == sum(o.size for o in self._live.values())
