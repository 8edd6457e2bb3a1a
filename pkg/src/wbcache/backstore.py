"""Backing mass-storage: a real filesystem implementation and a simulated
disk with configurable throughput and latency.

The simulated disk keeps a volatile "kernel page cache" view: pwrites are
immediately visible to preads, but only survive a simulated disk crash once
a sync covered them.  Costs are charged to a clock (wall or virtual), or to
an explicit cost sink when the deterministic bench engine is driving.
"""

from __future__ import annotations

import bisect
import errno
import os
import stat as stat_mod
import threading
import time
from dataclasses import dataclass

COST_PAGE = 4096  # granularity at which the kernel would flush dirty data


@dataclass(frozen=True)
class FileIdentity:
    dev: int
    ino: int


@dataclass(frozen=True)
class BackStat:
    size: int
    dev: int
    ino: int


class WallClock:
    def now(self) -> float:
        return time.monotonic()

    def sleep(self, dt: float) -> None:
        if dt > 0:
            time.sleep(dt)


class VirtualClock:
    """Logical clock for deterministic single-threaded simulation."""

    def __init__(self):
        self._now = 0.0

    def now(self) -> float:
        return self._now

    def sleep(self, dt: float) -> None:
        if dt > 0:
            self._now += dt


@dataclass(frozen=True)
class SimDiskConfig:
    throughput: float | None = None       # bytes/second drained per sync, None = instant
    per_sync_latency: float = 0.0         # seconds per sync call
    per_op_latency: float = 0.0           # seconds per pread/pwrite call
    store_data: bool = True               # keep payload bytes (off for perf runs)

    def __post_init__(self):
        if self.throughput is not None and self.throughput <= 0:
            raise ValueError("throughput must be positive")
        if self.per_sync_latency < 0 or self.per_op_latency < 0:
            raise ValueError("latencies must be non-negative")


class _SimFile:
    __slots__ = ("path", "ino", "data", "size", "synced_size", "dirty_pages",
                 "sync_ordinals", "exists", "is_block")

    def __init__(self, path, ino, is_block=True):
        self.path = path
        self.ino = ino
        self.data = bytearray()
        self.size = 0
        self.synced_size = 0
        self.dirty_pages: set[int] = set()
        self.sync_ordinals: list[int] = []
        self.exists = True
        self.is_block = is_block


class SimBackingFile:
    """Positional handle onto a simulated file."""

    def __init__(self, store: "SimBackstore", f: _SimFile):
        self._store = store
        self._f = f
        self.closed = False

    @property
    def path(self) -> str:
        return self._f.path

    def identity(self) -> FileIdentity:
        return FileIdentity(self._store.DEV, self._f.ino)

    def size(self) -> int:
        return self._f.size

    def pread(self, offset: int, length: int) -> bytes:
        st = self._store
        st.preads += 1
        st._charge(st.config.per_op_latency)
        f = self._f
        end = min(offset + length, f.size)
        if end <= offset:
            return b""
        if not st.config.store_data:
            return bytes(end - offset)
        return bytes(f.data[offset:end])

    def pwrite(self, offset: int, data: bytes) -> int:
        st = self._store
        if st.fail_next_writes > 0:
            st.fail_next_writes -= 1
            raise OSError(errno.EIO, "injected write failure")
        st.pwrites += 1
        st.bytes_written += len(data)
        st._charge(st.config.per_op_latency)
        f = self._f
        end = offset + len(data)
        if st.config.store_data:
            if end > len(f.data):
                f.data.extend(bytes(end - len(f.data)))
            f.data[offset:end] = data
        f.size = max(f.size, end)
        f.dirty_pages.update(range(offset // COST_PAGE, (end - 1) // COST_PAGE + 1))
        if st.history is not None:
            st.history.append(("w", st._ordinal(), f.path, offset, bytes(data)))
        return len(data)

    def sync(self) -> None:
        st = self._store
        st.syncs += 1
        f = self._f
        cost = st.config.per_sync_latency
        if st.config.throughput is not None:
            cost += len(f.dirty_pages) * COST_PAGE / st.config.throughput
        st._charge(cost)
        f.dirty_pages.clear()
        f.synced_size = f.size
        if st.history is not None:
            stamp = st._ordinal()
            f.sync_ordinals.append((len(st.history), stamp))
            st.history.append(("s", stamp, f.path, 0, b""))

    def truncate(self, length: int) -> None:
        f = self._f
        if self._store.config.store_data:
            del f.data[length:]
        f.size = min(f.size, length)
        f.synced_size = min(f.synced_size, length)

    def flock(self, op: str) -> None:
        self._store.flock_ops.append((self._f.path, op))

    def close(self) -> None:
        self.closed = True


class SimBackstore:
    """In-memory file store with a latency/throughput cost model."""

    DEV = 0x51

    def __init__(self, config: SimDiskConfig | None = None, clock=None,
                 record_history: bool = False, ordinal_source=None):
        self.config = config or SimDiskConfig()
        self.clock = clock or WallClock()
        self.cost_sink = None
        self.files: dict[str, _SimFile] = {}
        self.history: list[tuple] | None = [] if record_history else None
        self._baseline: dict[str, bytes] = {}
        self._ordinal_source = ordinal_source
        self._local_ordinal = 0
        self._mu = threading.Lock()
        self._next_ino = 1
        self.preads = self.pwrites = self.syncs = 0
        self.bytes_written = 0
        self.flock_ops: list[tuple[str, str]] = []
        self.fail_next_writes = 0  # fault injection for cleaner retry tests

    def _ordinal(self) -> int:
        if self._ordinal_source is not None:
            return self._ordinal_source()
        self._local_ordinal += 1
        return self._local_ordinal

    def _charge(self, cost: float) -> None:
        if cost <= 0:
            return
        if self.cost_sink is not None:
            self.cost_sink(cost)
        else:
            self.clock.sleep(cost)

    # -- namespace ----------------------------------------------------------

    def create_char_device(self, path: str) -> None:
        with self._mu:
            f = _SimFile(path, self._next_ino, is_block=False)
            self._next_ino += 1
            self.files[path] = f

    def seed_file(self, path: str, size: int, data: bytes | None = None) -> None:
        """Pre-populate a synced file, bypassing the cost model."""
        with self._mu:
            f = self.files.get(path)
            if f is None:
                f = _SimFile(path, self._next_ino)
                self._next_ino += 1
                self.files[path] = f
            if data is not None:
                f.data = bytearray(data)
                size = max(size, len(data))
            elif self.config.store_data:
                f.data = bytearray(size)
            f.size = f.synced_size = size
            if self.history is not None:
                self._baseline[path] = bytes(f.data)

    def is_block_backed(self, path: str) -> bool:
        f = self.files.get(path)
        return f.is_block if f is not None else True

    def stat(self, path: str) -> BackStat:
        f = self.files.get(path)
        if f is None or not f.exists:
            raise FileNotFoundError(errno.ENOENT, "no such simulated file", path)
        return BackStat(f.size, self.DEV, f.ino)

    def open(self, path: str, create: bool = False,
             truncate: bool = False) -> SimBackingFile:
        with self._mu:
            f = self.files.get(path)
            if f is None or not f.exists:
                if not create:
                    raise FileNotFoundError(errno.ENOENT, "no such simulated file",
                                            path)
                f = _SimFile(path, self._next_ino)
                self._next_ino += 1
                self.files[path] = f
        handle = SimBackingFile(self, f)
        if truncate:
            handle.truncate(0)
        return handle

    # -- crash modelling -------------------------------------------------------

    def snapshot_at(self, point: int, drop_unsynced: bool = True
                    ) -> dict[str, bytes]:
        """File contents a disk crash at the given ordinal would preserve."""
        if self.history is None:
            raise RuntimeError("snapshotting requires record_history=True")
        out = {path: bytearray(self._baseline.get(path, b""))
               for path in self.files}
        for seq, record in enumerate(self.history):
            kind, stamp, path, offset, data = record
            if stamp > point or kind != "w":
                continue
            if drop_unsynced:
                # kept only if a sync of this file followed the write in
                # program order and landed at or before the crash
                marks = self.files[path].sync_ordinals
                i = bisect.bisect_right(marks, (seq, float("inf")))
                if not (i < len(marks) and marks[i][1] <= point):
                    continue
            buf = out.setdefault(path, bytearray())
            end = offset + len(data)
            if end > len(buf):
                buf.extend(bytes(end - len(buf)))
            buf[offset:end] = data
        return {path: bytes(buf) for path, buf in out.items()}


class RealBackingFile:
    def __init__(self, store: "RealBackstore", path: str, fd: int):
        self._store = store
        self.path = path
        self._fd = fd
        self.closed = False

    def identity(self) -> FileIdentity:
        st = os.fstat(self._fd)
        return FileIdentity(st.st_dev, st.st_ino)

    def size(self) -> int:
        return os.fstat(self._fd).st_size

    def pread(self, offset: int, length: int) -> bytes:
        self._store.preads += 1
        return os.pread(self._fd, length, offset)

    def pwrite(self, offset: int, data: bytes) -> int:
        self._store.pwrites += 1
        self._store.bytes_written += len(data)
        return os.pwrite(self._fd, data, offset)

    def sync(self) -> None:
        self._store.syncs += 1
        os.fsync(self._fd)

    def truncate(self, length: int) -> None:
        os.ftruncate(self._fd, length)

    def flock(self, op: str) -> None:
        import fcntl
        flags = {"lock_sh": fcntl.LOCK_SH, "lock_ex": fcntl.LOCK_EX,
                 "unlock": fcntl.LOCK_UN}[op]
        fcntl.flock(self._fd, flags)

    def close(self) -> None:
        if not self.closed:
            os.close(self._fd)
            self.closed = True


class RealBackstore:
    """Thin positional-I/O wrapper over the host filesystem."""

    def __init__(self):
        self.preads = self.pwrites = self.syncs = 0
        self.bytes_written = 0

    def stat(self, path: str) -> BackStat:
        st = os.stat(path)
        return BackStat(st.st_size, st.st_dev, st.st_ino)

    def is_block_backed(self, path: str) -> bool:
        try:
            mode = os.stat(path).st_mode
        except FileNotFoundError:
            return True  # to-be-created regular file
        return stat_mod.S_ISREG(mode) or stat_mod.S_ISBLK(mode)

    def open(self, path: str, create: bool = False,
             truncate: bool = False) -> RealBackingFile:
        flags = os.O_RDWR
        if create:
            flags |= os.O_CREAT
        if truncate:
            flags |= os.O_TRUNC
        fd = os.open(path, flags, 0o644)
        return RealBackingFile(self, path, fd)
