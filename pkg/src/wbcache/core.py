"""POSIX-like file-operation facade over the persistent write log and the
volatile read cache.

Writes are split at page boundaries; the atomic locks of every touched page
are taken in ascending page order, entries are appended (one per page
segment, grouped when a segment exceeds the entry payload), and the call
returns only after the commit flag's drain, so an acknowledged write is
durable.  Reads serve loaded pages from the cache, load clean pages from
the backing store, and reconstruct dirty pages from backing bytes plus the
pending log entries.  fsync and friends are no-ops by design.

Cursor and size live here, not in the backing store, because the backing
view lags until the cleaner catches up.
"""

from __future__ import annotations

import errno
import heapq
import threading

from .backstore import BackStat
from .cleaner import BatchPolicy, Cleaner
from .locks import LockRegistry
from .rcache import (UNLOADED_CLEAN, UNLOADED_DIRTY, LruQueue, PageDescriptor,
                     RadixTree, TransitionRecorder, apply_write_to_loaded,
                     dirty_miss, load_clean)
from .wlog import FD_MAX, MAGIC, WriteLog

SEEK_SET, SEEK_CUR, SEEK_END = 0, 1, 2

_MODES = {
    "r": (True, False, False, False, False, False),
    "r+": (True, True, False, False, False, False),
    "w": (False, True, True, True, False, False),
    "w+": (True, True, True, True, False, False),
    "a": (False, True, True, False, True, False),
    "a+": (True, True, True, False, True, False),
    "x": (False, True, True, False, False, True),
    "x+": (True, True, True, False, False, True),
}


class NeedsRecovery(Exception):
    """The attached log still holds committed entries; run recovery first."""


class FileRecord:
    """Per-inode state shared by every open of the same file."""

    __slots__ = ("identity", "path", "backing", "size", "tree", "refcount",
                 "fd_slots", "mu")

    def __init__(self, identity, path, backing, size):
        self.identity = identity
        self.path = path
        self.backing = backing
        self.size = size
        self.tree: RadixTree | None = None
        self.refcount = 0
        self.fd_slots: set[int] = set()
        self.mu = threading.Lock()


class OpenedFile:
    """Per-descriptor state: cursor, mode, link to the file record."""

    __slots__ = ("fd", "file", "readable", "writable", "append", "cursor",
                 "cursor_mu", "closed", "passthrough")

    def __init__(self, fd, file, readable, writable, append, passthrough=None):
        self.fd = fd
        self.file = file
        self.readable = readable
        self.writable = writable
        self.append = append
        self.cursor = 0
        self.cursor_mu = threading.Lock()
        self.closed = False
        self.passthrough = passthrough  # raw backing handle for non-block paths


def _split_pages(offset: int, data: bytes, page_size: int):
    """Page-aligned segments of a write, ascending."""
    out = []
    pos = 0
    while pos < len(data):
        page_no = (offset + pos) // page_size
        take = min(len(data) - pos, (page_no + 1) * page_size - (offset + pos))
        out.append((page_no, offset + pos, data[pos:pos + take]))
        pos += take
    return out


class WriteBackCache:
    """One cache instance per log region; safe for many threads."""

    def __init__(self, region, backstore, *, entry_data_size: int = 4096,
                 nb_entries: int = 4096, page_size: int = 4096,
                 cache_pages: int = 1024, batch: BatchPolicy | None = None,
                 instrument: bool = False, record_transitions: bool = False,
                 start_cleaner: bool = True, alloc_timeout: float | None = None):
        if page_size & (page_size - 1):
            raise ValueError("page size must be a power of two")
        self.backstore = backstore
        self.page_size = page_size
        self.alloc_timeout = alloc_timeout
        if region.read(0, 4) == MAGIC:
            self.log = WriteLog.attach(region)
            self._require_clean()
        else:
            self.log = WriteLog.create(region, entry_data_size, nb_entries)
        self.entry_data_size = self.log.entry_data_size
        self.registry = LockRegistry(instrument)
        self.recorder = TransitionRecorder() if record_transitions else None
        self.lru = LruQueue(cache_pages, page_size, self.registry, self.recorder)
        self._file_table: dict = {}
        self._opened: dict[int, OpenedFile] = {}
        self._free_fds: list[int] = []
        self._next_fd = 0
        self._tables_mu = threading.Lock()
        self.fsync_noops = 0
        self.sync_noops = 0
        self.bypass_reads = 0
        self.cleaner = Cleaner(self.log, self._resolve_target, batch, page_size)
        if instrument:
            self.cleaner.on_thread_start = \
                lambda: self.registry.set_role("cleaner")
        if start_cleaner:
            self.cleaner.start()

    def _require_clean(self) -> None:
        for slot in range(self.log.nb_entries):
            _, allocated, _ = self.log.read_meta(slot)
            if allocated:
                raise NeedsRecovery("log holds entries from a previous run")

    def _resolve_target(self, file_id: int):
        of = self._opened.get(file_id)
        if of is None:
            raise RuntimeError(f"log entry cites unknown descriptor {file_id}")
        return of.file, of.file.backing

    # -- descriptor table ------------------------------------------------------

    def _alloc_fd(self) -> int:
        if self._free_fds:
            return heapq.heappop(self._free_fds)
        if self._next_fd >= FD_MAX:
            raise OSError(errno.ENFILE, "descriptor table (path table) is full")
        fd = self._next_fd
        self._next_fd += 1
        return fd

    def _of(self, fd: int) -> OpenedFile:
        of = self._opened.get(fd)
        if of is None or of.closed:
            raise OSError(errno.EBADF, f"bad file descriptor {fd}")
        return of

    # -- open/close ---------------------------------------------------------------

    def open(self, path: str, mode: str = "r") -> int:
        try:
            readable, writable, create, truncate, append, exclusive = _MODES[mode]
        except KeyError:
            raise ValueError(f"unsupported open mode {mode!r}") from None
        if not self.backstore.is_block_backed(path):
            # character devices, pipes and friends bypass the cache entirely
            handle = self.backstore.open(path, create=create)
            with self._tables_mu:
                fd = self._alloc_fd()
                of = OpenedFile(fd, None, readable, writable, append,
                                passthrough=handle)
                self._opened[fd] = of
            return fd
        with self._tables_mu:
            try:
                st = self.backstore.stat(path)
                exists = True
            except FileNotFoundError:
                exists = False
            if exists and exclusive:
                raise FileExistsError(errno.EEXIST, "file exists", path)
            if not exists and not create:
                raise FileNotFoundError(errno.ENOENT, "no such file", path)
            record = None
            if exists:
                record = self._file_table.get((st.dev, st.ino))
            if record is not None and truncate:
                raise OSError(errno.EBUSY,
                              "truncating an open file is not supported")
            if record is None:
                backing = self.backstore.open(path, create=create,
                                              truncate=truncate)
                identity = backing.identity()
                record = FileRecord((identity.dev, identity.ino), path, backing,
                                    0 if truncate else backing.size())
                self._file_table[record.identity] = record
            fd = self._alloc_fd()
            of = OpenedFile(fd, record, readable, writable, append)
            record.refcount += 1
            record.fd_slots.add(fd)
            self._opened[fd] = of
            if writable:
                if record.tree is None:
                    record.tree = RadixTree(self._descriptor_factory(record))
                self.log.bind_path(fd, path)
        return fd

    def _descriptor_factory(self, record: FileRecord):
        registry = self.registry

        def make(page_no: int) -> PageDescriptor:
            return PageDescriptor(page_no, record, registry)

        return make

    def close(self, fd: int) -> None:
        with self._tables_mu:
            of = self._opened.get(fd)
            if of is None or of.closed:
                raise OSError(errno.EBADF, f"bad file descriptor {fd}")
            of.closed = True
        if of.passthrough is not None:
            of.passthrough.close()
            with self._tables_mu:
                del self._opened[fd]
                heapq.heappush(self._free_fds, fd)
            return
        if of.writable:
            # wait until every logged entry citing this slot hit the backing
            # store and was synced, then the slot can be recycled
            self.cleaner.drain_barrier()
            self.log.release_path(fd)
        last = False
        record = of.file
        with self._tables_mu:
            del self._opened[fd]
            heapq.heappush(self._free_fds, fd)
            record.fd_slots.discard(fd)
            record.refcount -= 1
            if record.refcount == 0:
                del self._file_table[record.identity]
                last = True
        if last:
            self.lru.purge_file(record)
            if record.tree is not None:
                record.tree.drop()
                record.tree = None
            record.backing.close()

    # -- data path -------------------------------------------------------------

    def write(self, fd: int, data) -> int:
        of = self._of(fd)
        data = bytes(data)
        with of.cursor_mu:
            if of.append and of.passthrough is None:
                with of.file.mu:
                    offset = of.file.size
                    of.file.size = offset + len(data)  # reserve for appenders
            else:
                offset = of.cursor
            n = self._write_at(of, offset, data)
            of.cursor = offset + n
        return n

    def pwrite(self, fd: int, data, offset: int) -> int:
        if offset < 0:
            raise OSError(errno.EINVAL, "negative offset")
        return self._write_at(self._of(fd), offset, bytes(data))

    def _write_at(self, of: OpenedFile, offset: int, data: bytes) -> int:
        if not of.writable:
            raise OSError(errno.EBADF, "descriptor not open for writing")
        if not data:
            return 0
        if of.passthrough is not None:
            return of.passthrough.pwrite(offset, data)
        record = of.file
        segments = _split_pages(offset, data, self.page_size)
        descs = [record.tree.get_or_create(page_no) for page_no, _, _ in segments]
        for desc in descs:
            desc.atomic_lock.acquire()
        try:
            for desc, (page_no, seg_off, seg_data) in zip(descs, segments):
                if len(seg_data) <= self.entry_data_size:
                    self.log.append_single(of.fd, seg_off, seg_data,
                                           self.alloc_timeout)
                    entries = 1
                else:
                    self.log.append_group(of.fd, seg_off, seg_data,
                                          self.alloc_timeout)
                    entries = -(-len(seg_data) // self.entry_data_size)
                if (self.recorder is not None and desc.content is None
                        and desc.dirty_counter.value == 0):
                    self.recorder.note(page_no, UNLOADED_CLEAN, UNLOADED_DIRTY)
                desc.dirty_counter.add(entries)
                apply_write_to_loaded(desc, seg_off % self.page_size, seg_data)
        finally:
            for desc in reversed(descs):
                desc.atomic_lock.release()
        with record.mu:
            if offset + len(data) > record.size:
                record.size = offset + len(data)
        return len(data)

    def read(self, fd: int, length: int) -> bytes:
        of = self._of(fd)
        with of.cursor_mu:
            data = self._read_at(of, of.cursor, length)
            of.cursor += len(data)
        return data

    def pread(self, fd: int, length: int, offset: int) -> bytes:
        if offset < 0:
            raise OSError(errno.EINVAL, "negative offset")
        return self._read_at(self._of(fd), offset, length)

    def _read_at(self, of: OpenedFile, offset: int, length: int) -> bytes:
        if not of.readable:
            raise OSError(errno.EBADF, "descriptor not open for reading")
        if length <= 0:
            return b""
        if of.passthrough is not None:
            return of.passthrough.pread(offset, length)
        record = of.file
        end = min(offset + length, record.size)
        if end <= offset:
            return b""
        if record.tree is None:
            # never opened writable: the backing view is fresh, skip the cache
            self.bypass_reads += 1
            raw = record.backing.pread(offset, end - offset)
            return raw + bytes(end - offset - len(raw))
        out = bytearray(end - offset)
        pages = range(offset // self.page_size, (end - 1) // self.page_size + 1)
        descs = [record.tree.get_or_create(p) for p in pages]
        for desc in descs:
            desc.atomic_lock.acquire()
        try:
            for desc, page_no in zip(descs, pages):
                if desc.content is None:
                    if desc.dirty_counter.value == 0:
                        load_clean(desc, record, page_no, self.lru,
                                   recorder=self.recorder)
                    else:
                        desc.cleanup_lock.acquire()
                        try:
                            dirty_miss(desc, record, page_no, self.log, self.lru,
                                       recorder=self.recorder)
                        finally:
                            desc.cleanup_lock.release()
                lo = max(offset, page_no * self.page_size)
                hi = min(end, (page_no + 1) * self.page_size)
                in_page = lo - page_no * self.page_size
                out[lo - offset:hi - offset] = \
                    desc.content.data[in_page:in_page + (hi - lo)]
                desc.accessed = True
        finally:
            for desc in reversed(descs):
                desc.atomic_lock.release()
        return bytes(out)

    # -- metadata ---------------------------------------------------------------

    def lseek(self, fd: int, offset: int, whence: int = SEEK_SET) -> int:
        of = self._of(fd)
        with of.cursor_mu:
            if whence == SEEK_SET:
                base = 0
            elif whence == SEEK_CUR:
                base = of.cursor
            elif whence == SEEK_END:
                base = of.passthrough.size() if of.passthrough is not None \
                    else of.file.size
            else:
                raise OSError(errno.EINVAL, f"bad whence {whence}")
            target = base + offset
            if target < 0:
                raise OSError(errno.EINVAL, "seek before start of file")
            of.cursor = target
            return target

    seek = lseek

    def tell(self, fd: int) -> int:
        return self._of(fd).cursor

    def stat(self, path: str):
        st = self.backstore.stat(path)
        with self._tables_mu:
            record = self._file_table.get((st.dev, st.ino))
        if record is not None:
            return type(st)(record.size, st.dev, st.ino)
        return st

    def fstat(self, fd: int):
        of = self._of(fd)
        if of.passthrough is not None:
            ident = of.passthrough.identity()
            return BackStat(of.passthrough.size(), ident.dev, ident.ino)
        record = of.file
        return BackStat(record.size, *record.identity)

    # -- sync family: intentionally inert -------------------------------------------

    def fsync(self, fd: int) -> int:
        self._of(fd)
        self.fsync_noops += 1
        return 0

    fdatasync = fsync

    def sync(self) -> None:
        self.sync_noops += 1

    def syncfs(self, fd: int) -> int:
        self._of(fd)
        self.sync_noops += 1
        return 0

    # -- locking --------------------------------------------------------------------

    def flock(self, fd: int, op: str) -> None:
        of = self._of(fd)
        if of.passthrough is not None:
            of.passthrough.flock(op)
            return
        if op == "unlock":
            # same flush barrier as close, without giving up the handle
            self.cleaner.drain_barrier()
        of.file.backing.flock(op)

    # -- unbuffered stdio-style aliases ----------------------------------------------

    def fopen(self, path: str, mode: str = "r") -> int:
        return self.open(path, mode)

    def fread(self, fd: int, length: int) -> bytes:
        return self.read(fd, length)

    def fwrite(self, fd: int, data) -> int:
        return self.write(fd, data)

    def fclose(self, fd: int) -> None:
        self.close(fd)

    def ftell(self, fd: int) -> int:
        return self.tell(fd)

    # -- lifecycle --------------------------------------------------------------------

    def close_all(self) -> None:
        for fd in sorted(list(self._opened)):
            of = self._opened.get(fd)
            if of is not None and not of.closed:
                self.close(fd)

    def shutdown(self) -> None:
        self.close_all()
        if self.cleaner.running:
            try:
                self.cleaner.drain_barrier()
            finally:
                self.cleaner.stop()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()
        return False

    def metrics(self) -> dict:
        out = self.cleaner.metrics()
        out.update({
            "fsync_noops": self.fsync_noops,
            "sync_noops": self.sync_noops,
            "bypass_reads": self.bypass_reads,
            "loaded_pages": self.lru.loaded,
            "evictions": self.lru.evictions,
            "open_files": len(self._opened),
            "log_head": self.log.head,
        })
        return out
