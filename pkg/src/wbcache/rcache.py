"""Volatile read cache: radix tree of page descriptors, page contents, the
dirty-miss reconstruction procedure and a second-chance LRU.

A page is in one of three states.  Loaded: a content buffer is attached
and always holds the freshest bytes (acknowledged writes applied).
Unloaded-clean: no buffer, and the backing view is current.  Unloaded-dirty:
no buffer, and the log still holds entries modifying the page, counted by
the per-page dirty counter.  Eviction never writes to the backing store; a
dirty page is simply detached and reconstructed on the next miss.
"""

from __future__ import annotations

import threading
import time
from collections import deque

from .locks import make_lock

LOADED = "loaded"
UNLOADED_CLEAN = "unloaded-clean"
UNLOADED_DIRTY = "unloaded-dirty"

# the five legal transitions of the page state machine
ALLOWED_TRANSITIONS = {
    (UNLOADED_CLEAN, LOADED),         # clean miss load
    (UNLOADED_DIRTY, LOADED),         # dirty miss reconstruction
    (LOADED, UNLOADED_CLEAN),         # eviction, no pending entries
    (LOADED, UNLOADED_DIRTY),         # eviction with pending entries
    (UNLOADED_CLEAN, UNLOADED_DIRTY),  # write to an absent page
}


class TransitionRecorder:
    """Debug mode: collects every page state transition for later checking."""

    def __init__(self):
        self.events: list[tuple[int, str, str]] = []
        self._mu = threading.Lock()

    def note(self, page_no: int, src: str, dst: str) -> None:
        with self._mu:
            self.events.append((page_no, src, dst))


class AtomicInt:
    """Signed counter updated with atomic read-modify-write semantics."""

    __slots__ = ("_v", "_mu")

    def __init__(self, value: int = 0):
        self._v = value
        self._mu = threading.Lock()

    def add(self, delta: int) -> int:
        with self._mu:
            self._v += delta
            return self._v

    @property
    def value(self) -> int:
        return self._v


class PageContent:
    """A reusable page-sized buffer, linked back to its descriptor while loaded."""

    __slots__ = ("data", "desc")

    def __init__(self, page_size: int):
        self.data = bytearray(page_size)
        self.desc: PageDescriptor | None = None


class PageDescriptor:
    __slots__ = ("page_no", "file", "atomic_lock", "cleanup_lock",
                 "dirty_counter", "accessed", "content")

    def __init__(self, page_no: int, file=None, registry=None):
        self.page_no = page_no
        self.file = file
        self.atomic_lock = make_lock(registry, "atomic", page_no)
        self.cleanup_lock = make_lock(registry, "cleanup", page_no)
        self.dirty_counter = AtomicInt(0)
        self.accessed = False
        self.content: PageContent | None = None

    def state(self) -> str:
        if self.content is not None:
            return LOADED
        return UNLOADED_DIRTY if self.dirty_counter.value > 0 else UNLOADED_CLEAN


class RadixTree:
    """Fixed-fanout tree keyed by page number; nodes are only ever added.

    Creation relies on dict.setdefault being atomic under the interpreter
    lock: racing creators both offer a fully initialized node and converge
    on whichever one was installed, so lookups never see a partial node.
    """

    FANOUT_BITS = 9
    DEPTH = 7
    MAX_PAGE = (1 << (FANOUT_BITS * DEPTH)) - 1

    def __init__(self, make_descriptor):
        self._make = make_descriptor
        self.root: dict = {}

    def _digits(self, page_no: int):
        for level in range(self.DEPTH):
            yield (page_no >> (self.FANOUT_BITS * (self.DEPTH - 1 - level))) \
                & ((1 << self.FANOUT_BITS) - 1)

    def get(self, page_no: int) -> PageDescriptor | None:
        node = self.root
        for digit in self._digits(page_no):
            node = node.get(digit)
            if node is None:
                return None
        return node

    def get_or_create(self, page_no: int) -> PageDescriptor:
        if not 0 <= page_no <= self.MAX_PAGE:
            raise ValueError("page number out of tree range")
        node = self.root
        digits = list(self._digits(page_no))
        for digit in digits[:-1]:
            child = node.get(digit)
            if child is None:
                child = node.setdefault(digit, {})
            node = child
        leaf = node.get(digits[-1])
        if leaf is None:
            leaf = node.setdefault(digits[-1], self._make(page_no))
        return leaf

    def drop(self) -> None:
        self.root = {}


class LruQueue:
    """Second-chance queue of page contents, capacity-bounded.

    Victim descriptors are only try-locked: the caller already holds atomic
    locks of the pages it is operating on, so blocking here could deadlock.
    A busy victim is re-enqueued and the scan continues; termination holds
    because accessed flags are cleared on re-enqueue and lock holders do not
    wait on the LRU lock while holding a queued page's atomic lock forever.
    """

    def __init__(self, capacity: int, page_size: int, registry=None,
                 recorder: TransitionRecorder | None = None):
        if capacity < 1:
            raise ValueError("capacity must be at least one page")
        self.capacity = capacity
        self.page_size = page_size
        self.queue: deque[PageContent] = deque()
        self.lru_lock = make_lock(registry, "lru")
        self.loaded = 0
        self.recorder = recorder
        self.evictions = 0
        self.overflows = 0

    def _detach_locked(self, victim: PageContent) -> None:
        desc = victim.desc
        dst = UNLOADED_DIRTY if desc.dirty_counter.value > 0 else UNLOADED_CLEAN
        desc.content = None
        victim.desc = None
        self.evictions += 1
        if self.recorder is not None:
            self.recorder.note(desc.page_no, LOADED, dst)

    def _evict_one_locked(self) -> PageContent | None:
        """One full second-chance pass; None if every victim was try-locked
        away by concurrent holders."""
        for _ in range(2 * len(self.queue) + 1):
            if not self.queue:
                return None
            victim = self.queue.popleft()
            desc = victim.desc
            if desc is None:
                return victim  # already detached, free to reuse
            if not desc.atomic_lock.acquire(blocking=False):
                self.queue.append(victim)
                continue
            try:
                if desc.accessed:
                    desc.accessed = False
                    self.queue.append(victim)
                    continue
                self._detach_locked(victim)
                return victim
            finally:
                desc.atomic_lock.release()
        return None

    def evict_one(self) -> PageContent:
        """Recycle the least recently used unaccessed page content."""
        while True:
            with self.lru_lock:
                victim = self._evict_one_locked()
            if victim is not None:
                return victim
            time.sleep(0)  # all candidates were momentarily locked

    def acquire_for(self, desc: PageDescriptor) -> PageContent:
        """A content buffer for a page being loaded; evicts when at capacity.
        The caller attaches it via admit once filled.

        If repeated sweeps find no victim (every loaded page is pinned by a
        lock holder, e.g. one operation spanning more pages than the whole
        cache), the capacity is transiently exceeded rather than spinning
        forever; later evictions shrink the cache back.
        """
        sweeps = 0
        while True:
            with self.lru_lock:
                if self.loaded < self.capacity:
                    self.loaded += 1
                    return PageContent(self.page_size)
                victim = self._evict_one_locked()
                if victim is not None:
                    while self.loaded > self.capacity:
                        extra = self._evict_one_locked()
                        if extra is None:
                            break
                        self.loaded -= 1
                    return victim
            sweeps += 1
            if sweeps >= 3:
                with self.lru_lock:
                    self.loaded += 1
                    self.overflows += 1
                return PageContent(self.page_size)
            time.sleep(0)

    def admit(self, content: PageContent, desc: PageDescriptor) -> None:
        content.desc = desc
        desc.content = content
        with self.lru_lock:
            self.queue.append(content)

    def purge_file(self, file) -> None:
        """Drop every loaded page of a closing file."""
        with self.lru_lock:
            kept = deque()
            for content in self.queue:
                desc = content.desc
                if desc is not None and desc.file is file:
                    desc.content = None
                    content.desc = None
                    self.loaded -= 1
                else:
                    kept.append(content)
            self.queue = kept


def read_backing_page(backing, page_no: int, page_size: int) -> bytes:
    """Positional read of one page, zero-filled past end of file."""
    raw = backing.pread(page_no * page_size, page_size)
    if len(raw) < page_size:
        raw = raw + bytes(page_size - len(raw))
    return raw


def load_clean(desc: PageDescriptor, file, page_no: int, lru: LruQueue,
               backing=None, recorder: TransitionRecorder | None = None) -> None:
    """Unloaded-clean to loaded.  Caller holds the atomic lock, and the
    dirty counter is zero."""
    backing = backing if backing is not None else file.backing
    content = lru.acquire_for(desc)
    content.data[:] = read_backing_page(backing, page_no, lru.page_size)
    lru.admit(content, desc)
    if recorder is not None:
        recorder.note(page_no, UNLOADED_CLEAN, LOADED)


def pending_entries_for_page(log, fd_slots, page_no: int, page_size: int,
                             expect: int) -> list[tuple[int, int, bytes]]:
    """The committed, not yet propagated log entries modifying a page, in
    log order.

    Scans backward from the head: the cleaner consumes strictly in index
    order, so the pending entries of a page are always the newest matching
    suffix.  (A forward scan could miscount against entries the cleaner has
    propagated but not yet freed.)  Raises if fewer than the dirty counter's
    entries are found, which would mean the bookkeeping is broken.
    """
    found: list[tuple[int, int, bytes]] = []
    idx = log.head - 1
    tail = log.volatile_tail
    while idx >= tail and len(found) < expect:
        slot = idx % log.nb_entries
        if log.effective_committed(slot):
            file_id, offset, length = log.read_entry_fields(slot)
            if file_id in fd_slots and offset // page_size == page_no:
                found.append((idx, offset, log.read_payload(slot, length)))
        idx -= 1
    if len(found) < expect:
        raise RuntimeError(
            f"dirty counter expects {expect} pending entries for page "
            f"{page_no}, found {len(found)}: bookkeeping invariant broken")
    found.reverse()
    return found


def dirty_miss(desc: PageDescriptor, file, page_no: int, log, lru: LruQueue,
               backing=None, recorder: TransitionRecorder | None = None) -> None:
    """Unloaded-dirty to loaded: backing bytes plus in-order replay of the
    page's pending log entries.  Caller holds both the atomic and the
    cleanup lock, so the dirty counter and the pending set are stable."""
    backing = backing if backing is not None else file.backing
    count = desc.dirty_counter.value
    if count < 0:
        raise RuntimeError("dirty counter observed negative under both locks")
    page = bytearray(read_backing_page(backing, page_no, lru.page_size))
    if count:
        base = page_no * lru.page_size
        for _, offset, payload in pending_entries_for_page(
                log, file.fd_slots, page_no, lru.page_size, count):
            page[offset - base:offset - base + len(payload)] = payload
    content = lru.acquire_for(desc)
    content.data[:] = page
    lru.admit(content, desc)
    if recorder is not None:
        src = UNLOADED_DIRTY if count else UNLOADED_CLEAN
        recorder.note(page_no, src, LOADED)


def apply_write_to_loaded(desc: PageDescriptor, offset_in_page: int,
                          data: bytes) -> None:
    """Update the cached bytes iff the page is loaded; callers hold the
    atomic lock."""
    content = desc.content
    if content is not None:
        content.data[offset_in_page:offset_in_page + len(data)] = data
    desc.accessed = True
