"""Persistence-domain abstraction: byte-addressable regions with explicit
flush/fence/drain primitives.

Two backends are provided.  ``SimulatedPmem`` keeps the region in DRAM and
(optionally) records every persistence-visible event so that the crash
harness can reconstruct, for any point in the execution, the set of byte
images a restart could observe.  ``MappedPmem`` memory-maps a real file and
maps the primitives onto file synchronization; it exists so the same code
runs against an actual persistent region, but crash injection is only
available in simulated mode.

The failure model is line-granular: a cache line persists atomically, and
the only ordering promises are per thread:

  * after ``psync`` returns, every line the calling thread queued with
    ``pwb`` is in the persisted image with its content as of the drain;
  * if any store issued by a thread after one of its fences is persisted,
    then every line that thread queued before the fence is persisted at
    least with its content as of the queueing ``pwb``.

Anything else (unflushed stores, lines flushed but not drained) may or may
not survive, and ``crash`` picks an outcome according to a seeded policy.
"""

from __future__ import annotations

import bisect
import mmap
import os
import random
import threading
from dataclasses import dataclass

LINE_SIZE = 64

DROP_ALL_UNFLUSHED = "drop-all-unflushed"
ADVERSARIAL_SUBSET = "adversarial-subset"
PERSIST_ALL = "persist-all"

_POLICIES = (DROP_ALL_UNFLUSHED, ADVERSARIAL_SUBSET, PERSIST_ALL)

# event kinds in the recorded trace
_EV_STORE = 0
_EV_PWB = 1
_EV_PFENCE = 2
_EV_PSYNC = 3


@dataclass(frozen=True)
class CrashSchedule:
    """Where and how to crash a simulated region.

    ``crash_point`` is an ordinal into the sequence of recorded
    persistence-visible events; ``None`` means "after everything recorded
    so far".  The seed makes adversarial images replayable.
    """

    seed: int = 0
    policy: str = ADVERSARIAL_SUBSET
    crash_point: int | None = None

    def __post_init__(self):
        if self.policy not in _POLICIES:
            raise ValueError(f"unknown crash policy: {self.policy!r}")


class PersistedImage:
    """The byte image a restart would observe after a simulated crash."""

    __slots__ = ("_data", "size", "line_size", "crash_point", "policy", "seed")

    def __init__(self, data: bytearray, line_size: int, crash_point: int,
                 policy: str, seed: int):
        self._data = data
        self.size = len(data)
        self.line_size = line_size
        self.crash_point = crash_point
        self.policy = policy
        self.seed = seed

    def read(self, offset: int, length: int) -> bytes:
        return bytes(self._data[offset:offset + length])

    def to_bytes(self) -> bytes:
        return bytes(self._data)


class SimulatedPmem:
    """In-memory persistence domain with optional crash-point recording.

    With ``record_trace=False`` the region is just a flat byte array with
    cheap no-op primitives (used for performance runs); ``crash`` and
    ``enumerate_crash_points`` require ``record_trace=True``.
    """

    mode = "simulated"

    def __init__(self, size: int, line_size: int = LINE_SIZE, *,
                 record_trace: bool = False, initial: bytes | None = None,
                 _adopt_buf: bytearray | None = None):
        if size % line_size != 0:
            raise ValueError("region size must be a multiple of the line size")
        self.size = size
        self.line_size = line_size
        self.record_trace = record_trace
        if _adopt_buf is not None:
            self._buf = _adopt_buf
        else:
            self._buf = bytearray(size)
            if initial is not None:
                if len(initial) != size:
                    raise ValueError("initial image size mismatch")
                self._buf[:] = initial
        # None means "all zeroes": lets image building calloc instead of copy
        fresh = initial is None and _adopt_buf is None
        self._initial = None if (fresh or not record_trace) else bytes(self._buf)
        # trace state (guarded by _mu)
        self._mu = threading.Lock()
        self._events: list[tuple] = []
        self._dirty: set[int] = set()
        self._queued: dict[int, dict[int, int]] = {}   # tid -> {line: pwb ordinal}
        self._index: _TraceIndex | None = None
        # rough operation counters (racy in fast mode, fine for metrics)
        self.store_count = 0
        self.pwb_count = 0
        self.pfence_count = 0
        self.psync_count = 0

    # -- plain loads/stores ------------------------------------------------

    def read(self, offset: int, length: int) -> bytes:
        return bytes(self._buf[offset:offset + length])

    def store(self, offset: int, data: bytes) -> None:
        if offset < 0 or offset + len(data) > self.size:
            raise ValueError("store out of region bounds")
        if not self.record_trace:
            self._buf[offset:offset + len(data)] = data
            self.store_count += 1
            return
        with self._mu:
            self._buf[offset:offset + len(data)] = data
            self._events.append((_EV_STORE, threading.get_ident(), offset, bytes(data)))
            first = offset // self.line_size
            last = (offset + len(data) - 1) // self.line_size
            self._dirty.update(range(first, last + 1))
            self._index = None
            self.store_count += 1

    # -- persistence primitives --------------------------------------------

    def pwb(self, offset: int) -> None:
        if offset < 0 or offset >= self.size:
            raise ValueError("pwb out of region bounds")
        self.pwb_count += 1
        if not self.record_trace:
            return
        line = offset // self.line_size
        with self._mu:
            ordinal = len(self._events) + 1
            self._events.append((_EV_PWB, threading.get_ident(), line))
            if line in self._dirty:
                self._queued.setdefault(threading.get_ident(), {})[line] = ordinal
            self._index = None

    def pwb_range(self, offset: int, length: int) -> None:
        if length <= 0:
            return
        if offset < 0 or offset + length > self.size:
            raise ValueError("pwb_range out of region bounds")
        first = offset // self.line_size
        last = (offset + length - 1) // self.line_size
        if not self.record_trace:
            self.pwb_count += last - first + 1
            return
        for line in range(first, last + 1):
            self.pwb(line * self.line_size)

    def pfence(self) -> None:
        self.pfence_count += 1
        if not self.record_trace:
            return
        with self._mu:
            self._events.append((_EV_PFENCE, threading.get_ident()))
            self._index = None

    def psync(self) -> None:
        self.psync_count += 1
        if not self.record_trace:
            return
        with self._mu:
            self._events.append((_EV_PSYNC, threading.get_ident()))
            drained = self._queued.pop(threading.get_ident(), {})
            self._dirty.difference_update(drained.keys())
            self._index = None

    # -- harness-only operations --------------------------------------------

    @property
    def event_count(self) -> int:
        return len(self._events)

    def queued_line_count(self, tid: int | None = None) -> int:
        """Debug view of how many lines the thread has queued but not drained."""
        tid = threading.get_ident() if tid is None else tid
        with self._mu:
            return len(self._queued.get(tid, {}))

    def enumerate_crash_points(self) -> range:
        """Every ordinal at which a crash may be injected (0 = before anything)."""
        if not self.record_trace:
            raise RuntimeError("crash points require record_trace=True")
        return range(0, len(self._events) + 1)

    def crash(self, schedule: CrashSchedule) -> PersistedImage:
        """Return the byte image a restart would observe under the schedule."""
        if not self.record_trace:
            raise RuntimeError("crash simulation requires record_trace=True")
        with self._mu:
            if self._index is None or self._index.n_events != len(self._events):
                self._index = _TraceIndex(self._events, self.line_size)
            index = self._index
        point = schedule.crash_point
        if point is None:
            point = index.n_events
        if not 0 <= point <= index.n_events:
            raise ValueError("crash point outside the recorded trace")
        data = index.build_image(self._initial, self.size, point,
                                 schedule.policy, schedule.seed)
        return PersistedImage(data, self.line_size, point, schedule.policy,
                              schedule.seed)

    @classmethod
    def from_image(cls, image: PersistedImage, *, record_trace: bool = False
                   ) -> "SimulatedPmem":
        """A fresh region whose content is what the crash preserved.

        The region adopts the image's buffer, so the image must not be used
        afterwards; crash sweeps build one image per (point, seed) anyway.
        """
        return cls(image.size, image.line_size, record_trace=record_trace,
                   _adopt_buf=image._data)


class _TraceIndex:
    """Per-line and per-thread views over a recorded event trace, built once
    and reused across crash points of the same trace."""

    def __init__(self, events: list[tuple], line_size: int):
        self.n_events = len(events)
        self.line_size = line_size
        # line -> [(ordinal, offset_in_line, bytes)] in trace order
        self.line_stores: dict[int, list[tuple[int, int, bytes]]] = {}
        # line -> sorted ordinals of psyncs that drained it
        self.line_guarantees: dict[int, list[int]] = {}
        # tid -> sorted fence ordinals / [(pwb ordinal, line)] / [(store ordinal, lines)]
        self.fences: dict[int, list[int]] = {}
        self.pwbs: dict[int, list[tuple[int, int]]] = {}
        self.stores: dict[int, list[tuple[int, tuple[int, ...]]]] = {}

        dirty: set[int] = set()
        queued: dict[int, dict[int, int]] = {}
        for i, ev in enumerate(events):
            ordinal = i + 1
            kind = ev[0]
            if kind == _EV_STORE:
                _, tid, offset, data = ev
                first = offset // line_size
                last = (offset + len(data) - 1) // line_size
                lines = tuple(range(first, last + 1))
                for line in lines:
                    lo = max(offset, line * line_size)
                    hi = min(offset + len(data), (line + 1) * line_size)
                    seg = data[lo - offset:hi - offset]
                    self.line_stores.setdefault(line, []).append(
                        (ordinal, lo - line * line_size, seg))
                dirty.update(lines)
                self.stores.setdefault(tid, []).append((ordinal, lines))
            elif kind == _EV_PWB:
                _, tid, line = ev
                if line in dirty:
                    queued.setdefault(tid, {})[line] = ordinal
            elif kind == _EV_PFENCE:
                self.fences.setdefault(ev[1], []).append(ordinal)
            elif kind == _EV_PSYNC:
                drained = queued.pop(ev[1], {})
                for line in drained:
                    self.line_guarantees.setdefault(line, []).append(ordinal)
                dirty.difference_update(drained.keys())
        # pwbs kept separately from the queue replay: fence obligations cover
        # every line queued before the fence, drained or not
        for i, ev in enumerate(events):
            if ev[0] == _EV_PWB:
                self.pwbs.setdefault(ev[1], []).append((i + 1, ev[2]))

    def _guaranteed_min(self, line: int, point: int) -> int:
        marks = self.line_guarantees.get(line)
        if not marks:
            return 0
        i = bisect.bisect_right(marks, point)
        return marks[i - 1] if i else 0

    def build_image(self, initial: bytes | None, size: int, point: int,
                    policy: str, seed: int) -> bytearray:
        touched = [line for line, evs in self.line_stores.items()
                   if evs[0][0] <= point]
        persist_at: dict[int, int] = {}
        if policy == PERSIST_ALL:
            for line in touched:
                persist_at[line] = point
        else:
            for line in touched:
                persist_at[line] = self._guaranteed_min(line, point)
            if policy == ADVERSARIAL_SUBSET:
                rng = random.Random((seed << 24) ^ point)
                for line in touched:
                    roll = rng.random()
                    if roll < 1 / 3:
                        continue  # keep guaranteed minimum
                    if roll < 2 / 3:
                        persist_at[line] = point
                    else:
                        ords = [o for o, _, _ in self.line_stores[line] if o <= point]
                        persist_at[line] = max(persist_at[line], rng.choice(ords))
        self._enforce_fence_order(persist_at, point)
        out = bytearray(size) if initial is None else bytearray(initial)
        for line in touched:
            limit = persist_at[line]
            if limit <= 0:
                continue
            base = line * self.line_size
            for ordinal, off, seg in self.line_stores[line]:
                if ordinal > limit:
                    break
                out[base + off:base + off + len(seg)] = seg
        return out

    def _enforce_fence_order(self, persist_at: dict[int, int], point: int) -> None:
        """Raise persist points until no image violates per-thread fence
        ordering: a persisted post-fence store implies every line queued
        before that fence persisted at least as of its pwb."""
        changed = True
        while changed:
            changed = False
            for tid, fence_ords in self.fences.items():
                stores = self.stores.get(tid, ())
                max_included = 0
                for ordinal, lines in stores:
                    if ordinal > point:
                        break
                    if any(persist_at.get(line, 0) >= ordinal for line in lines):
                        max_included = ordinal
                trigger = 0
                for f in fence_ords:
                    if f > point or f >= max_included:
                        break
                    trigger = f
                if not trigger:
                    continue
                for w, line in self.pwbs.get(tid, ()):
                    if w >= trigger:
                        break
                    if persist_at.get(line, 0) < w:
                        persist_at[line] = w
                        changed = True


class MappedPmem:
    """Persistence domain backed by a memory-mapped file.

    ``pwb`` collects touched ranges and ``psync``/``pfence`` flush them via
    ``mmap.flush``; good enough as a durability mapping on platforms without
    userspace cache-line flushes.  Crash injection is not available here.
    """

    mode = "real-mapped"

    def __init__(self, path: str, size: int, line_size: int = LINE_SIZE):
        if size % line_size != 0:
            raise ValueError("region size must be a multiple of the line size")
        self.size = size
        self.line_size = line_size
        self.path = path
        self.record_trace = False
        flags = os.O_RDWR | os.O_CREAT
        self._fd = os.open(path, flags, 0o644)
        if os.fstat(self._fd).st_size < size:
            os.ftruncate(self._fd, size)
        self._mm = mmap.mmap(self._fd, size)
        self._mu = threading.Lock()
        self._pending: dict[int, set[int]] = {}
        self.store_count = self.pwb_count = self.pfence_count = self.psync_count = 0

    def read(self, offset: int, length: int) -> bytes:
        return bytes(self._mm[offset:offset + length])

    def store(self, offset: int, data: bytes) -> None:
        if offset < 0 or offset + len(data) > self.size:
            raise ValueError("store out of region bounds")
        self._mm[offset:offset + len(data)] = data
        self.store_count += 1

    def pwb(self, offset: int) -> None:
        self.pwb_count += 1
        line = offset // self.line_size
        with self._mu:
            self._pending.setdefault(threading.get_ident(), set()).add(line)

    def pwb_range(self, offset: int, length: int) -> None:
        if length <= 0:
            return
        first = offset // self.line_size
        last = (offset + length - 1) // self.line_size
        with self._mu:
            self._pending.setdefault(threading.get_ident(), set()).update(
                range(first, last + 1))
        self.pwb_count += last - first + 1

    def pfence(self) -> None:
        self.pfence_count += 1

    def psync(self) -> None:
        self.psync_count += 1
        with self._mu:
            lines = self._pending.pop(threading.get_ident(), None)
        if not lines:
            return
        # msync wants system-page-aligned ranges; coalesce queued lines into
        # page-aligned spans before flushing
        page = mmap.PAGESIZE
        pages = {line * self.line_size // page for line in lines}
        ordered = sorted(pages)
        run_start = prev = ordered[0]
        for pg in ordered[1:] + [None]:
            if pg is not None and pg == prev + 1:
                prev = pg
                continue
            start = run_start * page
            length = min((prev - run_start + 1) * page, self.size - start)
            self._mm.flush(start, length)
            if pg is not None:
                run_start = prev = pg
        os.fsync(self._fd)

    def close(self) -> None:
        self.psync()
        self._mm.close()
        os.close(self._fd)
