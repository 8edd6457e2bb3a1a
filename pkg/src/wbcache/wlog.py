"""Circular persistent write log.

On-media layout (all integers little-endian 64-bit):

  offset 0     header line: magic "NVCL", pad, version, entry_data_size,
               nb_entries, line_size
  offset 64    persistent tail index, alone on its line
  offset 128   path table: FD_MAX slots of PATH_MAX bytes, zero-terminated
  then         entry array, each entry line-aligned

An entry starts with one metadata line holding the packed meta word,
file id, file offset and payload length; the payload follows on the next
line boundary.  The meta word packs the commit flag in bit 0, an
"allocated" marker in bit 1 and the signed 32-bit group index in the upper
half (-1 for a standalone or group-first entry, otherwise the slot of the
group's first entry).  The marker bit distinguishes a freed slot (meta 0)
from a follower of slot 0, which would otherwise also encode as commit=0,
group=0.

Committing stores only the meta word, so a commit flushes exactly one
line.  Large writes allocate their entries contiguously with a single head
advance; followers are filled and flushed before the first entry's commit
flag is set, which makes the group atomic across crashes.

head and the volatile tail are monotone 64-bit counters; the physical slot
is counter mod nb_entries, which avoids ABA on wrap-around.
"""

from __future__ import annotations

import struct
import threading
import time

MAGIC = b"NVCL"
VERSION = 1
FD_MAX = 1024
PATH_MAX = 4096

HEADER_OFF = 0
PTAIL_OFF = 64
PATH_TABLE_OFF = 128
ENTRIES_OFF = PATH_TABLE_OFF + FD_MAX * PATH_MAX

_META = struct.Struct("<QQQQ")  # meta word, file_id, offset, length
_U64 = struct.Struct("<Q")

_COMMIT_BIT = 1
_ALLOC_BIT = 2


class LogFullTimeout(Exception):
    """Raised when an allocation waited longer than the configured timeout."""


class LogFormatError(Exception):
    """Header is missing or does not match this implementation."""


def pack_meta(committed: bool, group: int, allocated: bool = True) -> int:
    word = (group & 0xFFFFFFFF) << 32
    if allocated:
        word |= _ALLOC_BIT
    if committed:
        word |= _COMMIT_BIT
    return word


def unpack_meta(word: int) -> tuple[bool, bool, int]:
    group = word >> 32
    if group >= 1 << 31:
        group -= 1 << 32
    return bool(word & _COMMIT_BIT), bool(word & _ALLOC_BIT), group


def region_size_for(entry_data_size: int, nb_entries: int,
                    line_size: int = 64) -> int:
    stride = entry_stride(entry_data_size, line_size)
    return ENTRIES_OFF + nb_entries * stride


def entry_stride(entry_data_size: int, line_size: int = 64) -> int:
    payload_lines = -(-entry_data_size // line_size)
    return line_size + payload_lines * line_size


class WriteLog:
    """Entry allocation, the commit protocol, and tail management.

    Allocation and appends are safe from many threads; ``consume_mark`` must
    only be called by the single cleaner, and the path-table operations are
    serialized by the caller's open/close path.
    """

    def __init__(self, region, entry_data_size: int, nb_entries: int):
        self.region = region
        self.entry_data_size = entry_data_size
        self.nb_entries = nb_entries
        self.stride = entry_stride(entry_data_size, region.line_size)
        if region.size < region_size_for(entry_data_size, nb_entries,
                                         region.line_size):
            raise ValueError("region too small for this log geometry")
        self.head = 0           # monotone, next index to hand out
        self.volatile_tail = 0  # monotone, first live index
        self._head_mu = threading.Lock()
        self.full_wait_hook = None  # callable(log), used by the virtual-time bench
        self.full_waits = 0

    # -- lifecycle -----------------------------------------------------------

    @classmethod
    def create(cls, region, entry_data_size: int, nb_entries: int) -> "WriteLog":
        """Format the region and persist an empty log."""
        header = MAGIC + b"\x00" * 4 + struct.pack(
            "<QQQ", VERSION, entry_data_size, nb_entries) + _U64.pack(region.line_size)
        region.store(HEADER_OFF, header)
        region.pwb_range(HEADER_OFF, len(header))
        region.store(PTAIL_OFF, _U64.pack(0))
        region.pwb(PTAIL_OFF)
        region.psync()
        return cls(region, entry_data_size, nb_entries)

    @classmethod
    def attach(cls, region) -> "WriteLog":
        """Open an already formatted region; header mismatch aborts."""
        raw = region.read(HEADER_OFF, 40)
        if raw[:4] != MAGIC:
            raise LogFormatError("bad magic, region is not a write log")
        version, entry_data_size, nb_entries, line_size = struct.unpack(
            "<QQQQ", raw[8:40])
        if version != VERSION:
            raise LogFormatError(f"log version {version} not supported")
        if line_size != region.line_size:
            raise LogFormatError("line size mismatch between region and log")
        log = cls(region, entry_data_size, nb_entries)
        tail = log.ptail
        log.head = tail
        log.volatile_tail = tail
        return log

    @property
    def ptail(self) -> int:
        return _U64.unpack(self.region.read(PTAIL_OFF, 8))[0]

    def occupancy(self) -> int:
        return self.head - self.volatile_tail

    # -- allocation ----------------------------------------------------------

    def next_entries(self, count: int = 1, timeout: float | None = None) -> int:
        """Reserve ``count`` contiguous entries; returns the first index.

        Spins (bounded, then yields) while the log is too full.  The entries
        handed out have their commit flags cleared already, guaranteed by the
        cleaner's consume protocol and by recovery.
        """
        if count < 1 or count > self.nb_entries:
            raise ValueError("group larger than the log")
        deadline = None if timeout is None else time.monotonic() + timeout
        spins = 0
        while True:
            with self._head_mu:
                if self.head + count - self.volatile_tail <= self.nb_entries:
                    first = self.head
                    self.head += count
                    return first
            self.full_waits += 1
            if self.full_wait_hook is not None:
                self.full_wait_hook(self)
            else:
                spins += 1
                if spins > 64:
                    time.sleep(0.0001)
            if deadline is not None and time.monotonic() > deadline:
                raise LogFullTimeout(
                    f"no free entry within {timeout}s (occupancy "
                    f"{self.occupancy()}/{self.nb_entries})")

    def next_entry(self, timeout: float | None = None) -> int:
        return self.next_entries(1, timeout)

    # -- appends ---------------------------------------------------------------

    def entry_offset(self, slot: int) -> int:
        return ENTRIES_OFF + slot * self.stride

    def _fill(self, index: int, file_id: int, offset: int, payload: bytes,
              group: int) -> None:
        base = self.entry_offset(index % self.nb_entries)
        self.region.store(base, _META.pack(pack_meta(False, group), file_id,
                                           offset, len(payload)))
        self.region.store(base + self.region.line_size, payload)
        self.region.pwb_range(base, self.region.line_size + len(payload))

    def _commit(self, index: int, group: int) -> None:
        base = self.entry_offset(index % self.nb_entries)
        self.region.store(base, _U64.pack(pack_meta(True, group)))
        self.region.pwb(base)
        self.region.psync()

    def append_single(self, file_id: int, offset: int, payload: bytes,
                      timeout: float | None = None) -> int:
        """Append one committed entry; durable when this returns."""
        if not 1 <= len(payload) <= self.entry_data_size:
            raise ValueError("payload does not fit a single entry")
        index = self.next_entries(1, timeout)
        self._fill(index, file_id, offset, payload, group=-1)
        self.region.pfence()
        self._commit(index, group=-1)
        return index

    def append_group(self, file_id: int, offset: int, payload: bytes,
                     timeout: float | None = None) -> int:
        """Append a large write as a contiguous group committed atomically.

        Followers are filled and flushed first; the fence orders them before
        the first entry's commit flag, whose single line governs the group.
        """
        size = self.entry_data_size
        count = -(-len(payload) // size)
        if count == 1:
            return self.append_single(file_id, offset, payload, timeout)
        first = self.next_entries(count, timeout)
        first_slot = first % self.nb_entries
        for j in range(1, count):
            chunk = payload[j * size:(j + 1) * size]
            self._fill(first + j, file_id, offset + j * size, chunk,
                       group=first_slot)
        self._fill(first, file_id, offset, payload[:size], group=-1)
        self.region.pfence()
        self._commit(first, group=-1)
        return first

    # -- path table ------------------------------------------------------------

    def bind_path(self, file_id: int, path: str) -> None:
        """Persist the slot-to-path binding before any entry cites the slot."""
        raw = path.encode() + b"\x00"
        if not 0 <= file_id < FD_MAX:
            raise ValueError(f"file id {file_id} out of range")
        if len(raw) > PATH_MAX:
            raise ValueError("path too long for the path table")
        off = PATH_TABLE_OFF + file_id * PATH_MAX
        self.region.store(off, raw)
        self.region.pwb_range(off, len(raw))
        self.region.psync()

    def release_path(self, file_id: int) -> None:
        off = PATH_TABLE_OFF + file_id * PATH_MAX
        self.region.store(off, b"\x00")
        self.region.pwb(off)
        self.region.psync()

    def lookup_path(self, file_id: int) -> str:
        if not 0 <= file_id < FD_MAX:
            raise ValueError(f"file id {file_id} out of range")
        raw = self.region.read(PATH_TABLE_OFF + file_id * PATH_MAX, PATH_MAX)
        end = raw.find(b"\x00")
        if end <= 0:
            raise KeyError(f"file id {file_id} is not bound")
        return raw[:end].decode()

    # -- consumption (cleaner only) ---------------------------------------------

    def consume_mark(self, first_index: int, count: int) -> None:
        """Free ``count`` entries starting at the tail.

        Flags are cleared strictly in index order with a fence after each
        clear.  The chain matters: it makes the persisted clears a prefix of
        the consumed range, so after a crash the surviving stale flags are a
        suffix and recovery's in-order replay of them over the (already
        synced) backing data can never resurrect an overwritten byte.  A
        single batched fence would allow a newer entry's clear to persist
        while an older one's did not, and replaying that older entry would
        roll back an acknowledged overwrite.

        The cleared flags and the advanced persistent tail are made durable
        before the volatile tail moves, so an entry visible as free to
        writers is already free in the persisted image.
        """
        if first_index != self.volatile_tail:
            raise ValueError("consume must start at the volatile tail")
        if count < 1 or first_index + count > self.head:
            raise ValueError("consume range exceeds allocated entries")
        for i in range(count):
            base = self.entry_offset((first_index + i) % self.nb_entries)
            self.region.store(base, _U64.pack(0))
            self.region.pwb(base)
            self.region.pfence()
        self.region.store(PTAIL_OFF, _U64.pack(first_index + count))
        self.region.pwb(PTAIL_OFF)
        self.region.psync()
        self.volatile_tail = first_index + count

    # -- entry inspection ---------------------------------------------------------

    def read_meta(self, slot: int) -> tuple[bool, bool, int]:
        base = self.entry_offset(slot)
        return unpack_meta(_U64.unpack(self.region.read(base, 8))[0])

    def read_entry_fields(self, slot: int) -> tuple[int, int, int]:
        base = self.entry_offset(slot)
        _, file_id, offset, length = _META.unpack(self.region.read(base, 32))
        return file_id, offset, length

    def read_payload(self, slot: int, length: int) -> bytes:
        base = self.entry_offset(slot)
        return self.region.read(base + self.region.line_size, length)

    def effective_committed(self, slot: int) -> bool:
        """Commit state of an entry, following the group-first rule."""
        committed, allocated, group = self.read_meta(slot)
        if not allocated:
            return False
        if group < 0:
            return committed
        f_committed, f_allocated, f_group = self.read_meta(group)
        return f_allocated and f_group < 0 and f_committed
