"""Background cleanup: batched consumption of committed log entries,
propagation to the backing store, one sync per touched file per batch, then
tail advancement.

Consumption is strictly FIFO and stops at the first entry whose effective
commit flag is still clear; groups are always consumed whole, extending a
batch past max_batch if needed so the persistent tail never lands inside a
group.  Per entry, the cleaner takes only the cleanup lock of the touched
page, so it never blocks writers and never blocks readers of loaded pages.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass

log_ = logging.getLogger(__name__)

_RETRY_DELAYS = (0.01, 0.05, 0.2, 1.0)


@dataclass(frozen=True)
class BatchPolicy:
    min_batch: int = 1000
    max_batch: int = 10000
    poll_interval: float = 0.001

    def __post_init__(self):
        if not 1 <= self.min_batch <= self.max_batch:
            raise ValueError("need 1 <= min_batch <= max_batch")


class CleanerFault(Exception):
    """The cleaner gave up on the backing store; writers will fill the log."""


class Cleaner:
    """Single consumer thread (or manually stepped pump) for one write log.

    ``target_resolver(file_id)`` returns the (file record, backing handle)
    the entry belongs to; the core guarantees the binding stays alive until
    its entries are drained.
    """

    def __init__(self, log, target_resolver, policy: BatchPolicy | None = None,
                 page_size: int = 4096):
        self.log = log
        self.resolve = target_resolver
        self.policy = policy or BatchPolicy()
        self.page_size = page_size
        self.sync_calls = 0
        self.entries_consumed = 0
        self.batches = 0
        self.bytes_propagated = 0
        self.synced_upto = 0
        self.fault: Exception | None = None
        self._stop = threading.Event()
        self._wake = threading.Event()
        self._cond = threading.Condition()
        self._barrier_upto = 0
        self._thread: threading.Thread | None = None
        self.on_thread_start = None  # lock-instrumentation role hook

    # -- batch selection -----------------------------------------------------

    def _group_extent(self, first_index: int, head: int) -> int:
        """Number of entries in the group starting at first_index."""
        nb = self.log.nb_entries
        first_slot = first_index % nb
        count = 1
        while first_index + count < head:
            _, allocated, group = self.log.read_meta((first_index + count) % nb)
            if not allocated or group != first_slot:
                break
            count += 1
        return count

    def _collect(self) -> tuple[int, int]:
        """Contiguous effectively committed run at the tail: (start, count)."""
        start = self.log.volatile_tail
        head = self.log.head
        count = 0
        while start + count < head and count < self.policy.max_batch:
            slot = (start + count) % self.log.nb_entries
            committed, allocated, group = self.log.read_meta(slot)
            if not allocated or group >= 0:
                # free slot, or a follower whose group was already taken:
                # either way the tail entry is not consumable yet
                break
            if not committed:
                break  # FIFO: wait for the tail entry, no skipping ahead
            count += self._group_extent(start + count, head)
        return start, count

    # -- the three-step consume ------------------------------------------------

    def step(self) -> bool:
        """Consume one batch if available; True if progress was made."""
        if self.fault is not None:
            raise CleanerFault(str(self.fault))
        start, count = self._collect()
        if count == 0:
            return False
        touched: dict[int, object] = {}
        for index in range(start, start + count):
            slot = index % self.log.nb_entries
            file_id, offset, length = self.log.read_entry_fields(slot)
            payload = self.log.read_payload(slot, length)
            record, backing = self.resolve(file_id)
            first_page = offset // self.page_size
            last_page = (offset + length - 1) // self.page_size
            descs = [record.tree.get_or_create(p)
                     for p in range(first_page, last_page + 1)]
            for desc in descs:
                desc.cleanup_lock.acquire()
            try:
                self._propagate(backing, offset, payload)
                for desc in descs:
                    desc.dirty_counter.add(-1)
            finally:
                for desc in reversed(descs):
                    desc.cleanup_lock.release()
            self.bytes_propagated += length
            touched[id(backing)] = backing
        for backing in touched.values():
            self._propagate(backing, None, None, sync=True)
            self.sync_calls += 1
        with self._cond:
            self.synced_upto = start + count
            self._cond.notify_all()
        self.log.consume_mark(start, count)
        self.entries_consumed += count
        self.batches += 1
        return True

    def _propagate(self, backing, offset, payload, sync: bool = False) -> None:
        """One backing-store call with bounded retries; persistent failure
        parks the cleaner in a fault state."""
        attempt = 0
        while True:
            try:
                if sync:
                    backing.sync()
                else:
                    backing.pwrite(offset, payload)
                return
            except OSError as exc:
                if attempt >= len(_RETRY_DELAYS):
                    self.fault = exc
                    log_.error("cleaner faulted after retries: %s", exc)
                    raise CleanerFault(str(exc)) from exc
                log_.warning("backing store error (retry %d): %s", attempt, exc)
                time.sleep(_RETRY_DELAYS[attempt])
                attempt += 1

    # -- scheduling ---------------------------------------------------------------

    def _batch_wanted(self) -> bool:
        occupancy = self.log.occupancy()
        if occupancy <= 0:
            return False
        if occupancy >= self.policy.min_batch:
            return True
        return self._barrier_upto > self.synced_upto

    def run(self) -> None:
        if self.on_thread_start is not None:
            self.on_thread_start()
        while not self._stop.is_set():
            try:
                if self._batch_wanted() and self.step():
                    continue
            except CleanerFault:
                with self._cond:
                    self._cond.notify_all()
                return
            self._wake.wait(self.policy.poll_interval)
            self._wake.clear()

    def start(self) -> None:
        self._thread = threading.Thread(target=self.run, name="wbcache-cleaner",
                                        daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        self._wake.set()
        if self._thread is not None:
            self._thread.join()
            self._thread = None

    @property
    def running(self) -> bool:
        return self._thread is not None and self._thread.is_alive()

    def drain_barrier(self, upto: int | None = None, file_id: int | None = None,
                      timeout: float | None = None) -> None:
        """Block until every entry below ``upto`` (default: current head) has
        been propagated and its file synced.

        The wait is global: a per-file wait would be a strict subset, and
        close correctness only needs "at least my entries".
        """
        del file_id  # accepted for interface symmetry; the global wait covers it
        upto = self.log.head if upto is None else upto
        if self._thread is None:
            deadline = None if timeout is None else time.monotonic() + timeout
            while self.synced_upto < upto:
                if self.fault is not None:
                    raise CleanerFault(str(self.fault))
                if not self.step():
                    time.sleep(0.0002)  # tail entry not committed yet
                if deadline is not None and time.monotonic() > deadline:
                    raise TimeoutError("drain barrier timed out")
            return
        with self._cond:
            self._barrier_upto = max(self._barrier_upto, upto)
            self._wake.set()
            ok = self._cond.wait_for(
                lambda: self.synced_upto >= upto or self.fault is not None,
                timeout)
            if not ok:
                raise TimeoutError("drain barrier timed out")
            if self.fault is not None and self.synced_upto < upto:
                raise CleanerFault(str(self.fault))

    def metrics(self) -> dict:
        return {
            "sync_calls": self.sync_calls,
            "entries_consumed": self.entries_consumed,
            "batches": self.batches,
            "bytes_propagated": self.bytes_propagated,
            "log_occupancy": self.log.occupancy(),
            "synced_upto": self.synced_upto,
            "fault": None if self.fault is None else str(self.fault),
            "running": self.running,
        }
