"""Post-crash restart: replay committed log entries onto the backing store,
sync, and reset the log to empty.

The scan starts at the persistent tail and examines every slot once, in
index order.  Uncommitted entries are skipped and the scan continues: with
fixed-size entries an uncommitted hole (an in-flight write at crash time)
says nothing about the validity of the entries after it.  Group members are
governed by their first entry's commit flag.  Replay is idempotent because
entries are absolute-offset overwrites, so crashing during recovery and
recovering again is safe.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

from .wlog import PTAIL_OFF, WriteLog

logger = logging.getLogger(__name__)


@dataclass
class RecoveryReport:
    entries_applied: int = 0
    entries_ignored: int = 0
    entries_failed: int = 0
    files_recovered: int = 0
    files_failed: int = 0
    errors: list[str] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            f"entries_applied: {self.entries_applied}",
            f"entries_ignored: {self.entries_ignored}",
            f"entries_failed: {self.entries_failed}",
            f"files_recovered: {self.files_recovered}",
            f"files_failed: {self.files_failed}",
        ]
        lines.extend(f"error: {e}" for e in self.errors)
        return "\n".join(lines) + "\n"


def recover(region, backstore) -> RecoveryReport:
    """Re-open files via the path table, replay committed entries in log
    order, sync, close, and empty the log.  Raises if the header does not
    parse; per-file problems are recorded and do not stop the rest."""
    log = WriteLog.attach(region)
    report = RecoveryReport()
    handles: dict[str, object] = {}
    failed_slots: set[int] = set()
    start = log.ptail
    for i in range(log.nb_entries):
        slot = (start + i) % log.nb_entries
        _, allocated, _ = log.read_meta(slot)
        if not allocated:
            continue
        if not log.effective_committed(slot):
            report.entries_ignored += 1
            continue
        file_id, offset, length = log.read_entry_fields(slot)
        if file_id in failed_slots:
            report.entries_failed += 1
            continue
        try:
            path = log.lookup_path(file_id)
        except (KeyError, ValueError) as exc:
            failed_slots.add(file_id)
            report.files_failed += 1
            report.entries_failed += 1
            report.errors.append(f"descriptor {file_id}: {exc}")
            continue
        handle = handles.get(path)
        if handle is None:
            try:
                handle = backstore.open(path, create=True)
            except OSError as exc:
                failed_slots.add(file_id)
                report.files_failed += 1
                report.entries_failed += 1
                report.errors.append(f"{path}: {exc}")
                continue
            handles[path] = handle
        handle.pwrite(offset, log.read_payload(slot, length))
        report.entries_applied += 1
    for handle in handles.values():
        handle.sync()
        handle.close()
    report.files_recovered = len(handles)
    _empty_log(log)
    if report.entries_applied or report.errors:
        logger.info("recovery: %d applied, %d ignored, %d files",
                    report.entries_applied, report.entries_ignored,
                    report.files_recovered)
    return report


def _empty_log(log: WriteLog) -> None:
    # fence after each clear, in scan order, for the same reason as
    # consume_mark: if this pass itself crashes, the stale flags left behind
    # must be a suffix of the replay order or a rerun could replay an old
    # entry over a newer one it already applied
    region = log.region
    zero = struct.pack("<Q", 0)
    start = log.ptail
    for i in range(log.nb_entries):
        base = log.entry_offset((start + i) % log.nb_entries)
        if region.read(base, 8) != zero:
            region.store(base, zero)
            region.pwb(base)
            region.pfence()
    region.store(PTAIL_OFF, zero)
    region.pwb(PTAIL_OFF)
    region.psync()
    log.head = 0
    log.volatile_tail = 0


def verify_clean(region) -> bool:
    """True iff the header parses and no slot holds a live entry."""
    try:
        log = WriteLog.attach(region)
    except Exception:
        return False
    for slot in range(log.nb_entries):
        _, allocated, _ = log.read_meta(slot)
        if allocated:
            return False
    return True
