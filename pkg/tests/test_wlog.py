import threading

import pytest

from helpers import new_log, reattach, sweep_points
from wbcache.pmem import PERSIST_ALL, SimulatedPmem
from wbcache.wlog import (FD_MAX, PATH_MAX, LogFormatError, LogFullTimeout,
                          WriteLog, pack_meta, unpack_meta, region_size_for)


def test_meta_word_roundtrip():
    for committed in (False, True):
        for group in (-1, 0, 3, 2 ** 31 - 1):
            word = pack_meta(committed, group)
            c, a, g = unpack_meta(word)
            assert (c, a, g) == (committed, True, group)
    assert unpack_meta(0) == (False, False, 0)


def test_next_entry_on_empty_log():
    log = new_log(trace=False)
    assert log.next_entry() == 0
    assert log.head == 1


def test_allocation_blocks_until_consume_frees_an_entry():
    log = new_log(nb_entries=4, trace=False)
    for i in range(4):
        log.append_single(0, i * 128, b"x" * 128)
    got = []

    def blocked():
        got.append(log.next_entry())

    t = threading.Thread(target=blocked)
    t.start()
    t.join(0.05)
    assert t.is_alive() and not got  # full: Alg. waits
    log.consume_mark(0, 1)
    t.join(2.0)
    assert got == [4]


def test_allocation_timeout_raises():
    log = new_log(nb_entries=4, trace=False)
    for i in range(4):
        log.append_single(0, 0, b"y" * 8)
    with pytest.raises(LogFullTimeout):
        log.next_entry(timeout=0.05)


def test_concurrent_allocations_are_unique():
    threads, per = 8, 1000
    log = new_log(nb_entries=threads * per, trace=False)
    out = [None] * threads

    def work(i):
        out[i] = [log.next_entry() for _ in range(per)]

    ts = [threading.Thread(target=work, args=(i,)) for i in range(threads)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    seen = [idx for chunk in out for idx in chunk]
    assert len(set(seen)) == threads * per
    assert log.head == threads * per
    assert 0 <= log.head - log.volatile_tail <= log.nb_entries


def test_append_single_entry_contents():
    log = new_log()
    idx = log.append_single(3, 1000, b"\xab" * 100)
    assert idx == 0
    committed, allocated, group = log.read_meta(0)
    assert committed and allocated and group == -1
    assert log.read_entry_fields(0) == (3, 1000, 100)
    assert log.read_payload(0, 100) == b"\xab" * 100


def test_append_single_oversized_payload_rejected():
    log = new_log(entry_data_size=128)
    with pytest.raises(ValueError):
        log.append_single(0, 0, b"z" * 129)
    with pytest.raises(ValueError):
        log.append_single(0, 0, b"")


def test_append_single_crash_sweep_commit_implies_content():
    """At every crash point and for adversarial images: a committed entry
    always carries the full flushed payload; once append returned, the entry
    is committed in every image."""
    log = new_log()
    log.bind_path(3, "/data/file.bin")
    start = log.region.event_count
    payload = bytes(range(100))
    log.append_single(3, 4096, payload)
    done = log.region.event_count
    seen_uncommitted = seen_committed_early = False
    for point in range(start, done + 1):
        for seed in (0, 1, 2):
            after = reattach(log.region, point, seed=seed)
            committed = after.effective_committed(0)
            if committed:
                assert after.read_entry_fields(0) == (3, 4096, 100)
                assert after.read_payload(0, 100) == payload
                assert after.lookup_path(3) == "/data/file.bin"
                if point < done:
                    seen_committed_early = True
            else:
                assert point < done
                seen_uncommitted = True
    assert seen_uncommitted and seen_committed_early


def test_append_group_layout():
    log = new_log(entry_data_size=128)
    payload = bytes(300)  # 3 entries
    first = log.append_group(7, 256, payload)
    assert first == 0
    assert log.read_meta(0) == (True, True, -1)
    assert log.read_meta(1) == (False, True, 0)
    assert log.read_meta(2) == (False, True, 0)
    assert log.read_entry_fields(1) == (7, 256 + 128, 128)
    assert log.read_entry_fields(2) == (7, 256 + 256, 44)
    assert all(log.effective_committed(s) for s in (0, 1, 2))


def test_single_entry_group_degenerates():
    log = new_log(entry_data_size=128)
    log.append_group(1, 0, b"q" * 128)
    assert log.read_meta(0) == (True, True, -1)


def test_group_commit_is_atomic_across_crashes():
    """No crash image shows only part of a group as effectively committed."""
    log = new_log(entry_data_size=128)
    start = log.region.event_count
    log.append_group(2, 0, b"\x5a" * 300)
    for point in range(start, log.region.event_count + 1):
        for seed in (0, 5):
            after = reattach(log.region, point, seed=seed)
            states = [after.effective_committed(s) for s in (0, 1, 2)]
            assert all(states) or not any(states)
            if all(states):
                assert after.read_payload(2, 44) == b"\x5a" * 44


def test_group_allocation_is_contiguous_under_concurrency():
    log = new_log(entry_data_size=128, nb_entries=64, trace=False)
    firsts = []
    mu = threading.Lock()

    def work():
        f = log.append_group(0, 0, b"g" * 300)
        with mu:
            firsts.append(f)

    ts = [threading.Thread(target=work) for _ in range(8)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert sorted(firsts) == list(range(0, 24, 3))


def test_bind_path_validation_and_lookup():
    log = new_log()
    with pytest.raises(KeyError):
        log.lookup_path(5)
    with pytest.raises(ValueError):
        log.bind_path(FD_MAX, "/a")
    with pytest.raises(ValueError):
        log.bind_path(0, "x" * PATH_MAX)
    log.bind_path(5, "/data/db.sqlite")
    assert log.lookup_path(5) == "/data/db.sqlite"


def test_bind_path_survives_any_later_crash():
    log = new_log()
    log.bind_path(3, "/data/db.sqlite")
    bound = log.region.event_count
    log.append_single(3, 0, b"w" * 16)
    for point in sweep_points(log.region):
        if point >= bound:
            after = reattach(log.region, point)
            assert after.lookup_path(3) == "/data/db.sqlite"


def test_rebind_after_release_reuses_slot():
    log = new_log()
    log.bind_path(2, "/tmp/a")
    log.release_path(2)
    with pytest.raises(KeyError):
        log.lookup_path(2)
    log.bind_path(2, "/tmp/b")
    assert log.lookup_path(2) == "/tmp/b"


def test_consume_advances_both_tails():
    log = new_log()
    log.append_single(0, 0, b"a" * 8)
    log.consume_mark(0, 1)
    assert log.volatile_tail == 1
    assert log.ptail == 1
    assert log.read_meta(0) == (False, False, 0)


def test_consume_contract_checks():
    log = new_log()
    log.append_single(0, 0, b"a" * 8)
    with pytest.raises(ValueError):
        log.consume_mark(1, 1)
    with pytest.raises(ValueError):
        log.consume_mark(0, 2)


def test_consume_crash_never_reverts_persistent_tail_past_flags():
    """Sweep the consume protocol: whenever the persisted tail has advanced,
    the consumed entries' flags are already cleared in that image."""
    log = new_log()
    for i in range(3):
        log.append_single(0, i * 128, bytes([i]) * 64)
    start = log.region.event_count
    log.consume_mark(0, 2)
    for point in range(start, log.region.event_count + 1):
        for seed in range(4):
            after = reattach(log.region, point, seed=seed)
            if after.ptail == 2:
                assert not after.effective_committed(0)
                assert not after.effective_committed(1)
            else:
                assert after.ptail == 0
            # the third entry must stay committed through it all
            assert after.effective_committed(2)


def test_wrap_around_consume_and_reuse():
    log = new_log(nb_entries=4)
    for i in range(4):
        log.append_single(0, i * 128, bytes([i + 1]) * 32)
    log.consume_mark(0, 2)
    log.append_single(0, 999, b"\xfe" * 32)   # index 4, slot 0
    assert log.head == 5
    assert log.read_payload(4 % 4, 32) == b"\xfe" * 32
    log.consume_mark(2, 3)  # crosses the physical end of the array
    assert log.volatile_tail == 5
    after = reattach(log.region, log.region.event_count, policy=PERSIST_ALL)
    assert after.ptail == 5
    assert not any(after.effective_committed(s) for s in range(4))


def test_attach_rejects_foreign_or_versioned_regions():
    raw = SimulatedPmem(region_size_for(128, 8), record_trace=False)
    with pytest.raises(LogFormatError):
        WriteLog.attach(raw)
    log = new_log(trace=False)
    log.region.store(8, b"\x09")  # corrupt version
    with pytest.raises(LogFormatError):
        WriteLog.attach(log.region)


def test_attach_resumes_from_persistent_tail():
    log = new_log(trace=False)
    for i in range(5):
        log.append_single(0, 0, b"m" * 8)
    log.consume_mark(0, 5)
    again = WriteLog.attach(log.region)
    assert again.head == again.volatile_tail == 5


def test_on_media_layout_is_bit_exact():
    """The persisted format is a contract: header line, tail line, path
    table, then line-aligned entries with the meta word first."""
    import struct

    log = new_log(entry_data_size=128, nb_entries=16, trace=False)
    log.bind_path(2, "/p")
    idx = log.append_single(2, 0x1122, b"\xaa" * 100)
    raw = log.region.read(0, log.region.size)
    assert raw[0:4] == b"NVCL"
    version, entry_size, nb, line = struct.unpack("<QQQQ", raw[8:40])
    assert (version, entry_size, nb, line) == (1, 128, 16, 64)
    assert struct.unpack("<Q", raw[64:72])[0] == 0          # persistent tail
    table = 128
    assert raw[table + 2 * PATH_MAX:table + 2 * PATH_MAX + 3] == b"/p\x00"
    entries = table + FD_MAX * PATH_MAX
    stride = 64 + 128
    base = entries + idx * stride
    meta, fid, off, length = struct.unpack("<QQQQ", raw[base:base + 32])
    assert meta & 1 == 1                                    # commit flag, bit 0
    assert (fid, off, length) == (2, 0x1122, 100)
    assert raw[base + 64:base + 64 + 100] == b"\xaa" * 100  # payload line-aligned
    log.consume_mark(0, 1)
    assert struct.unpack("<Q", log.region.read(64, 8))[0] == 1
