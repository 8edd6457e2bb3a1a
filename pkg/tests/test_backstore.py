import pytest

from wbcache.backstore import (RealBackstore, SimBackstore, SimDiskConfig,
                               VirtualClock)


def test_positional_semantics_and_size():
    st = SimBackstore()
    f = st.open("/d/a", create=True)
    f.pwrite(10, b"hello")
    assert f.size() == 15
    assert f.pread(10, 5) == b"hello"
    assert f.pread(0, 10) == b"\x00" * 10
    assert f.pread(14, 100) == b"o"   # short read at EOF
    assert f.pread(20, 4) == b""


def test_open_missing_requires_create():
    st = SimBackstore()
    with pytest.raises(FileNotFoundError):
        st.open("/nope")
    with pytest.raises(FileNotFoundError):
        st.stat("/nope")


def test_identity_is_stable_per_path():
    st = SimBackstore()
    a = st.open("/x", create=True)
    b = st.open("/x")
    assert a.identity() == b.identity()
    c = st.open("/y", create=True)
    assert c.identity() != a.identity()


def test_write_sync_crash_preserves_bytes():
    st = SimBackstore(record_history=True)
    f = st.open("/f", create=True)
    f.pwrite(0, b"abc")
    f.sync()
    snap = st.snapshot_at(st._local_ordinal)
    assert snap["/f"] == b"abc"


def test_unsynced_write_lost_on_disk_crash_policy():
    st = SimBackstore(record_history=True)
    f = st.open("/f", create=True)
    f.pwrite(0, b"abc")
    f.sync()
    f.pwrite(3, b"def")
    point = st._local_ordinal
    assert st.snapshot_at(point, drop_unsynced=True)["/f"] == b"abc"
    assert st.snapshot_at(point, drop_unsynced=False)["/f"] == b"abcdef"
    f.sync()
    assert st.snapshot_at(st._local_ordinal)["/f"] == b"abcdef"


def test_sync_only_covers_prior_writes():
    st = SimBackstore(record_history=True)
    f = st.open("/f", create=True)
    f.pwrite(0, b"one")
    sync_point_before = st._local_ordinal
    f.sync()
    crash = st._local_ordinal
    # a crash exactly before the sync drops the write
    assert st.snapshot_at(sync_point_before)["/f"] == b""
    assert st.snapshot_at(crash)["/f"] == b"one"


def test_throughput_cost_model():
    clock = VirtualClock()
    st = SimBackstore(SimDiskConfig(throughput=50_000_000, store_data=False),
                      clock=clock)
    f = st.open("/bulk", create=True)
    chunk = 1 << 20
    for i in range(100):
        f.pwrite(i * chunk, b"\x00" * chunk)
    f.sync()
    elapsed = clock.now()
    expected = 100 * chunk / 50_000_000
    assert elapsed >= 2.0
    assert abs(elapsed - expected) / expected < 0.10


def test_sync_cost_counts_unique_pages_once():
    clock = VirtualClock()
    st = SimBackstore(SimDiskConfig(throughput=4096, per_sync_latency=1.0),
                      clock=clock)
    f = st.open("/f", create=True)
    for _ in range(10):
        f.pwrite(0, b"\xaa" * 4096)  # same page, combined in the cache
    f.sync()
    assert clock.now() == pytest.approx(2.0)  # 1 page + sync latency


def test_store_data_off_tracks_sizes_only():
    st = SimBackstore(SimDiskConfig(store_data=False))
    f = st.open("/f", create=True)
    f.pwrite(0, b"abcd")
    assert f.size() == 4
    assert f.pread(0, 4) == b"\x00" * 4


def test_cost_sink_diverts_charges():
    clock = VirtualClock()
    st = SimBackstore(SimDiskConfig(per_op_latency=0.5), clock=clock)
    charges = []
    st.cost_sink = charges.append
    f = st.open("/f", create=True)
    f.pwrite(0, b"x")
    assert clock.now() == 0.0
    assert charges == [0.5]


def test_char_device_paths_are_not_block_backed():
    st = SimBackstore()
    st.create_char_device("/dev/null-ish")
    assert not st.is_block_backed("/dev/null-ish")
    assert st.is_block_backed("/anything/else")


def test_fault_injection():
    st = SimBackstore()
    st.fail_next_writes = 1
    f = st.open("/f", create=True)
    with pytest.raises(OSError):
        f.pwrite(0, b"x")
    assert f.pwrite(0, b"x") == 1


def _script(store, root):
    f = store.open(root + "/one", create=True)
    f.pwrite(0, b"hello")
    f.pwrite(3, b"LOWS")
    f.sync()
    g = store.open(root + "/two", create=True)
    g.pwrite(8, b"sparse")
    g.sync()
    f.pwrite(0, b"H")
    f.sync()
    out = (f.pread(0, 16), g.pread(0, 16), f.size(), g.size())
    f.close()
    g.close()
    return out


def test_real_and_sim_behave_identically(tmp_path):
    sim = SimBackstore()
    real = RealBackstore()
    assert _script(sim, "/r") == _script(real, str(tmp_path))


def test_real_backstore_stat_and_sync(tmp_path):
    real = RealBackstore()
    p = str(tmp_path / "f")
    f = real.open(p, create=True)
    f.pwrite(0, b"data")
    f.sync()
    st = real.stat(p)
    assert st.size == 4
    assert real.syncs == 1
    f.close()
    assert real.is_block_backed(p)
