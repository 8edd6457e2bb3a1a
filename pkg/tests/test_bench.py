import csv

import pytest

from wbcache.bench import (CampaignSpec, WorkloadSpec, crash_campaign,
                           emit_csv, load_config, run_workload)


def small_spec(**kw):
    base = dict(mix="rand-write", total_bytes=8 << 20, block_size=4096,
                file_size=32 << 20, log_entries=512, entry_size=4096,
                min_batch=200, max_batch=1000, sim_disk_mbps=50.0,
                pmem_mbps=500.0, seed=3, report_period=0.02)
    base.update(kw)
    return WorkloadSpec(**base)


def test_spec_validates_mix():
    with pytest.raises(ValueError):
        WorkloadSpec(mix="write-everything")


def test_deterministic_series_for_same_seed():
    a = run_workload(small_spec())
    b = run_workload(small_spec())
    assert [vars(p) for p in a.series] == [vars(p) for p in b.series]
    c = run_workload(small_spec(seed=4))
    assert [vars(p) for p in a.series] != [vars(p) for p in c.series]


def test_large_log_never_saturates_and_stays_fast():
    res = run_workload(small_spec(log_entries=4096))  # 16 MiB log, 8 MiB run
    assert res.saturation_onset() is None
    overall = res.total_bytes / res.elapsed
    assert overall > 5 * 50e6  # far above the simulated disk


def test_small_log_shows_two_phase_collapse():
    res = run_workload(small_spec())
    onset = res.saturation_onset()
    assert onset is not None
    post = res.throughput_between(onset + 0.05, res.elapsed)
    assert abs(post - 50e6) / 50e6 < 0.2
    assert res.total_bytes == 8 << 20


def test_larger_log_saturates_later():
    early = run_workload(small_spec(report_period=0.002)).saturation_onset()
    late = run_workload(small_spec(report_period=0.002,
                                   log_entries=1536)).saturation_onset()
    assert early is not None and late is not None
    assert late > early


def test_batching_cuts_sync_calls():
    noisy = run_workload(small_spec(min_batch=1, max_batch=1))
    batched = run_workload(small_spec(min_batch=100, max_batch=1000))
    assert noisy.metrics["sync_calls"] >= 100 * batched.metrics["sync_calls"]
    assert (noisy.total_bytes / noisy.elapsed
            <= batched.total_bytes / batched.elapsed)


def test_seq_read_bypasses_the_read_cache():
    res = run_workload(small_spec(mix="seq-read", total_bytes=4 << 20))
    assert res.metrics["bypass_reads"] == res.ops
    assert res.metrics["loaded_pages"] == 0


def test_mixed_workload_runs_and_accounts_bytes():
    res = run_workload(small_spec(mix="rand-rw-50/50", total_bytes=4 << 20,
                                  read_cache_pages=64))
    assert res.total_bytes == 4 << 20
    assert res.ops == (4 << 20) // 4096


def test_threads_split_the_quota():
    res = run_workload(small_spec(threads=4, total_bytes=4 << 20))
    assert res.total_bytes == 4 << 20
    assert res.ops == (4 << 20) // 4096


def test_wall_clock_mode_smoke():
    res = run_workload(small_spec(virtual_time=False, total_bytes=1 << 20,
                                  log_entries=1024, sim_disk_mbps=2000.0,
                                  per_sync_latency=0.0, threads=2,
                                  report_period=0.05))
    assert res.total_bytes == 1 << 20
    assert res.elapsed > 0


def test_emit_csv_columns(tmp_path):
    res = run_workload(small_spec(total_bytes=1 << 20))
    out = tmp_path / "series.csv"
    emit_csv(res.series, str(out))
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t_seconds", "inst_throughput_bytes_s", "avg_latency_us",
                       "cumulative_bytes", "log_occupancy", "sync_calls"]
    assert len(rows) == len(res.series) + 1
    assert int(rows[-1][3]) == res.total_bytes


def test_load_config(tmp_path):
    cfg = tmp_path / "bench.conf"
    cfg.write_text(
        "# saturation experiment\n"
        "mix = rand-write\n"
        "bytes=64M   # inline comment\n"
        "min-batch = 100\n"
        "\n"
        "virtual-time = true\n")
    parsed = load_config(str(cfg))
    assert parsed == {"mix": "rand-write", "bytes": "64M",
                      "min_batch": "100", "virtual_time": "true"}
    bad = tmp_path / "bad.conf"
    bad.write_text("this is not a pair\n")
    with pytest.raises(ValueError):
        load_config(str(bad))


def test_sampled_campaign_subset():
    report = crash_campaign(CampaignSpec(writes=25, crash_points=40,
                                         image_seeds=1, seed=2))
    assert report.crash_points == 40
    assert report.ok, report.to_text()
