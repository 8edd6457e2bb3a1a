"""Workload generator and crash-test driver.

``run_workload`` drives configurable read/write mixes against the cache and
emits a per-period time series (throughput, cumulative average latency,
occupancy, sync calls).  In virtual-time mode the simulated disk's delays
advance a logical clock instead of sleeping, and the cleaner is co-scheduled
deterministically with the workload actors, so saturation curves for
multi-GiB runs reproduce in seconds and two runs with one seed emit
identical series.

``crash_campaign`` runs a scripted write workload on trace-recording
simulated pmem, injects crashes at sampled (or all) persistence-event
boundaries, runs recovery against the surviving disk image, and diffs the
result against the acknowledged-write oracle.  A crash may additionally
preserve a prefix of the page segments of the single in-flight write; any
other difference is a failure.
"""

from __future__ import annotations

import csv
import random
import struct
import threading
import time
from dataclasses import dataclass, field

from .backstore import SimBackstore, SimDiskConfig, VirtualClock, WallClock
from .cleaner import BatchPolicy
from .core import WriteBackCache
from .pmem import ADVERSARIAL_SUBSET, CrashSchedule, SimulatedPmem
from .recovery import recover
from .wlog import region_size_for

MIXES = ("rand-write", "rand-rw-50/50", "seq-write", "seq-read")


@dataclass(frozen=True)
class WorkloadSpec:
    mix: str = "rand-write"
    total_bytes: int = 64 << 20
    block_size: int = 4096
    threads: int = 1
    file_size: int = 256 << 20
    log_entries: int = 16384
    entry_size: int = 4096
    page_size: int = 4096
    read_cache_pages: int = 1024
    min_batch: int = 1000
    max_batch: int = 10000
    sim_disk_mbps: float = 50.0
    per_sync_latency: float = 0.001
    per_op_latency: float = 0.000002
    pmem_mbps: float = 500.0
    seed: int = 0
    virtual_time: bool = True
    report_period: float = 0.25
    file_path: str = "/bench/data"

    def __post_init__(self):
        if self.mix not in MIXES:
            raise ValueError(f"unknown mix {self.mix!r}; pick one of {MIXES}")


@dataclass
class SeriesPoint:
    t_seconds: float
    inst_throughput_bytes_s: float
    avg_latency_us: float
    cumulative_bytes: int
    log_occupancy: int
    sync_calls: int


@dataclass
class WorkloadResult:
    series: list[SeriesPoint]
    elapsed: float
    total_bytes: int
    ops: int
    metrics: dict
    log_entries: int

    def throughput_between(self, t0: float, t1: float) -> float:
        """Average throughput over [t0, t1) from the cumulative column."""
        lo = hi = None
        prev = 0
        prev_t = 0.0
        for p in self.series:
            if p.t_seconds <= t0:
                prev, prev_t = p.cumulative_bytes, p.t_seconds
            if p.t_seconds <= t1:
                lo = (prev, prev_t)
                hi = (p.cumulative_bytes, p.t_seconds)
        if hi is None or hi[1] <= prev_t:
            return 0.0
        return (hi[0] - prev) / (hi[1] - prev_t)

    def saturation_onset(self) -> float | None:
        """Virtual time at which the log first filled, None if it never did."""
        for p in self.series:
            if p.log_occupancy >= self.log_entries:
                return p.t_seconds
        return None


def _op_stream(spec: WorkloadSpec, actor: int):
    """Yield (kind, offset, nbytes) ops until the actor's byte quota is met."""
    rng = random.Random(spec.seed * 9973 + actor)
    quota = spec.total_bytes // spec.threads
    bs = spec.block_size
    blocks_in_file = max(spec.file_size // bs, 1)
    span = blocks_in_file // spec.threads or 1
    seq_block = actor * span
    done = 0
    while done < quota:
        if spec.mix == "rand-write":
            kind = "w"
            block = rng.randrange(blocks_in_file)
        elif spec.mix == "seq-write":
            kind = "w"
            block = seq_block
            seq_block = (seq_block + 1) % blocks_in_file
        elif spec.mix == "seq-read":
            kind = "r"
            block = seq_block
            seq_block = (seq_block + 1) % blocks_in_file
        else:  # rand-rw-50/50
            kind = "w" if rng.random() < 0.5 else "r"
            block = rng.randrange(blocks_in_file)
        yield kind, block * bs, bs
        done += bs


class _VirtualEngine:
    """Deterministic co-scheduler: N workload actors plus the cleaner, each
    with its own timeline; disk costs route to whichever timeline is active."""

    def __init__(self, spec: WorkloadSpec):
        self.spec = spec
        self.clock = VirtualClock()
        disk = SimDiskConfig(throughput=spec.sim_disk_mbps * 1e6,
                             per_sync_latency=spec.per_sync_latency,
                             per_op_latency=spec.per_op_latency,
                             store_data=False)
        self.store = SimBackstore(disk, clock=self.clock)
        region = SimulatedPmem(region_size_for(spec.entry_size, spec.log_entries))
        self.cache = WriteBackCache(
            region, self.store, entry_data_size=spec.entry_size,
            nb_entries=spec.log_entries, page_size=spec.page_size,
            cache_pages=spec.read_cache_pages,
            batch=BatchPolicy(spec.min_batch, spec.max_batch, 0.0),
            start_cleaner=False)
        self.store.cost_sink = self._on_cost
        self.cache.log.full_wait_hook = self._on_full
        self.cleaner_time = 0.0
        self.actor_charge = 0.0
        self.wait_floor = 0.0
        self._route_cleaner = False
        self.pmem_rate = spec.pmem_mbps * 1e6
        self.records: list[tuple[float, int, float]] = []  # (end, bytes, latency)
        self.ops = 0

    def _on_cost(self, dt: float) -> None:
        if self._route_cleaner:
            self.cleaner_time += dt
        else:
            self.actor_charge += dt

    def _cleaner_step(self) -> bool:
        was = self._route_cleaner
        self._route_cleaner = True
        try:
            return self.cache.cleaner.step()
        finally:
            self._route_cleaner = was

    def _on_full(self, log) -> None:
        # the blocked writer resumes once the cleaner finishes another batch;
        # with a saturated log the cleaner has been running back to back, so
        # its own timeline continues, except in the degenerate case where the
        # log is smaller than min_batch and the cleaner was genuinely idle
        if self.cache.log.occupancy() < self.spec.min_batch:
            self.cleaner_time = max(self.cleaner_time, self.wait_floor)
        if not self._cleaner_step():
            raise RuntimeError("log full but nothing consumable")
        self.wait_floor = max(self.wait_floor, self.cleaner_time)

    def _pump_cleaner(self, limit: float) -> None:
        """Background progress: run batches the cleaner would have finished
        by `limit` had it been a real thread."""
        while (self.cleaner_time < limit
               and self.cache.log.occupancy() >= self.spec.min_batch):
            if not self._cleaner_step():
                break

    def run(self) -> WorkloadResult:
        spec = self.spec
        self.store.seed_file(spec.file_path, spec.file_size)
        mode = "r" if spec.mix == "seq-read" else "r+"
        fd = self.cache.open(spec.file_path, mode)
        streams = [_op_stream(spec, i) for i in range(spec.threads)]
        times = [0.0] * spec.threads
        active = set(range(spec.threads))
        samples: list[tuple[float, int, int]] = []  # (t, occupancy, syncs)
        block = b"\xb5" * spec.block_size
        while active:
            actor = min(active, key=times.__getitem__)
            op = next(streams[actor], None)
            if op is None:
                active.discard(actor)
                continue
            kind, offset, nbytes = op
            start = times[actor]
            self._pump_cleaner(start)
            self.actor_charge = 0.0
            self.wait_floor = start
            if kind == "w":
                self.cache.pwrite(fd, block, offset)
            else:
                self.cache.pread(fd, nbytes, offset)
            self.actor_charge += nbytes / self.pmem_rate
            end = max(start + self.actor_charge, self.wait_floor)
            times[actor] = end
            self.records.append((end, nbytes, end - start))
            self.ops += 1
            samples.append((end, self.cache.log.occupancy(),
                            self.cache.cleaner.sync_calls))
        # the workload is done once the last op returned; the final drain
        # at close happens off the measured clock, like a background flush
        elapsed = max(times, default=0.0)
        self._route_cleaner = True
        self.cache.close(fd)
        self.cache.shutdown()
        self._route_cleaner = False
        series = _build_series(self.records, samples, spec.report_period)
        return WorkloadResult(series, elapsed, sum(r[1] for r in self.records),
                              self.ops, self.cache.metrics(), spec.log_entries)


def _build_series(records, samples, period: float) -> list[SeriesPoint]:
    if not records:
        return []
    records = sorted(records, key=lambda r: r[0])
    samples = sorted(samples, key=lambda s: s[0])
    horizon = records[-1][0]
    out = []
    cum_bytes = 0
    lat_sum = 0.0
    n_ops = 0
    ri = si = 0
    occupancy = syncs = 0
    bucket = 0
    while bucket * period < horizon or bucket == 0:
        t1 = (bucket + 1) * period
        bucket_bytes = 0
        while ri < len(records) and records[ri][0] <= t1:
            _, nbytes, lat = records[ri]
            bucket_bytes += nbytes
            lat_sum += lat
            n_ops += 1
            ri += 1
        while si < len(samples) and samples[si][0] <= t1:
            _, occupancy, syncs = samples[si]
            si += 1
        cum_bytes += bucket_bytes
        out.append(SeriesPoint(
            t_seconds=round(t1, 9),
            inst_throughput_bytes_s=bucket_bytes / period,
            avg_latency_us=(lat_sum / n_ops * 1e6) if n_ops else 0.0,
            cumulative_bytes=cum_bytes,
            log_occupancy=occupancy,
            sync_calls=syncs,
        ))
        bucket += 1
    return out


def _run_threaded(spec: WorkloadSpec) -> WorkloadResult:
    """Wall-clock mode: real worker threads, real cleaner thread, simulated
    disk delays actually sleep."""
    clock = WallClock()
    disk = SimDiskConfig(throughput=spec.sim_disk_mbps * 1e6,
                         per_sync_latency=spec.per_sync_latency,
                         per_op_latency=spec.per_op_latency, store_data=False)
    store = SimBackstore(disk, clock=clock)
    region = SimulatedPmem(region_size_for(spec.entry_size, spec.log_entries))
    cache = WriteBackCache(region, store, entry_data_size=spec.entry_size,
                           nb_entries=spec.log_entries, page_size=spec.page_size,
                           cache_pages=spec.read_cache_pages,
                           batch=BatchPolicy(spec.min_batch, spec.max_batch))
    store.seed_file(spec.file_path, spec.file_size)
    fd = cache.open(spec.file_path, "r" if spec.mix == "seq-read" else "r+")
    t0 = time.monotonic()
    records: list[tuple[float, int, float]] = []
    samples: list[tuple[float, int, int]] = []
    mu = threading.Lock()
    block = b"\xb5" * spec.block_size

    def work(actor: int):
        for kind, offset, nbytes in _op_stream(spec, actor):
            s = time.monotonic()
            if kind == "w":
                cache.pwrite(fd, block, offset)
            else:
                cache.pread(fd, nbytes, offset)
            e = time.monotonic()
            with mu:
                records.append((e - t0, nbytes, e - s))
                samples.append((e - t0, cache.log.occupancy(),
                                cache.cleaner.sync_calls))

    threads = [threading.Thread(target=work, args=(i,))
               for i in range(spec.threads)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    cache.close(fd)
    cache.shutdown()
    elapsed = time.monotonic() - t0
    series = _build_series(records, samples, spec.report_period)
    return WorkloadResult(series, elapsed, sum(r[1] for r in records),
                          len(records), cache.metrics(), spec.log_entries)


def run_workload(spec: WorkloadSpec) -> WorkloadResult:
    if spec.virtual_time:
        return _VirtualEngine(spec).run()
    return _run_threaded(spec)


def emit_csv(series: list[SeriesPoint], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t_seconds", "inst_throughput_bytes_s",
                         "avg_latency_us", "cumulative_bytes",
                         "log_occupancy", "sync_calls"])
        for p in series:
            writer.writerow([p.t_seconds, p.inst_throughput_bytes_s,
                             p.avg_latency_us, p.cumulative_bytes,
                             p.log_occupancy, p.sync_calls])


def load_config(path: str) -> dict:
    """key=value config file mirroring the CLI flags; '#' starts a comment."""
    out: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip().replace("-", "_")] = value.strip()
    return out


# ---------------------------------------------------------------------------
# crash campaigns
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CampaignSpec:
    writes: int = 200
    seed: int = 0
    files: int = 2
    page_size: int = 256
    entry_size: int = 64
    nb_entries: int = 256
    cache_pages: int = 8
    min_batch: int = 4
    max_batch: int = 32
    cleaner_every: int = 7          # run a cleaner batch every N writes
    crash_points: int = 0           # 0 = exhaustive
    image_seeds: int = 2            # adversarial images per crash point
    max_write: int = 520
    group_entries: tuple[int, int] | None = None  # force (lo, hi) entries/write
    read_back: bool = False         # interleave reads (observer support)


@dataclass
class CampaignFailure:
    crash_point: int
    image_seed: int
    detail: str


@dataclass
class CampaignReport:
    crash_points: int = 0
    images_checked: int = 0
    writes: int = 0
    events: int = 0
    failures: list[CampaignFailure] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_text(self) -> str:
        lines = [
            f"crash_points: {self.crash_points}",
            f"images_checked: {self.images_checked}",
            f"writes: {self.writes}",
            f"events: {self.events}",
            f"failures: {len(self.failures)}",
        ]
        lines.extend(f"failure: point={f.crash_point} seed={f.image_seed} "
                     f"{f.detail}" for f in self.failures[:20])
        return "\n".join(lines) + "\n"


@dataclass
class _WriteRec:
    path: str
    offset: int
    payload: bytes
    segments: list[tuple[int, bytes]]   # (offset, bytes) per page segment
    start: int                          # pmem event ordinal before the call
    ack: int                            # pmem event ordinal after return


def _pattern(tag: int, length: int) -> bytes:
    unit = struct.pack("<I", tag & 0xFFFFFFFF)
    reps = -(-length // 4)
    return (unit * reps)[:length]


def _split_segments(offset: int, payload: bytes, page_size: int):
    out = []
    pos = 0
    while pos < len(payload):
        page_no = (offset + pos) // page_size
        take = min(len(payload) - pos,
                   (page_no + 1) * page_size - (offset + pos))
        out.append((offset + pos, payload[pos:pos + take]))
        pos += take
    return out


def run_campaign_workload(spec: CampaignSpec):
    """Execute the scripted workload; returns (region, store, script, paths,
    setup) where setup is the first meaningful crash ordinal (the region is
    formatted and its header durable from there on)."""
    region = SimulatedPmem(
        region_size_for(spec.entry_size, spec.nb_entries), record_trace=True)
    store = SimBackstore(SimDiskConfig(), record_history=True,
                         ordinal_source=lambda: region.event_count)
    cache = WriteBackCache(region, store, entry_data_size=spec.entry_size,
                           nb_entries=spec.nb_entries, page_size=spec.page_size,
                           cache_pages=spec.cache_pages,
                           batch=BatchPolicy(spec.min_batch, spec.max_batch),
                           start_cleaner=False)
    cache.log.full_wait_hook = lambda _log: cache.cleaner.step()
    setup = region.event_count
    rng = random.Random(spec.seed)
    paths = [f"/data/f{i}" for i in range(spec.files)]
    fds = {path: cache.open(path, "w+") for path in paths}
    script: list[_WriteRec] = []
    file_pages = 16
    for i in range(spec.writes):
        path = paths[rng.randrange(spec.files)]
        if spec.group_entries is not None:
            lo, hi = spec.group_entries
            length = spec.entry_size * rng.randint(lo, hi)
            length = min(length, spec.page_size)
            offset = rng.randrange(file_pages) * spec.page_size
        else:
            length = rng.randint(1, spec.max_write)
            offset = rng.randrange(file_pages * spec.page_size)
        payload = _pattern(i + 1, length)
        start = region.event_count
        cache.pwrite(fds[path], payload, offset)
        script.append(_WriteRec(path, offset, payload,
                                _split_segments(offset, payload, spec.page_size),
                                start, region.event_count))
        if spec.read_back and rng.random() < 0.3:
            cache.pread(fds[path], rng.randint(1, spec.max_write),
                        rng.randrange(file_pages * spec.page_size))
        if (i + 1) % spec.cleaner_every == 0:
            cache.cleaner.step()
    for path in paths:
        cache.close(fds[path])
    cache.shutdown()
    return region, store, script, paths, setup


class _Oracle:
    """Acknowledged-write state, advanced incrementally as the crash point
    moves forward."""

    def __init__(self, script: list[_WriteRec], paths: list[str]):
        self.script = script
        self.files: dict[str, bytearray] = {p: bytearray() for p in paths}
        self.applied = 0

    def _apply(self, buf: bytearray, offset: int, payload: bytes) -> None:
        end = offset + len(payload)
        if end > len(buf):
            buf.extend(bytes(end - len(buf)))
        buf[offset:end] = payload

    def advance_to(self, point: int) -> None:
        while (self.applied < len(self.script)
               and self.script[self.applied].ack <= point):
            rec = self.script[self.applied]
            self._apply(self.files[rec.path], rec.offset, rec.payload)
            self.applied += 1

    def explain_mismatch(self, point: int,
                         recovered: dict[str, bytes]) -> str | None:
        """None if recovered state is the acknowledged oracle, possibly plus
        a prefix of the page segments of the write in flight at the crash
        (committed segments of an unacknowledged write may legally appear)."""
        base = {p: bytes(b) for p, b in self.files.items()}
        candidates = [base]
        if self.applied < len(self.script):
            rec = self.script[self.applied]
            if rec.start <= point:
                rolling = {p: bytearray(b) for p, b in self.files.items()}
                for seg_off, seg_data in rec.segments:
                    self._apply(rolling[rec.path], seg_off, seg_data)
                    candidates.append({p: bytes(b) for p, b in rolling.items()})
        for candidate in candidates:
            if self._equal(candidate, recovered):
                return None
        return self._diff(base, recovered)

    @staticmethod
    def _equal(expected: dict[str, bytes], recovered: dict[str, bytes]) -> bool:
        for path, data in expected.items():
            got = recovered.get(path, b"")
            if got.ljust(len(data), b"\x00") != data.ljust(len(got), b"\x00"):
                return False
        return True

    @staticmethod
    def _diff(expected: dict[str, bytes], recovered: dict[str, bytes]) -> str:
        for path, data in expected.items():
            got = recovered.get(path, b"")
            n = max(len(data), len(got))
            a, b = data.ljust(n, b"\x00"), got.ljust(n, b"\x00")
            for i in range(n):
                if a[i] != b[i]:
                    return (f"{path} differs at byte {i}: "
                            f"expected {a[i]:#x} got {b[i]:#x}")
        return "file set mismatch"


def crash_campaign(spec: CampaignSpec) -> CampaignReport:
    region, store, script, paths, setup = run_campaign_workload(spec)
    report = CampaignReport(writes=len(script), events=region.event_count)
    all_points = [p for p in region.enumerate_crash_points() if p >= setup]
    if spec.crash_points and spec.crash_points < len(all_points):
        rng = random.Random(spec.seed ^ 0x5EED)
        points = sorted(rng.sample(all_points, spec.crash_points))
    else:
        points = all_points
    oracle = _Oracle(script, paths)
    for point in points:
        oracle.advance_to(point)
        report.crash_points += 1
        for image_seed in range(spec.image_seeds):
            report.images_checked += 1
            image = region.crash(CrashSchedule(
                seed=image_seed, policy=ADVERSARIAL_SUBSET, crash_point=point))
            disk = store.snapshot_at(point, drop_unsynced=True)
            survivor = SimBackstore()
            for path, data in disk.items():
                survivor.seed_file(path, len(data), data)
            recover(SimulatedPmem.from_image(image), survivor)
            recovered = {
                path: survivor.open(path, create=True).pread(0, 1 << 30)
                for path in paths}
            detail = oracle.explain_mismatch(point, recovered)
            if detail is not None:
                report.failures.append(
                    CampaignFailure(point, image_seed, detail))
    return report
