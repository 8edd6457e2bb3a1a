"""HTTP service wrapping the cache: instance lifecycle, file operations,
metrics, workload runs, crash campaigns and recovery.

The heavy lifting (workloads, crash sweeps) runs in-process inside the
service; clients only orchestrate.  File-operation payloads travel as
base64.  One instance owns one log region plus its cleaner thread; several
instances can coexist (separate regions), mirroring one-log-per-process
deployments.
"""

from __future__ import annotations

import base64
import binascii
import os
import threading
import uuid
from dataclasses import asdict
from typing import Literal

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import bench as bench_mod
from .backstore import RealBackstore, SimBackstore, SimDiskConfig
from .cleaner import BatchPolicy, CleanerFault
from .core import NeedsRecovery, WriteBackCache
from .pmem import MappedPmem, SimulatedPmem
from .recovery import recover
from .wlog import LogFormatError, region_size_for


class SimDiskModel(BaseModel):
    throughput_mbps: float | None = None
    per_sync_latency_s: float = 0.0
    per_op_latency_s: float = 0.0
    store_data: bool = True

    def to_config(self) -> SimDiskConfig:
        throughput = None if self.throughput_mbps is None \
            else self.throughput_mbps * 1e6
        return SimDiskConfig(throughput=throughput,
                             per_sync_latency=self.per_sync_latency_s,
                             per_op_latency=self.per_op_latency_s,
                             store_data=self.store_data)


class InstanceConfig(BaseModel):
    mode: Literal["sim", "real"] = "sim"
    log_entries: int = Field(default=4096, ge=1)
    entry_size: int = Field(default=4096, ge=64)
    page_size: int = Field(default=4096, ge=64)
    cache_pages: int = Field(default=1024, ge=1)
    min_batch: int = Field(default=1, ge=1)
    max_batch: int = Field(default=10000, ge=1)
    poll_interval_s: float = 0.001
    region_path: str | None = None   # real mode: the DAX-style region file
    sim_disk: SimDiskModel | None = None


class InstanceInfo(BaseModel):
    instance_id: str
    config: InstanceConfig


class OpenRequest(BaseModel):
    path: str
    mode: str = "r"


class OpenResponse(BaseModel):
    fd: int


class WriteRequest(BaseModel):
    data_b64: str
    offset: int | None = None  # None: write at the cursor


class WriteResponse(BaseModel):
    written: int


class ReadRequest(BaseModel):
    length: int = Field(ge=0)
    offset: int | None = None


class ReadResponse(BaseModel):
    data_b64: str
    length: int


class SeekRequest(BaseModel):
    offset: int
    whence: int = Field(default=0, ge=0, le=2)


class SeekResponse(BaseModel):
    cursor: int


class FlockRequest(BaseModel):
    op: Literal["lock_sh", "lock_ex", "unlock"]


class StatResponse(BaseModel):
    size: int
    dev: int
    ino: int


class AckResponse(BaseModel):
    ok: bool = True


class BenchRequest(BaseModel):
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

    def to_spec(self) -> bench_mod.WorkloadSpec:
        return bench_mod.WorkloadSpec(**self.model_dump())


class SeriesPointModel(BaseModel):
    t_seconds: float
    inst_throughput_bytes_s: float
    avg_latency_us: float
    cumulative_bytes: int
    log_occupancy: int
    sync_calls: int


class BenchResponse(BaseModel):
    series: list[SeriesPointModel]
    elapsed: float
    total_bytes: int
    ops: int
    log_entries: int
    metrics: dict


class CampaignRequest(BaseModel):
    writes: int = 200
    seed: int = 0
    files: int = 2
    page_size: int = 256
    entry_size: int = 64
    nb_entries: int = 256
    cache_pages: int = 8
    min_batch: int = 4
    max_batch: int = 32
    cleaner_every: int = 7
    crash_points: int = 0
    image_seeds: int = 2
    max_write: int = 520
    group_lo: int | None = None
    group_hi: int | None = None

    def to_spec(self) -> bench_mod.CampaignSpec:
        data = self.model_dump()
        lo, hi = data.pop("group_lo"), data.pop("group_hi")
        group = (lo, hi) if lo is not None and hi is not None else None
        return bench_mod.CampaignSpec(group_entries=group, **data)


class CampaignResponse(BaseModel):
    ok: bool
    crash_points: int
    images_checked: int
    writes: int
    events: int
    failures: list[str]
    text: str


class RecoverRequest(BaseModel):
    region_path: str
    region_size: int | None = None  # default: current file size
    line_size: int = 64


class RecoverResponse(BaseModel):
    entries_applied: int
    entries_ignored: int
    entries_failed: int
    files_recovered: int
    files_failed: int
    errors: list[str]
    text: str


class _Instance:
    def __init__(self, config: InstanceConfig):
        self.config = config
        if config.mode == "sim":
            disk = (config.sim_disk or SimDiskModel()).to_config()
            self.store = SimBackstore(disk)
            region = SimulatedPmem(
                region_size_for(config.entry_size, config.log_entries))
        else:
            if not config.region_path:
                raise ValueError("real mode needs region_path")
            self.store = RealBackstore()
            region = MappedPmem(
                config.region_path,
                region_size_for(config.entry_size, config.log_entries))
        self.cache = WriteBackCache(
            region, self.store, entry_data_size=config.entry_size,
            nb_entries=config.log_entries, page_size=config.page_size,
            cache_pages=config.cache_pages,
            batch=BatchPolicy(config.min_batch, config.max_batch,
                              config.poll_interval_s))

    def shutdown(self):
        self.cache.shutdown()


def create_app() -> FastAPI:
    app = FastAPI(title="wbcache", version="0.1.0",
                  description="Durable write-back cache service")
    instances: dict[str, _Instance] = {}
    registry_mu = threading.Lock()

    def get_instance(instance_id: str) -> _Instance:
        inst = instances.get(instance_id)
        if inst is None:
            raise HTTPException(404, f"no instance {instance_id}")
        return inst

    def translate(exc: Exception) -> HTTPException:
        if isinstance(exc, FileNotFoundError):
            return HTTPException(404, str(exc))
        if isinstance(exc, FileExistsError):
            return HTTPException(409, str(exc))
        if isinstance(exc, (NeedsRecovery, LogFormatError)):
            return HTTPException(409, str(exc))
        if isinstance(exc, CleanerFault):
            return HTTPException(503, f"cleaner fault: {exc}")
        if isinstance(exc, (OSError, ValueError)):
            return HTTPException(400, str(exc))
        raise exc

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "instances": len(instances)}

    @app.post("/instances", response_model=InstanceInfo)
    def create_instance(config: InstanceConfig) -> InstanceInfo:
        try:
            inst = _Instance(config)
        except Exception as exc:  # noqa: BLE001 - mapped to HTTP
            raise translate(exc) from exc
        instance_id = uuid.uuid4().hex[:12]
        with registry_mu:
            instances[instance_id] = inst
        return InstanceInfo(instance_id=instance_id, config=config)

    @app.get("/instances")
    def list_instances() -> list[str]:
        return sorted(instances)

    @app.delete("/instances/{instance_id}", response_model=AckResponse)
    def drop_instance(instance_id: str) -> AckResponse:
        with registry_mu:
            inst = instances.pop(instance_id, None)
        if inst is None:
            raise HTTPException(404, f"no instance {instance_id}")
        inst.shutdown()
        return AckResponse()

    @app.post("/instances/{instance_id}/files", response_model=OpenResponse)
    def open_file(instance_id: str, req: OpenRequest) -> OpenResponse:
        inst = get_instance(instance_id)
        try:
            return OpenResponse(fd=inst.cache.open(req.path, req.mode))
        except Exception as exc:
            raise translate(exc) from exc

    @app.delete("/instances/{instance_id}/files/{fd}", response_model=AckResponse)
    def close_file(instance_id: str, fd: int) -> AckResponse:
        inst = get_instance(instance_id)
        try:
            inst.cache.close(fd)
        except Exception as exc:
            raise translate(exc) from exc
        return AckResponse()

    @app.post("/instances/{instance_id}/files/{fd}/write",
              response_model=WriteResponse)
    def write_file(instance_id: str, fd: int, req: WriteRequest) -> WriteResponse:
        inst = get_instance(instance_id)
        try:
            data = base64.b64decode(req.data_b64, validate=True)
        except binascii.Error as exc:
            raise HTTPException(422, f"bad base64 payload: {exc}") from exc
        try:
            if req.offset is None:
                written = inst.cache.write(fd, data)
            else:
                written = inst.cache.pwrite(fd, data, req.offset)
        except Exception as exc:
            raise translate(exc) from exc
        return WriteResponse(written=written)

    @app.post("/instances/{instance_id}/files/{fd}/read",
              response_model=ReadResponse)
    def read_file(instance_id: str, fd: int, req: ReadRequest) -> ReadResponse:
        inst = get_instance(instance_id)
        try:
            if req.offset is None:
                data = inst.cache.read(fd, req.length)
            else:
                data = inst.cache.pread(fd, req.length, req.offset)
        except Exception as exc:
            raise translate(exc) from exc
        return ReadResponse(data_b64=base64.b64encode(data).decode(),
                            length=len(data))

    @app.post("/instances/{instance_id}/files/{fd}/seek",
              response_model=SeekResponse)
    def seek_file(instance_id: str, fd: int, req: SeekRequest) -> SeekResponse:
        inst = get_instance(instance_id)
        try:
            return SeekResponse(cursor=inst.cache.lseek(fd, req.offset,
                                                        req.whence))
        except Exception as exc:
            raise translate(exc) from exc

    @app.get("/instances/{instance_id}/files/{fd}/stat",
             response_model=StatResponse)
    def fstat_file(instance_id: str, fd: int) -> StatResponse:
        inst = get_instance(instance_id)
        try:
            st = inst.cache.fstat(fd)
        except Exception as exc:
            raise translate(exc) from exc
        return StatResponse(size=st.size, dev=st.dev, ino=st.ino)

    @app.get("/instances/{instance_id}/stat", response_model=StatResponse)
    def stat_path(instance_id: str, path: str) -> StatResponse:
        inst = get_instance(instance_id)
        try:
            st = inst.cache.stat(path)
        except Exception as exc:
            raise translate(exc) from exc
        return StatResponse(size=st.size, dev=st.dev, ino=st.ino)

    @app.post("/instances/{instance_id}/files/{fd}/fsync",
              response_model=AckResponse)
    def fsync_file(instance_id: str, fd: int) -> AckResponse:
        inst = get_instance(instance_id)
        try:
            inst.cache.fsync(fd)  # intentionally a no-op
        except Exception as exc:
            raise translate(exc) from exc
        return AckResponse()

    @app.post("/instances/{instance_id}/files/{fd}/flock",
              response_model=AckResponse)
    def flock_file(instance_id: str, fd: int, req: FlockRequest) -> AckResponse:
        inst = get_instance(instance_id)
        try:
            inst.cache.flock(fd, req.op)
        except Exception as exc:
            raise translate(exc) from exc
        return AckResponse()

    @app.get("/instances/{instance_id}/metrics")
    def metrics(instance_id: str) -> dict:
        inst = get_instance(instance_id)
        out = inst.cache.metrics()
        out["backstore"] = {
            "preads": inst.store.preads,
            "pwrites": inst.store.pwrites,
            "syncs": inst.store.syncs,
            "bytes_written": inst.store.bytes_written,
        }
        return out

    @app.post("/bench/run", response_model=BenchResponse)
    def bench_run(req: BenchRequest) -> BenchResponse:
        try:
            result = bench_mod.run_workload(req.to_spec())
        except Exception as exc:
            raise translate(exc) from exc
        return BenchResponse(
            series=[SeriesPointModel(**asdict(p)) for p in result.series],
            elapsed=result.elapsed, total_bytes=result.total_bytes,
            ops=result.ops, log_entries=result.log_entries,
            metrics=result.metrics)

    @app.post("/bench/crash-campaign", response_model=CampaignResponse)
    def bench_campaign(req: CampaignRequest) -> CampaignResponse:
        try:
            report = bench_mod.crash_campaign(req.to_spec())
        except Exception as exc:
            raise translate(exc) from exc
        return CampaignResponse(
            ok=report.ok, crash_points=report.crash_points,
            images_checked=report.images_checked, writes=report.writes,
            events=report.events,
            failures=[f"point={f.crash_point} seed={f.image_seed} {f.detail}"
                      for f in report.failures],
            text=report.to_text())

    @app.post("/recover", response_model=RecoverResponse)
    def recover_region(req: RecoverRequest) -> RecoverResponse:
        try:
            size = req.region_size or os.path.getsize(req.region_path)
            region = MappedPmem(req.region_path, size, req.line_size)
            try:
                report = recover(region, RealBackstore())
            finally:
                region.close()
        except Exception as exc:
            raise translate(exc) from exc
        return RecoverResponse(
            entries_applied=report.entries_applied,
            entries_ignored=report.entries_ignored,
            entries_failed=report.entries_failed,
            files_recovered=report.files_recovered,
            files_failed=report.files_failed,
            errors=report.errors, text=report.to_text())

    app.state.instances = instances
    return app


app = create_app()
