"""Command-line client.

``serve`` starts the HTTP service; the other subcommands are thin clients
that POST to a running server (``--server``) or, with ``--local``, call the
same library entry points in-process.  Every flag can also come from a
key=value config file (``--config``); explicit flags win over the file.
"""

from __future__ import annotations

import argparse
import os
import sys

import httpx

from . import bench as bench_mod
from .backstore import RealBackstore
from .pmem import MappedPmem
from .recovery import recover

DEFAULT_SERVER = "http://127.0.0.1:8077"

_SIZE_SUFFIXES = {"k": 1 << 10, "m": 1 << 20, "g": 1 << 30, "t": 1 << 40}


def parse_size(text: str) -> int:
    raw = str(text).strip().lower().rstrip("b")
    if raw and raw[-1] in _SIZE_SUFFIXES:
        return int(float(raw[:-1]) * _SIZE_SUFFIXES[raw[-1]])
    return int(raw)


def parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    return str(text).strip().lower() in ("1", "true", "yes", "on")


def build_client(server: str) -> httpx.Client:
    # tests swap this out for an in-process ASGI client
    return httpx.Client(base_url=server, timeout=None)


# flag name -> (spec field, converter)
_BENCH_FLAGS = {
    "--mix": ("mix", str),
    "--bytes": ("total_bytes", parse_size),
    "--bs": ("block_size", parse_size),
    "--threads": ("threads", int),
    "--file-size": ("file_size", parse_size),
    "--log-entries": ("log_entries", int),
    "--entry-size": ("entry_size", parse_size),
    "--page-size": ("page_size", parse_size),
    "--read-cache-pages": ("read_cache_pages", int),
    "--min-batch": ("min_batch", int),
    "--max-batch": ("max_batch", int),
    "--sim-disk-mbps": ("sim_disk_mbps", float),
    "--pmem-mbps": ("pmem_mbps", float),
    "--seed": ("seed", int),
    "--virtual-time": ("virtual_time", parse_bool),
    "--report-period": ("report_period", float),
}

_CAMPAIGN_FLAGS = {
    "--crash-points": ("crash_points", int),
    "--writes": ("writes", int),
    "--seed": ("seed", int),
    "--files": ("files", int),
    "--entry-size": ("entry_size", parse_size),
    "--page-size": ("page_size", parse_size),
    "--log-entries": ("nb_entries", int),
    "--min-batch": ("min_batch", int),
    "--max-batch": ("max_batch", int),
    "--image-seeds": ("image_seeds", int),
    "--group-lo": ("group_lo", int),
    "--group-hi": ("group_hi", int),
}


def _add_flags(parser: argparse.ArgumentParser, table: dict) -> None:
    for flag, (dest, conv) in table.items():
        if conv is parse_bool:
            parser.add_argument(flag, dest=dest, nargs="?", const="true",
                                default=None, metavar="BOOL")
        else:
            parser.add_argument(flag, dest=dest, type=str, default=None)


def _merge(table: dict, args: argparse.Namespace, config: dict) -> dict:
    """config file < explicit flags, converted to their target types.
    Config keys mirror the flag names (dashes or underscores)."""
    out: dict = {}
    for flag, (dest, conv) in table.items():
        key = flag.lstrip("-").replace("-", "_")
        if key in config:
            out[dest] = conv(config[key])
        elif dest in config:
            out[dest] = conv(config[dest])
        value = getattr(args, dest, None)
        if value is not None:
            out[dest] = conv(value)
    return out


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None,
                        help="key=value file mirroring the flags")
    parser.add_argument("--server", default=DEFAULT_SERVER,
                        help="service base URL")
    parser.add_argument("--local", action="store_true",
                        help="run in-process instead of against a server")
    parser.add_argument("--csv-out", default=None,
                        help="write the time series as CSV")


def _load_config(args: argparse.Namespace) -> dict:
    return bench_mod.load_config(args.config) if args.config else {}


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn
    uvicorn.run("wbcache.service:app", host=args.host, port=args.port,
                log_level=args.log_level)
    return 0


def _print_bench_summary(payload: dict) -> None:
    total = payload["total_bytes"]
    elapsed = payload["elapsed"]
    rate = total / elapsed if elapsed else float("inf")
    print(f"bytes: {total}")
    print(f"ops: {payload['ops']}")
    print(f"elapsed_s: {elapsed:.3f}")
    print(f"throughput_bytes_s: {rate:.0f}")
    print(f"sync_calls: {payload['metrics'].get('sync_calls')}")


def cmd_bench(args: argparse.Namespace) -> int:
    values = _merge(_BENCH_FLAGS, args, _load_config(args))
    if args.local:
        result = bench_mod.run_workload(bench_mod.WorkloadSpec(**values))
        payload = {
            "series": [vars(p) for p in result.series],
            "elapsed": result.elapsed, "total_bytes": result.total_bytes,
            "ops": result.ops, "metrics": result.metrics,
        }
    else:
        with build_client(args.server) as client:
            resp = client.post("/bench/run", json=values)
            if resp.status_code != 200:
                print(f"server error {resp.status_code}: {resp.text}",
                      file=sys.stderr)
                return 2
            payload = resp.json()
    _print_bench_summary(payload)
    if args.csv_out:
        points = [bench_mod.SeriesPoint(**p) for p in payload["series"]]
        bench_mod.emit_csv(points, args.csv_out)
        print(f"csv: {args.csv_out}")
    return 0


def cmd_campaign(args: argparse.Namespace) -> int:
    values = _merge(_CAMPAIGN_FLAGS, args, _load_config(args))
    if args.local:
        lo, hi = values.pop("group_lo", None), values.pop("group_hi", None)
        if lo is not None and hi is not None:
            values["group_entries"] = (lo, hi)
        report = bench_mod.crash_campaign(bench_mod.CampaignSpec(**values))
        print(report.to_text(), end="")
        return 0 if report.ok else 1
    with build_client(args.server) as client:
        resp = client.post("/bench/crash-campaign", json=values)
        if resp.status_code != 200:
            print(f"server error {resp.status_code}: {resp.text}",
                  file=sys.stderr)
            return 2
        payload = resp.json()
    print(payload["text"], end="")
    return 0 if payload["ok"] else 1


def cmd_recover(args: argparse.Namespace) -> int:
    if args.local:
        size = args.region_size or os.path.getsize(args.region)
        region = MappedPmem(args.region, size, args.line_size)
        try:
            report = recover(region, RealBackstore())
        finally:
            region.close()
        print(report.to_text(), end="")
        return 0 if not report.files_failed else 1
    with build_client(args.server) as client:
        resp = client.post("/recover", json={
            "region_path": args.region, "region_size": args.region_size,
            "line_size": args.line_size})
        if resp.status_code != 200:
            print(f"server error {resp.status_code}: {resp.text}",
                  file=sys.stderr)
            return 2
        payload = resp.json()
    print(payload["text"], end="")
    return 0 if not payload["files_failed"] else 1


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wbcache",
        description="durable write-back cache: service, benchmarks, recovery")
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the HTTP service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8077)
    serve.add_argument("--log-level", default="info")
    serve.set_defaults(func=cmd_serve)

    bench = sub.add_parser("bench", help="run a workload, emit a time series")
    _add_flags(bench, _BENCH_FLAGS)
    _common(bench)
    bench.set_defaults(func=cmd_bench)

    campaign = sub.add_parser("crash-campaign",
                              help="crash-sweep a scripted workload")
    _add_flags(campaign, _CAMPAIGN_FLAGS)
    _common(campaign)
    campaign.set_defaults(func=cmd_campaign)

    rec = sub.add_parser("recover", help="replay a region onto its files")
    rec.add_argument("--region", required=True)
    rec.add_argument("--region-size", type=parse_size, default=None)
    rec.add_argument("--line-size", type=int, default=64)
    _common(rec)
    rec.set_defaults(func=cmd_recover)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
