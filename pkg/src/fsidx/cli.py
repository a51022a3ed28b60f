"""Operator command line tying the modules into runnable workflows.

Exit codes: 0 success, 1 usage error, 2 data error, 3 sink failure.
A machine-readable JSON run report goes to stdout (or --report FILE).
"""

from __future__ import annotations

import argparse
import json
import sys

from . import __version__
from .model import SnapshotVersion, VisibilityPolicy
from .pipeline import (
    CountingFile,
    SinkError,
    make_sink,
    postprocess_counts,
    run_aggregate,
    run_counting,
    run_primary,
)
from .preprocess import FORMATS, normalize, write_manifest

USAGE_ERROR = 1
DATA_ERROR = 2
SINK_ERROR = 3


class CliError(Exception):
    def __init__(self, message: str, code: int = USAGE_ERROR):
        super().__init__(message)
        self.code = code


def _read_config(path: str) -> dict:
    """Parse a `key = value` config file; values are JSON literals or strings."""
    out: dict = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{lineno}: expected key = value")
            key, _, value = line.partition("=")
            key = key.strip().replace("-", "_")
            value = value.strip()
            try:
                out[key] = json.loads(value)
            except json.JSONDecodeError:
                out[key] = value
    return out


def _apply_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    """Config file supplies defaults; explicit flags keep priority."""
    if not getattr(args, "config", None):
        return
    config = _read_config(args.config)
    for key, value in config.items():
        if hasattr(args, key) and getattr(args, key) == parser.get_default(key):
            setattr(args, key, value)


def _emit_report(report: dict, path: str | None) -> None:
    text = json.dumps(report, indent=2, sort_keys=True, default=str)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _chunk_paths(chunk_dir: str) -> list[str]:
    import glob
    import os

    paths = sorted(glob.glob(os.path.join(chunk_dir, "*.csv")))
    if not paths:
        raise CliError(f"no chunk files under {chunk_dir}", DATA_ERROR)
    return paths


def _parse_roots(specs: list[str]) -> dict:
    roots = {}
    for spec in specs or []:
        fid, sep, path = spec.partition("=")
        if not sep:
            raise CliError(f"--root needs fid=path, got {spec!r}")
        roots[fid] = path
    return roots


# -- subcommand implementations ---------------------------------------------

def _cmd_preprocess(args) -> dict:
    if args.format not in FORMATS:
        raise CliError(f"unknown format {args.format!r}; options: {sorted(FORMATS)}")
    manifest = normalize(args.input, args.format, args.target_rows, args.out_dir)
    write_manifest(manifest, args.out_dir)
    return json.loads(manifest.to_json())


def _cmd_ingest_primary(args) -> dict:
    chunks = _chunk_paths(args.chunks)
    version = SnapshotVersion(args.version) if args.version else SnapshotVersion.new(
        args.source, int(__import__("time").time())
    )
    visibility = VisibilityPolicy(static=tuple(args.visible_to.split(",")))
    sink = make_sink(args.sink)
    return run_primary(chunks, version, visibility, sink, workers=args.workers,
                       max_bytes=args.batch_bytes, timeout=args.batch_timeout)


def _cmd_count(args) -> dict:
    chunks = _chunk_paths(args.chunks)
    tuples = run_counting(chunks, args.directory_max, workers=args.workers)
    counting = postprocess_counts(tuples)
    with open(args.out, "w") as fh:
        fh.write(counting.to_csv())
    return {
        "workflow": "counting",
        "tuples": len(tuples),
        "principals": len(counting.totals),
        "out": args.out,
    }


def _cmd_aggregate(args) -> dict:
    import os

    chunks = _chunk_paths(args.chunks)
    if not os.path.exists(args.counting):
        raise CliError(
            f"counting file {args.counting!r} not found; run `fsidx count` first",
            USAGE_ERROR,
        )
    with open(args.counting) as fh:
        counting = CountingFile.from_csv(fh.read())
    version = SnapshotVersion(args.version) if args.version else SnapshotVersion.new(
        args.source, int(__import__("time").time())
    )
    visibility = VisibilityPolicy(static=tuple(args.visible_to.split(",")))
    sink = make_sink(args.sink)
    report = run_aggregate(chunks, counting, args.directory_min, args.directory_max,
                           args.alpha, sink, version, visibility, workers=args.workers)
    report["acks"] = len(report.pop("acks"))
    return report


def _cmd_monitor(args) -> dict:
    from .events import read_gpfs_stream, read_lustre_stream
    from .monitor import DirectoryState, LogEmitter, Monitor

    roots = _parse_roots(args.root)
    if not roots:
        raise CliError("at least one --root fid=path binding is required")
    state = DirectoryState(roots, capacity=args.lru_capacity)
    if args.sink.startswith("log:"):
        sink = LogEmitter(args.sink[4:])
    elif args.sink.startswith("index:"):
        from .monitor import IndexEmitter
        from .store import IndexStore

        sink = IndexEmitter(IndexStore(args.sink[6:], kind="primary"))
    else:
        raise CliError(f"monitor sink must be log:<path> or index:<dir>, got {args.sink!r}")
    monitor = Monitor(state, sink, reduce=args.reduce, batch_size=args.batch_size,
                      inactivity=args.inactivity)
    with open(args.input) as fh:
        if args.format == "lustre":
            stream = read_lustre_stream(fh)
        else:
            stream = read_gpfs_stream(fh)
        report = monitor.run(stream)
    report["mode"] = "reduce" if args.reduce else "no-reduce"
    return report


def _cmd_query(args) -> dict:
    import os

    from .store import IndexStore

    kind = args.target
    store = IndexStore(os.path.join(args.index, kind), kind=kind)
    payload = json.loads(args.expr)
    principals = {p.strip() for p in args.principals.split(",") if p.strip()}
    principals.add("public")
    result = store.query(payload, principals)
    result["count"] = len(result["entries"])
    return result


def _cmd_serve(args) -> dict:
    from .service import serve

    serve(args.index, host=args.host, port=args.port, static_dir=args.static)
    return {"status": "stopped"}


def _cmd_gen(args) -> dict:
    import os

    if args.what == "snapshot":
        from .workload import gen_snapshot, write_snapshot_chunks

        rows, _truth = gen_snapshot(files=args.files, users=args.users,
                                    groups=args.groups, seed=args.seed)
        os.makedirs(args.out_dir, exist_ok=True)
        chunks = write_snapshot_chunks(rows, args.out_dir, target_rows=args.target_rows)
        return {"rows": len(rows), "chunks": chunks}
    from .workload import (
        SyntheticFS,
        WorkloadProfile,
        gen_workload,
        write_gpfs_log,
        write_lustre_log,
    )

    fs = SyntheticFS(source=args.format)
    profile = WorkloadProfile(kind=args.profile, iterations=args.iterations,
                              files=args.files, seed=args.seed)
    events = gen_workload(fs, profile)
    writer = write_lustre_log if args.format == "lustre" else write_gpfs_log
    n = writer(events, args.out)
    return {
        "profile": args.profile,
        "events": n,
        "out": args.out,
        "root": {fs.root_fid: fs.mount},
        "live_files": len(fs.live_files()),
    }


def _cmd_bench(args) -> dict:
    from .bench import bench_modes, bench_scaling
    from .workload import WorkloadProfile

    if args.what == "monitor":
        profile = WorkloadProfile(kind=args.profile, iterations=args.iterations,
                                  files=args.files, seed=args.seed)
        return bench_modes(profile, fid2path_latency=args.fid2path_latency,
                           baseline_events=args.baseline_events)
    return bench_scaling(domains_list=tuple(args.domains),
                         events_per_domain=args.iterations,
                         stat_latency=args.stat_latency)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fsidx", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file; flags override")
        p.add_argument("--report", help="write the JSON run report to FILE")

    p = sub.add_parser("preprocess", help="convert a raw export to normalized chunks")
    p.add_argument("--input", required=True)
    p.add_argument("--format", required=True, choices=sorted(FORMATS))
    p.add_argument("--out-dir", required=True)
    p.add_argument("--target-rows", type=int, default=1_000_000)
    common(p)
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("ingest-primary", help="run the primary record workflow")
    p.add_argument("--chunks", required=True, help="directory of chunk CSVs")
    p.add_argument("--version", default=None)
    p.add_argument("--source", default="snapshot")
    p.add_argument("--visible-to", default="public")
    p.add_argument("--sink", default="mem", help="mem | files:<dir> | index:<dir> | http:<url>")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--batch-bytes", type=int, default=10 * 2**20)
    p.add_argument("--batch-timeout", type=float, default=5.0)
    common(p)
    p.set_defaults(func=_cmd_ingest_primary)

    p = sub.add_parser("count", help="run the counting workflow")
    p.add_argument("--chunks", required=True)
    p.add_argument("--directory-max", type=int, default=3)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="counting CSV output path")
    common(p)
    p.set_defaults(func=_cmd_count)

    p = sub.add_parser("aggregate", help="run the aggregate workflow")
    p.add_argument("--chunks", required=True)
    p.add_argument("--counting", required=True, help="counting CSV from `fsidx count`")
    p.add_argument("--directory-min", type=int, default=1)
    p.add_argument("--directory-max", type=int, default=3)
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--version", default=None)
    p.add_argument("--source", default="snapshot")
    p.add_argument("--visible-to", default="public")
    p.add_argument("--sink", default="mem")
    p.add_argument("--workers", type=int, default=1)
    common(p)
    p.set_defaults(func=_cmd_aggregate)

    p = sub.add_parser("monitor", help="reduce a change-event stream into index updates")
    p.add_argument("--input", required=True, help="changelog file (text or JSON lines)")
    p.add_argument("--format", choices=("lustre", "gpfs"), default="lustre")
    p.add_argument("--root", action="append", help="fid=path mount binding (repeatable)")
    p.add_argument("--sink", default="log:monitor-requests.ndjson")
    p.add_argument("--reduce", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--batch-size", type=int, default=1000)
    p.add_argument("--inactivity", type=float, default=5.0)
    p.add_argument("--lru-capacity", type=int, default=None)
    common(p)
    p.set_defaults(func=_cmd_monitor)

    p = sub.add_parser("query", help="query an index directory")
    p.add_argument("--index", required=True, help="index root (contains primary/, aggregate/)")
    p.add_argument("--target", choices=("primary", "aggregate"), default="primary")
    p.add_argument("--expr", required=True, help="query payload as JSON")
    p.add_argument("--principals", default="public")
    common(p)
    p.set_defaults(func=_cmd_query)

    p = sub.add_parser("serve", help="run the HTTP query service")
    p.add_argument("--index", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--static", default=None, help="directory with the web UI build")
    common(p)
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("gen", help="generate synthetic snapshots or workloads")
    p.add_argument("what", choices=("snapshot", "workload"))
    p.add_argument("--files", type=int, default=10_000)
    p.add_argument("--users", type=int, default=20)
    p.add_argument("--groups", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="snapshot-chunks")
    p.add_argument("--target-rows", type=int, default=100_000)
    p.add_argument("--profile", default="eval_perf",
                   choices=("eval_out", "eval_perf", "filebench_like", "mixed"))
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--format", choices=("lustre", "gpfs"), default="lustre")
    p.add_argument("--out", default="workload.log")
    common(p)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("bench", help="benchmark the monitor")
    p.add_argument("what", choices=("monitor", "scaling"))
    p.add_argument("--profile", default="eval_perf",
                   choices=("eval_out", "eval_perf", "filebench_like", "mixed"))
    p.add_argument("--iterations", type=int, default=5000)
    p.add_argument("--files", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fid2path-latency", type=float, default=0.010)
    p.add_argument("--stat-latency", type=float, default=0.001)
    p.add_argument("--baseline-events", type=int, default=250)
    p.add_argument("--domains", type=int, nargs="+", default=[1, 2, 4])
    common(p)
    p.set_defaults(func=_cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code not in (0, None):
            return USAGE_ERROR
        return 0
    try:
        _apply_config(args, parser)
        report = args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except SinkError as exc:
        print(f"sink failure: {exc}", file=sys.stderr)
        if exc.report is not None:
            _emit_report(exc.report, getattr(args, "report", None))
        return SINK_ERROR
    except (OSError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return DATA_ERROR
    _emit_report(report, getattr(args, "report", None))
    return 0


if __name__ == "__main__":
    sys.exit(main())
