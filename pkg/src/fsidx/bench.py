"""Throughput benchmarks for the monitor's resolution and reduction modes.

Modes mirror the deployment strategies:

* ``baseline``        — per-event external path resolution, no reduction
* ``stateful``        — hierarchical in-memory state, no reduction
* ``stateful-reduce`` — hierarchical state plus batch reduction

Domain scaling runs one monitor per independent event stream; per-event
stat latency models the metadata server round trip, which is what the
parallel domains overlap.
"""

from __future__ import annotations

import threading
import time

from .monitor import CollectEmitter, DirectoryState, Monitor
from .workload import SyntheticFS, WorkloadProfile, gen_workload

MODES = ("baseline", "stateful", "stateful-reduce")


def _make_monitor(mode: str, fs: SyntheticFS, batch_size: int) -> Monitor:
    state = DirectoryState({fs.root_fid: fs.mount}, resolver=fs.fid2path)
    return Monitor(
        state,
        sink=CollectEmitter(),
        reduce=(mode == "stateful-reduce"),
        per_event_resolution=(mode == "baseline"),
        batch_size=batch_size,
        stat_source=fs.stat,
    )


def bench_modes(
    profile: WorkloadProfile,
    modes: tuple[str, ...] = MODES,
    fid2path_latency: float = 0.010,
    stat_latency: float = 0.0,
    batch_size: int = 1000,
    baseline_events: int | None = 250,
    repeats: int = 3,
) -> dict:
    """Events/s per mode over one generated stream.

    The baseline mode pays the external-resolution latency on every event,
    so it runs over a truncated prefix of the stream (full runs would take
    minutes); throughput is unaffected because the cost is per event.
    """
    fs = SyntheticFS(fid2path_latency=0.0, stat_latency=0.0)
    events = gen_workload(fs, profile)
    results: dict = {"events": len(events), "profile": profile.kind, "modes": {}}
    for mode in modes:
        stream = events
        if mode == "baseline" and baseline_events is not None:
            stream = events[:baseline_events]
        fs.fid2path_latency = fid2path_latency if mode == "baseline" else 0.0
        fs.stat_latency = stat_latency
        best = 0.0
        runs = 1 if mode == "baseline" else repeats
        for _ in range(runs):
            monitor = _make_monitor(mode, fs, batch_size)
            start = time.perf_counter()
            monitor.run(iter(stream))
            elapsed = time.perf_counter() - start
            best = max(best, len(stream) / elapsed)
        results["modes"][mode] = {
            "events": len(stream),
            "events_per_s": best,
            "cancelled_pairs": monitor.stats["cancelled_pairs"],
        }
    fs.fid2path_latency = 0.0
    fs.stat_latency = 0.0
    return results


def bench_scaling(
    domains_list: tuple[int, ...] = (1, 2, 4),
    events_per_domain: int = 2000,
    files_per_domain: int = 500,
    stat_latency: float = 0.001,
    batch_size: int = 200,
    seed: int = 7,
) -> dict:
    """Aggregate throughput as independent monitor domains run side by side.

    Each domain is its own synthetic file system, event stream, and monitor
    (mirroring one metadata partition per monitor); streams are generated
    up front so only monitor processing is timed.
    """
    prepared = []
    max_domains = max(domains_list)
    for d in range(max_domains):
        fs = SyntheticFS(mount=f"/mdt{d}", stat_latency=stat_latency)
        profile = WorkloadProfile(kind="filebench_like", iterations=events_per_domain,
                                  files=files_per_domain, threads=8, seed=seed + d)
        events = gen_workload(fs, profile)
        prepared.append((fs, events))

    results: dict = {"events_per_domain": [len(e) for _, e in prepared], "runs": {}}
    for n in domains_list:
        monitors = [_make_monitor("stateful-reduce", fs, batch_size) for fs, _ in prepared[:n]]
        threads = [
            threading.Thread(target=m.run, args=(iter(events),))
            for m, (_, events) in zip(monitors, prepared[:n])
        ]
        total = sum(len(events) for _, events in prepared[:n])
        start = time.perf_counter()
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        elapsed = time.perf_counter() - start
        results["runs"][n] = {"events": total, "seconds": elapsed,
                              "events_per_s": total / elapsed}
    base = results["runs"][domains_list[0]]["events_per_s"]
    for n in domains_list:
        results["runs"][n]["speedup"] = results["runs"][n]["events_per_s"] / base
    return results
