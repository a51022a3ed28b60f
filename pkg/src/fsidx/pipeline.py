"""The three snapshot workflows: primary, counting, and aggregate.

Each is a map-reduce over normalized CSV chunks. Chunks are the unit of map
parallelism; reduce state is partitioned by (principal, shard) so no two
workers ever share a partition. The counting workflow must complete before
the aggregate workflow, which consumes its output as auxiliary input.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
import zlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple

from .model import (
    AGG_ATTRS,
    AggregateRecord,
    NormalizedRow,
    Principal,
    QUANTILE_LABELS,
    QUANTILES,
    RowError,
    SnapshotVersion,
    VisibilityPolicy,
    build_primary_record,
    principal_from_counting_id,
)
from .preprocess import read_rows
from .sketch import QuantileSketch

log = logging.getLogger(__name__)

SHARDS = 64
MAX_BUNDLE_BYTES = 10 * 2**20
BUNDLE_TIMEOUT = 5.0


class SinkError(RuntimeError):
    """A sink rejected a payload after bounded retries."""

    def __init__(self, message: str, report: dict | None = None):
        super().__init__(message)
        self.report = report


class ConsistencyError(RuntimeError):
    """Aggregate input disagrees with the counting file."""


def shard_of(row_bytes: bytes, shards: int = SHARDS) -> int:
    """Shard id for one row: CRC-32 of its UTF-8 bytes, modulo the shard count."""
    return zlib.crc32(row_bytes) % shards


# ---------------------------------------------------------------------------
# Record bundling
# ---------------------------------------------------------------------------

@dataclass
class Bundle:
    """An ordered batch of records plus the reason it was flushed."""

    entries: list
    serialized_size: int
    reason: str  # "size" | "timeout" | "end" | "oversize"
    version: str

    def to_doc(self) -> dict:
        return {
            "ingest_type": "GMetaList",
            "entries": self.entries,
            "version": self.version,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_doc(), separators=(",", ":"), sort_keys=True)


def _entry_bytes(entry: dict) -> int:
    return len(json.dumps(entry, separators=(",", ":"), sort_keys=True).encode("utf-8"))


class Bundler:
    """Accumulates records and flushes by size, timeout, or end-of-stream.

    The timeout clock starts when the buffer becomes non-empty; `poll` must
    be called periodically (drivers do this between records).
    """

    def __init__(
        self,
        version: str,
        max_bytes: int = MAX_BUNDLE_BYTES,
        timeout: float = BUNDLE_TIMEOUT,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.version = version
        self.max_bytes = max_bytes
        self.timeout = timeout
        self.clock = clock
        self._buf: list = []
        self._size = 0
        self._since: float | None = None
        # Fixed envelope cost of the bundle document around its entries.
        self._envelope = len(
            json.dumps({"ingest_type": "GMetaList", "entries": [], "version": version},
                       separators=(",", ":"), sort_keys=True).encode("utf-8")
        )

    def _doc_size(self, extra: int = 0, extra_n: int = 0) -> int:
        n = len(self._buf) + extra_n
        return self._envelope + self._size + extra + max(0, n - 1)

    def _flush(self, reason: str) -> Bundle:
        bundle = Bundle(self._buf, self._doc_size(), reason, self.version)
        self._buf = []
        self._size = 0
        self._since = None
        return bundle

    def add(self, entry: dict) -> list[Bundle]:
        """Add one record; returns any bundles this add caused to flush."""
        out: list[Bundle] = []
        nbytes = _entry_bytes(entry)
        if self._buf and self._doc_size(nbytes, 1) > self.max_bytes:
            out.append(self._flush("size"))
        if self._since is None:
            self._since = self.clock()
        self._buf.append(entry)
        self._size += nbytes
        if self._doc_size() > self.max_bytes:
            # A single record larger than the cap ships alone, flagged.
            log.warning("record of %d bytes exceeds bundle cap %d", nbytes, self.max_bytes)
            out.append(self._flush("oversize"))
        return out

    def poll(self, now: float | None = None) -> Bundle | None:
        if self._since is None:
            return None
        now = self.clock() if now is None else now
        if now - self._since >= self.timeout:
            return self._flush("timeout")
        return None

    def finish(self) -> Bundle | None:
        if not self._buf:
            return None
        return self._flush("end")

    def time_remaining(self, now: float | None = None) -> float | None:
        if self._since is None:
            return None
        now = self.clock() if now is None else now
        return max(0.0, self.timeout - (now - self._since))


def bundle_records(
    records: Iterable[dict],
    version: str,
    max_bytes: int = MAX_BUNDLE_BYTES,
    timeout: float = BUNDLE_TIMEOUT,
    clock: Callable[[], float] = time.monotonic,
):
    """Bundle an in-memory record stream; yields Bundles in order."""
    bundler = Bundler(version, max_bytes, timeout, clock)
    for record in records:
        timed_out = bundler.poll()
        if timed_out is not None:
            yield timed_out
        yield from bundler.add(record)
    tail = bundler.finish()
    if tail is not None:
        yield tail


_STOP = object()


def bundle_queue(
    source: "queue.Queue",
    version: str,
    max_bytes: int = MAX_BUNDLE_BYTES,
    timeout: float = BUNDLE_TIMEOUT,
):
    """Bundle a live queue of records; flushes on timeout even while idle.

    The producer signals end-of-stream by putting `None`.
    """
    bundler = Bundler(version, max_bytes, timeout)
    while True:
        wait = bundler.time_remaining()
        try:
            item = source.get(timeout=wait)
        except queue.Empty:
            flushed = bundler.poll()
            if flushed is not None:
                yield flushed
            continue
        if item is None:
            tail = bundler.finish()
            if tail is not None:
                yield tail
            return
        flushed = bundler.poll()
        if flushed is not None:
            yield flushed
        yield from bundler.add(item)


# ---------------------------------------------------------------------------
# Sinks
# ---------------------------------------------------------------------------

class CollectSink:
    """In-memory sink for tests and dry runs."""

    def __init__(self):
        self.bundles: list[dict] = []

    def submit(self, doc: dict) -> str:
        self.bundles.append(doc)
        return f"mem-{len(self.bundles) - 1}"


class BundleFileSink:
    """Writes each bundle as one JSON document on disk."""

    def __init__(self, out_dir: str):
        import os

        os.makedirs(out_dir, exist_ok=True)
        self.out_dir = out_dir
        self._seq = 0
        self._lock = threading.Lock()

    def submit(self, doc: dict) -> str:
        import os

        with self._lock:
            name = f"bundle-{self._seq:06d}.json"
            self._seq += 1
        with open(os.path.join(self.out_dir, name), "w") as fh:
            json.dump(doc, fh, separators=(",", ":"), sort_keys=True)
            fh.write("\n")
        return name


class IndexSink:
    """Feeds bundles straight into an embedded index store."""

    def __init__(self, store):
        self.store = store

    def submit(self, doc: dict) -> str:
        n = self.store.ingest(doc["entries"], doc["version"])
        return f"ingested-{n}"


class HttpSink:
    """POSTs bundle documents to an HTTP ingest endpoint."""

    def __init__(self, url: str, timeout: float = 30.0):
        self.url = url
        self.timeout = timeout

    def submit(self, doc: dict) -> str:
        import urllib.request

        req = urllib.request.Request(
            self.url,
            data=json.dumps(doc).encode("utf-8"),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return f"http-{resp.status}"


def make_sink(spec: str):
    """Build a sink from a CLI spec: mem | files:<dir> | index:<dir> | http:<url>."""
    if spec == "mem":
        return CollectSink()
    kind, _, arg = spec.partition(":")
    if kind == "files":
        return BundleFileSink(arg)
    if kind == "index":
        from .store import IndexStore

        return IndexSink(IndexStore(arg))
    if kind == "http":
        return HttpSink(arg)
    raise ValueError(f"unknown sink spec: {spec!r}")


def submit_with_retry(sink, doc: dict, retries: int = 3, backoff: float = 0.1) -> str:
    last: Exception | None = None
    for attempt in range(retries):
        try:
            return sink.submit(doc)
        except Exception as exc:  # sink transport failures only
            last = exc
            log.warning("sink submit failed (attempt %d/%d): %s", attempt + 1, retries, exc)
            time.sleep(backoff * (attempt + 1))
    raise SinkError(f"sink failed after {retries} attempts: {last}")


# ---------------------------------------------------------------------------
# Primary workflow
# ---------------------------------------------------------------------------

def _partition(items: list, workers: int) -> list[list]:
    parts: list[list] = [[] for _ in range(max(1, workers))]
    for i, item in enumerate(items):
        parts[i % len(parts)].append(item)
    return [p for p in parts if p]


def run_primary(
    chunks: list[str],
    version: SnapshotVersion,
    visibility: VisibilityPolicy,
    sink,
    workers: int = 1,
    max_bytes: int = MAX_BUNDLE_BYTES,
    timeout: float = BUNDLE_TIMEOUT,
    tz_offset: str = "+00:00",
) -> dict:
    """Convert rows into primary records and deliver them in bundles.

    Every retained row becomes exactly one record; parse failures are
    skipped and counted. Each worker owns its own bundler, mirroring
    shuffle-free local accumulation.
    """
    report = {
        "workflow": "primary",
        "version": version.version_id,
        "records": 0,
        "bundles": 0,
        "skipped_rows": 0,
        "acks": [],
    }
    lock = threading.Lock()
    failure: list[Exception] = []

    def _deliver(bundle: Bundle) -> None:
        ack = submit_with_retry(sink, bundle.to_doc())
        with lock:
            report["bundles"] += 1
            report["records"] += len(bundle.entries)
            report["acks"].append(
                {"records": len(bundle.entries), "bytes": bundle.serialized_size,
                 "reason": bundle.reason, "ack": ack}
            )

    def _worker(chunk_list: list[str]) -> None:
        bundler = Bundler(version.version_id, max_bytes, timeout)
        try:
            for chunk in chunk_list:
                for _line, row in read_rows(chunk):
                    timed_out = bundler.poll()
                    if timed_out is not None:
                        _deliver(timed_out)
                    try:
                        record = build_primary_record(row, version, visibility, tz_offset)
                    except (RowError, ValueError):
                        with lock:
                            report["skipped_rows"] += 1
                        continue
                    for bundle in bundler.add(record.to_doc()):
                        _deliver(bundle)
            tail = bundler.finish()
            if tail is not None:
                _deliver(tail)
        except Exception as exc:
            failure.append(exc)

    threads = [threading.Thread(target=_worker, args=(part,)) for part in _partition(chunks, workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if failure:
        exc = failure[0]
        if isinstance(exc, SinkError):
            raise SinkError(str(exc), report=report)
        raise exc
    return report


# ---------------------------------------------------------------------------
# Counting workflow
# ---------------------------------------------------------------------------

class CountTuple(NamedTuple):
    principal_id: str
    shard_id: int
    count: int


def parent_dir(path: str) -> str:
    head = path.rsplit("/", 1)[0]
    return head if head else "/"


def dir_depth(path: str) -> int:
    return 0 if path == "/" else path.count("/")


def truncate_dir(path: str, max_depth: int) -> str:
    """Truncate a directory path to at most `max_depth` components."""
    if path == "/":
        return "/"
    parts = path.split("/")  # ['', 'a', 'b', ...]
    if len(parts) - 1 <= max_depth:
        return path
    return "/".join(parts[: max_depth + 1])


def dir_prefixes(path: str, dmin: int, dmax: int) -> list[str]:
    """All directory-prefix principals of a file path with depth in [dmin, dmax]."""
    parent = parent_dir(path)
    pdepth = dir_depth(parent)
    top = min(pdepth, dmax)
    if top < dmin:
        return []
    parts = parent.split("/")
    out = []
    for depth in range(dmin, top + 1):
        out.append("/" if depth == 0 else "/".join(parts[: depth + 1]))
    return out


def row_principals(row: NormalizedRow, dmax: int) -> tuple[str, str, str]:
    """The three counting principals of a row: user, group, truncated parent."""
    return (f"u{row.uid}", f"g{row.gid}", truncate_dir(parent_dir(row.path), dmax))


def run_counting(
    chunks: list[str],
    directory_max: int,
    shards: int = SHARDS,
    workers: int = 1,
) -> list[CountTuple]:
    """Count objects per (principal, shard); one reduced tuple per pair.

    The map stage emits (user, shard, 1), (group, shard, 1), and
    (parent-prefix, shard, 1) per row; directory counts here are
    non-recursive.
    """
    if directory_max < 1:
        raise ValueError("directory_max must be >= 1")

    def _map(chunk: str) -> Counter:
        counts: Counter = Counter()
        for line, row in read_rows(chunk):
            shard = shard_of(line, shards)
            for pid in row_principals(row, directory_max):
                counts[(pid, shard)] += 1
        return counts

    total: Counter = Counter()
    if workers <= 1:
        for chunk in chunks:
            total.update(_map(chunk))
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            for counts in pool.map(_map, chunks):
                total.update(counts)
    return [CountTuple(pid, shard, n) for (pid, shard), n in sorted(total.items())]


@dataclass
class CountingFile:
    """Per-principal shard counts plus totals.

    For user/group principals the shard rows are plain reduced counts and
    the total is their sum. For directory principals the shard rows and the
    total are recursive (subtree) counts; non-recursive own counts are kept
    in `own_shards` for verification but not serialized.
    """

    shard_counts: dict = field(default_factory=dict)  # pid -> {shard: count}
    totals: dict = field(default_factory=dict)  # pid -> total (recursive for dirs)
    own_shards: dict = field(default_factory=dict)  # dir pid -> {shard: own count}

    def expected(self, pid: str) -> dict:
        return self.shard_counts[pid]

    def to_csv(self) -> str:
        lines = []
        for pid in sorted(self.shard_counts):
            for shard in sorted(self.shard_counts[pid]):
                lines.append(f"{pid},{shard},{self.shard_counts[pid][shard]}")
        for pid in sorted(self.totals):
            lines.append(f"{pid},TOTAL,{self.totals[pid]}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "CountingFile":
        cf = cls()
        for line in text.splitlines():
            if not line:
                continue
            pid, shard, count = line.rsplit(",", 2)
            if shard == "TOTAL":
                cf.totals[pid] = int(count)
            else:
                cf.shard_counts.setdefault(pid, {})[int(shard)] = int(count)
        return cf


def postprocess_counts(tuples: Iterable[CountTuple]) -> CountingFile:
    """Reconstruct the directory hierarchy and compute recursive counts.

    User and group shard counts pass through with merged totals; directory
    principals get bottom-up recursive per-shard counts and totals, with
    ancestor prefixes materialized up to the root.
    """
    cf = CountingFile()
    dir_own: dict[str, dict[int, int]] = {}
    for pid, shard, count in tuples:
        if pid.startswith("/"):
            dir_own.setdefault(pid, {})[shard] = dir_own.setdefault(pid, {}).get(shard, 0) + count
        else:
            cf.shard_counts.setdefault(pid, {})[shard] = (
                cf.shard_counts.setdefault(pid, {}).get(shard, 0) + count
            )
    for pid, by_shard in cf.shard_counts.items():
        cf.totals[pid] = sum(by_shard.values())

    # Materialize every ancestor so recursive sums can roll all the way up;
    # a prefix whose parent was never counted attaches to its nearest
    # materialized ancestor by construction.
    nodes: set[str] = set(dir_own)
    for path in list(dir_own):
        cur = path
        while cur != "/":
            cur = parent_dir(cur)
            nodes.add(cur)

    recursive: dict[str, dict[int, int]] = {d: dict(dir_own.get(d, {})) for d in nodes}
    for path in sorted(nodes, key=dir_depth, reverse=True):
        if path == "/":
            continue
        parent = parent_dir(path)
        tgt = recursive[parent]
        for shard, count in recursive[path].items():
            tgt[shard] = tgt.get(shard, 0) + count

    for path in nodes:
        cf.shard_counts[path] = recursive[path]
        cf.totals[path] = sum(recursive[path].values())
        cf.own_shards[path] = dict(dir_own.get(path, {}))
    return cf


# ---------------------------------------------------------------------------
# Aggregate workflow
# ---------------------------------------------------------------------------

class AggTuple(NamedTuple):
    principal_id: str
    shard_id: int
    size: int
    atime: int
    ctime: int
    mtime: int


def _expand_row(line: bytes, row: NormalizedRow, dmin: int, dmax: int, shards: int):
    shard = shard_of(line, shards)
    pids = [f"u{row.uid}", f"g{row.gid}"]
    pids.extend(dir_prefixes(row.path, dmin, dmax))
    return [AggTuple(pid, shard, row.size, row.atime, row.ctime, row.mtime) for pid in pids]


class _ShardPartition:
    """Sketch state for one (principal, shard) partition of the map stage."""

    __slots__ = ("sketches", "received")

    def __init__(self, alpha: float):
        self.sketches = tuple(QuantileSketch(alpha) for _ in AGG_ATTRS)
        self.received = 0


def build_aggregate_record(
    pid: str,
    sketches: dict[str, QuantileSketch],
    visibility: VisibilityPolicy,
    version: str,
    complete: bool = True,
) -> AggregateRecord:
    principal = principal_from_counting_id(pid)
    content: dict = {"file_count": sketches["size"].count, "version": version}
    for attr in AGG_ATTRS:
        s = sketches[attr]
        content[f"{attr}_min"] = s.min
        content[f"{attr}_max"] = s.max
        content[f"{attr}_mean"] = s.mean()
        for q, label in zip(QUANTILES, QUANTILE_LABELS):
            content[f"{attr}_{label}"] = s.quantile(q)
    content["size_total"] = sketches["size"].sum
    if not complete:
        content["incomplete"] = True
    return AggregateRecord(
        subject=principal.subject(),
        visible_to=tuple(visibility.for_principal(principal)),
        content=content,
    )


def run_aggregate(
    chunks: list[str],
    counting: CountingFile,
    directory_min: int,
    directory_max: int,
    alpha: float,
    sink,
    version: SnapshotVersion,
    visibility: VisibilityPolicy | None = None,
    shards: int = SHARDS,
    workers: int = 1,
) -> dict:
    """Compute per-principal summaries and emit one record per principal.

    Map state is partitioned by (principal, shard); a partition's sketches
    are serialized and handed to the reduce side exactly when the partition
    has received its expected row count from the counting file. The reduce
    side merges shard sketches and emits the record for a principal as soon
    as its last populated shard arrives.
    """
    if directory_min > directory_max:
        raise ValueError("directory_min must be <= directory_max")
    visibility = visibility or VisibilityPolicy()
    report = {
        "workflow": "aggregate",
        "version": version.version_id,
        "principals": 0,
        "rows": 0,
        "tuples": 0,
        "late_partitions": 0,
        "acks": [],
    }

    expected = counting.shard_counts
    totals = counting.totals

    # Reduce state, keyed by principal.
    merged: dict[str, dict[str, QuantileSketch]] = {}
    done_shards: dict[str, set[int]] = {}

    def _emit(pid: str, complete: bool) -> None:
        record = build_aggregate_record(pid, merged.pop(pid), visibility, version.version_id, complete)
        if complete and record.content["file_count"] != totals.get(pid):
            raise ConsistencyError(
                f"principal {pid}: aggregated {record.content['file_count']} rows, "
                f"counting file says {totals.get(pid)}"
            )
        ack = submit_with_retry(sink, {"ingest_type": "GMetaList",
                                       "entries": [record.to_doc()],
                                       "version": version.version_id})
        report["principals"] += 1
        report["acks"].append({"subject": record.subject, "ack": ack})

    def _reduce(pid: str, shard: int, payloads: list[bytes]) -> None:
        target = merged.get(pid)
        if target is None:
            target = {attr: QuantileSketch(alpha) for attr in AGG_ATTRS}
            merged[pid] = target
            done_shards[pid] = set()
        for attr, payload in zip(AGG_ATTRS, payloads):
            target[attr].merge_in_place(QuantileSketch.deserialize(payload))
        done = done_shards[pid]
        done.add(shard)
        populated = expected[pid].keys()
        if len(done) == len(populated) and done >= populated:
            _emit(pid, complete=True)
            del done_shards[pid]

    # Map stage: chunk workers feed a single sketch-stage consumer.
    partitions: dict[tuple[str, int], _ShardPartition] = {}

    def _consume(tuples: list[AggTuple]) -> None:
        for t in tuples:
            report["tuples"] += 1
            key = (t.principal_id, t.shard_id)
            part = partitions.get(key)
            if part is None:
                exp = expected.get(t.principal_id)
                if exp is None:
                    raise ConsistencyError(
                        f"principal {t.principal_id} missing from counting file"
                    )
                part = partitions[key] = _ShardPartition(alpha)
            for sketch, value in zip(part.sketches, (t.size, t.atime, t.ctime, t.mtime)):
                sketch.insert(value)
            part.received += 1
            if part.received == expected[t.principal_id].get(t.shard_id, -1):
                payloads = [s.serialize() for s in part.sketches]
                del partitions[key]
                _reduce(t.principal_id, t.shard_id, payloads)

    def _map(chunk: str) -> list[AggTuple]:
        out: list[AggTuple] = []
        for line, row in read_rows(chunk):
            out.extend(_expand_row(line, row, directory_min, directory_max, shards))
        return out

    if workers <= 1:
        for chunk in chunks:
            tuples = _map(chunk)
            report["rows"] += sum(1 for t in tuples if t.principal_id.startswith("u"))
            _consume(tuples)
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            for tuples in pool.map(_map, chunks):
                report["rows"] += sum(1 for t in tuples if t.principal_id.startswith("u"))
                _consume(tuples)

    # End of stream: partitions that never hit their expected count flush
    # with a warning (counting file and chunks disagree).
    late: dict[str, list[tuple[int, list[bytes]]]] = {}
    for (pid, shard), part in sorted(partitions.items()):
        log.warning("partition (%s, %d) incomplete at end of stream: %d rows",
                    pid, shard, part.received)
        report["late_partitions"] += 1
        late.setdefault(pid, []).append((shard, [s.serialize() for s in part.sketches]))
    partitions.clear()
    for pid, shard_payloads in late.items():
        if pid not in merged:
            merged[pid] = {attr: QuantileSketch(alpha) for attr in AGG_ATTRS}
            done_shards[pid] = set()
        for shard, payloads in shard_payloads:
            for attr, payload in zip(AGG_ATTRS, payloads):
                merged[pid][attr].merge_in_place(QuantileSketch.deserialize(payload))
            done_shards[pid].add(shard)
    for pid in sorted(merged):
        _emit(pid, complete=False)
    return report
