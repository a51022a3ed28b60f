"""Synthetic ground truth: file system simulator and workload generators.

The simulator applies every mutation to an in-memory tree and records the
matching change event, so a generated event stream and the tree's end state
are consistent by construction. `stat` and `fid2path` carry injectable
latency for benchmarking the resolution strategies.
"""

from __future__ import annotations

import random
import time
from dataclasses import dataclass

from . import events as ev
from .model import FILE, LINK, NormalizedRow
from .monitor import StatMiss
from .pipeline import dir_prefixes
from .sketch import exact_quantile

DEFAULT_START_TIME = 1_700_000_000


class FsError(RuntimeError):
    pass


class _Node:
    __slots__ = ("kind", "name", "parent", "size", "uid", "gid", "mode",
                 "atime", "ctime", "mtime", "fileset", "children")

    def __init__(self, kind, name, parent, uid, gid, mode, now, size=0, fileset=None):
        self.kind = kind
        self.name = name
        self.parent = parent
        self.size = size
        self.uid = uid
        self.gid = gid
        self.mode = mode
        self.atime = now
        self.ctime = now
        self.mtime = now
        self.fileset = fileset
        self.children = {} if kind == "d" else None  # name -> fid


class SyntheticFS:
    """In-memory file system that emits one ChangeEvent per mutation."""

    def __init__(self, mount: str = "/", source: str = "lustre",
                 fid2path_latency: float = 0.0, stat_latency: float = 0.0,
                 start_time: int = DEFAULT_START_TIME, fileset: str | None = None):
        self.mount = mount
        self.source = source
        self.fid2path_latency = fid2path_latency
        self.stat_latency = stat_latency
        self.fileset = fileset
        self.now = start_time
        self._fid_seq = 0
        self._event_seq = 0
        self.events: list[ev.ChangeEvent] = []
        self.fid2path_calls = 0
        self.stat_calls = 0
        self.root_fid = self._new_fid()
        self.nodes: dict[str, _Node] = {
            self.root_fid: _Node("d", mount, None, 0, 0, 0o40755, self.now)
        }

    def _new_fid(self) -> str:
        self._fid_seq += 1
        return f"0x1:0x{self._fid_seq:x}"

    def _tick(self) -> int:
        self.now += 1
        return self.now

    def _attrs(self, node: _Node) -> dict | None:
        if self.source != "gpfs":
            return None
        return {
            "type": node.kind, "mode": node.mode, "uid": node.uid, "gid": node.gid,
            "size": node.size, "atime": node.atime, "ctime": node.ctime,
            "mtime": node.mtime,
        }

    def _emit(self, kind, fid, parent=None, name=None, source_parent=None,
              attrs=None, is_dir=False) -> ev.ChangeEvent:
        self._event_seq += 1
        event = ev.ChangeEvent(
            event_id=self._event_seq, kind=kind, fid=fid, parent_fid=parent,
            source_fid=fid if kind == ev.RENAME else None,
            source_parent_fid=source_parent, name=name, timestamp=self.now,
            attrs=attrs, source=self.source, is_dir=is_dir, fileset=self.fileset,
        )
        self.events.append(event)
        return event

    def drain_events(self) -> list[ev.ChangeEvent]:
        out = self.events
        self.events = []
        return out

    # -- mutations -------------------------------------------------------

    def _dir(self, fid: str) -> _Node:
        node = self.nodes.get(fid)
        if node is None or node.kind != "d":
            raise FsError(f"not a directory: {fid}")
        return node

    def mkdir(self, parent: str, name: str, uid: int = 0, gid: int = 0,
              mode: int = 0o40755) -> str:
        pnode = self._dir(parent)
        if name in pnode.children:
            raise FsError(f"name exists: {name}")
        now = self._tick()
        fid = self._new_fid()
        node = _Node("d", name, parent, uid, gid, mode, now)
        self.nodes[fid] = node
        pnode.children[name] = fid
        self._emit(ev.MKDIR, fid, parent, name, attrs=self._attrs(node), is_dir=True)
        return fid

    def create(self, parent: str, name: str, uid: int = 0, gid: int = 0,
               size: int = 0, kind: str = FILE, mode: int | None = None) -> str:
        pnode = self._dir(parent)
        if name in pnode.children:
            raise FsError(f"name exists: {name}")
        if mode is None:
            mode = 0o120777 if kind == LINK else 0o100644
        now = self._tick()
        fid = self._new_fid()
        node = _Node(kind, name, parent, uid, gid, mode, now, size=size,
                     fileset=self.fileset)
        self.nodes[fid] = node
        pnode.children[name] = fid
        self._emit(ev.CREATE, fid, parent, name, attrs=self._attrs(node))
        return fid

    def write_close(self, fid: str, size: int | None = None) -> None:
        node = self.nodes[fid]
        now = self._tick()
        if size is not None:
            node.size = size
        node.mtime = now
        node.ctime = now
        self._emit(ev.WRITE_CLOSE, fid, attrs=self._attrs(node))

    def open_(self, fid: str) -> None:
        node = self.nodes[fid]
        node.atime = self._tick()
        self._emit(ev.OPEN, fid)

    def close_(self, fid: str) -> None:
        node = self.nodes[fid]
        self._tick()
        self._emit(ev.CLOSE, fid, attrs=self._attrs(node))

    def attr_update(self, fid: str, mode: int | None = None) -> None:
        node = self.nodes[fid]
        node.ctime = self._tick()
        if mode is not None:
            node.mode = mode
        self._emit(ev.ATTR_UPDATE, fid, attrs=self._attrs(node))

    def rename(self, fid: str, new_parent: str, new_name: str) -> None:
        node = self.nodes[fid]
        target = self._dir(new_parent)
        if node.kind == "d":
            # Reject moves into the directory's own subtree.
            cur = new_parent
            while cur is not None:
                if cur == fid:
                    raise FsError("cannot move a directory under itself")
                cur = self.nodes[cur].parent
        if new_name in target.children:
            raise FsError(f"target name exists: {new_name}")
        old_parent = node.parent
        del self.nodes[old_parent].children[node.name]
        node.ctime = self._tick()
        node.name = new_name
        node.parent = new_parent
        target.children[new_name] = fid
        self._emit(ev.RENAME, fid, parent=new_parent, name=new_name,
                   source_parent=old_parent, attrs=self._attrs(node),
                   is_dir=node.kind == "d")

    def unlink(self, fid: str) -> None:
        node = self.nodes[fid]
        if node.kind == "d":
            raise FsError("unlink of a directory; use rmdir")
        del self.nodes[node.parent].children[node.name]
        del self.nodes[fid]
        self._tick()
        self._emit(ev.UNLINK, fid, parent=node.parent, name=node.name)

    def rmdir(self, fid: str) -> None:
        node = self._dir(fid)
        if node.children:
            raise FsError("rmdir of non-empty directory")
        del self.nodes[node.parent].children[node.name]
        del self.nodes[fid]
        self._tick()
        self._emit(ev.RMDIR, fid, parent=node.parent, name=node.name, is_dir=True)

    def recursive_delete(self, fid: str) -> None:
        node = self.nodes[fid]
        if node.kind != "d":
            self.unlink(fid)
            return
        for child in sorted(node.children.values()):
            self.recursive_delete(child)
        self.rmdir(fid)

    # -- inspection --------------------------------------------------------

    def path_of(self, fid: str) -> str:
        node = self.nodes[fid]
        parts: list[str] = []
        while node.parent is not None:
            parts.append(node.name)
            node = self.nodes[node.parent]
        base = self.mount.rstrip("/")
        return (base + "/" + "/".join(reversed(parts))) if parts else (base or "/")

    def stat(self, fid: str) -> dict:
        """Latency-modeled stat; raises StatMiss for deleted objects."""
        self.stat_calls += 1
        if self.stat_latency:
            time.sleep(self.stat_latency)
        node = self.nodes.get(fid)
        if node is None or node.kind == "d":
            raise StatMiss(fid)
        return {
            "type": node.kind, "mode": node.mode, "uid": node.uid,
            "gid": node.gid, "size": node.size, "atime": node.atime,
            "ctime": node.ctime, "mtime": node.mtime, "fileset": node.fileset,
        }

    def fid2path(self, fid: str) -> str | None:
        """Latency-modeled external resolution; None for unknown fids."""
        self.fid2path_calls += 1
        if self.fid2path_latency:
            time.sleep(self.fid2path_latency)
        if fid not in self.nodes:
            return None
        return self.path_of(fid)

    def scan(self) -> dict[str, dict]:
        """Full-rescan oracle: end-state path -> stat for files and links."""
        out: dict[str, dict] = {}
        for fid, node in self.nodes.items():
            if node.kind == "d":
                continue
            out[self.path_of(fid)] = {
                "type": node.kind, "mode": node.mode, "uid": node.uid,
                "gid": node.gid, "size": node.size, "atime": node.atime,
                "ctime": node.ctime, "mtime": node.mtime,
            }
        return out

    def live_files(self) -> list[str]:
        return [fid for fid, node in self.nodes.items() if node.kind != "d"]

    def live_dirs(self) -> list[str]:
        return [fid for fid, node in self.nodes.items()
                if node.kind == "d" and fid != self.root_fid]


def simulate_fid2path(fs: SyntheticFS, fid: str, latency: float | None = None) -> str:
    """Resolve a fid with an artificial delay; raises for unknown fids."""
    delay = fs.fid2path_latency if latency is None else latency
    fs.fid2path_calls += 1
    if delay:
        time.sleep(delay)
    if fid not in fs.nodes:
        raise LookupError(f"unknown fid: {fid}")
    return fs.path_of(fid)


# ---------------------------------------------------------------------------
# Workload profiles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WorkloadProfile:
    kind: str  # eval_out | eval_perf | filebench_like | mixed
    iterations: int = 1000
    threads: int = 8
    files: int = 2000
    dir_width: int = 20
    depth_mean: float = 3.6
    size_mean: float = 16 * 1024
    size_shape: float = 1.5
    seed: int = 0


def gen_eval_out(fs: SyntheticFS, iterations: int, rng: random.Random | None = None,
                 uid: int = 1000, gid: int = 100) -> None:
    """Per iteration: create a unique file, append, rename it, make a
    directory, move the file in, then recursively delete the directory."""
    rng = rng or random.Random(0)
    base = fs.mkdir(fs.root_fid, "eval_out", uid, gid)
    for i in range(iterations):
        f = fs.create(base, f"file-{i}", uid, gid)
        fs.write_close(f, size=rng.randrange(1, 65536))
        fs.rename(f, base, f"renamed-{i}")
        d = fs.mkdir(base, f"dir-{i}", uid, gid)
        fs.rename(f, d, f"renamed-{i}")
        fs.recursive_delete(d)


def gen_eval_perf(fs: SyntheticFS, iterations: int, rng: random.Random | None = None,
                  uid: int = 1000, gid: int = 100) -> None:
    """Per iteration: create, modify, and delete a uniquely named file."""
    rng = rng or random.Random(0)
    base = fs.mkdir(fs.root_fid, "eval_perf", uid, gid)
    for i in range(iterations):
        f = fs.create(base, f"file-{i}", uid, gid)
        fs.open_(f)
        fs.write_close(f, size=rng.randrange(1, 65536))
        fs.unlink(f)


def _populate_tree(fs: SyntheticFS, rng: random.Random, files: int,
                   dir_width: int, depth_mean: float, size_mean: float,
                   size_shape: float, uids=(1000,), gids=(100,)) -> list[str]:
    """Build a directory tree and populate it with files; returns file fids.

    File depth is drawn around `depth_mean`; directories are created on
    demand with at most `dir_width` subdirectories per level.
    """
    depth_weights = _depth_weights(depth_mean)
    dir_cache: dict[tuple, str] = {(): fs.root_fid}
    file_fids: list[str] = []
    for i in range(files):
        depth = rng.choices(range(1, len(depth_weights) + 1), weights=depth_weights)[0]
        key = tuple(rng.randrange(dir_width) for _ in range(depth - 1))
        parent = dir_cache.get(key)
        if parent is None:
            for lvl in range(1, len(key) + 1):
                prefix = key[:lvl]
                if prefix not in dir_cache:
                    dir_cache[prefix] = fs.mkdir(
                        dir_cache[prefix[:-1]], f"d{prefix[-1]:02d}",
                        rng.choice(uids), rng.choice(gids),
                    )
            parent = dir_cache[key]
        size = max(1, int(rng.gammavariate(size_shape, size_mean / size_shape)))
        file_fids.append(fs.create(parent, f"f{i:07d}.dat", rng.choice(uids),
                                   rng.choice(gids), size=size))
    return file_fids


def _depth_weights(depth_mean: float) -> list[float]:
    # Four depth levels whose weighted mean lands near the target.
    spread = [1.0, 2.0, 4.0, 8.0]
    mean = sum((i + 1) * w for i, w in enumerate(spread)) / sum(spread)
    shift = depth_mean - mean
    if shift > 0:
        spread = [w * (1 + shift) ** i for i, w in enumerate(spread)]
    return spread


def gen_filebench_like(fs: SyntheticFS, profile: WorkloadProfile,
                       include_setup: bool = True) -> None:
    """Pre-populate a tree, then run open-read-close over random files.

    Logical threads are simulated with seeded round-robin scheduling so the
    interleaving is reproducible; no file is created or deleted after the
    initialization phase.
    """
    rng = random.Random(profile.seed)
    file_fids = _populate_tree(fs, rng, profile.files, profile.dir_width,
                               profile.depth_mean, profile.size_mean,
                               profile.size_shape)
    if not include_setup:
        fs.drain_events()
    thread_rngs = [random.Random(profile.seed * 7919 + t) for t in range(profile.threads)]
    for i in range(profile.iterations):
        t_rng = thread_rngs[i % profile.threads]
        fid = t_rng.choice(file_fids)
        fs.open_(fid)
        fs.close_(fid)


def gen_mixed(fs: SyntheticFS, n_events: int, seed: int = 0,
              uids=(1000, 1001, 1002), gids=(100, 101)) -> None:
    """Interleave all profile behaviors plus random directory renames."""
    rng = random.Random(seed)
    base = fs.mkdir(fs.root_fid, "mixed", uids[0], gids[0])
    dirs = [base]
    files: list[str] = []
    serial = 0

    def _any_dir() -> str:
        return rng.choice(dirs)

    while len(fs.events) < n_events:
        serial += 1
        op = rng.choices(
            ("create", "mkdir", "write", "attr", "openclose", "rename_file",
             "rename_dir", "unlink", "rmdir", "eval_out_iter", "eval_perf_iter"),
            weights=(22, 7, 16, 8, 12, 8, 6, 8, 2, 5, 6),
        )[0]
        uid, gid = rng.choice(uids), rng.choice(gids)
        if op == "create" or not files and op in ("write", "attr", "openclose",
                                                  "rename_file", "unlink"):
            files.append(fs.create(_any_dir(), f"m{serial}", uid, gid,
                                   size=rng.randrange(1, 1 << 20)))
        elif op == "mkdir":
            dirs.append(fs.mkdir(_any_dir(), f"dm{serial}", uid, gid))
        elif op == "write":
            fs.write_close(rng.choice(files), size=rng.randrange(1, 1 << 20))
        elif op == "attr":
            fs.attr_update(rng.choice(files),
                           mode=rng.choice((0o100644, 0o100600, 0o100755)))
        elif op == "openclose":
            fid = rng.choice(files)
            fs.open_(fid)
            fs.close_(fid)
        elif op == "rename_file":
            fs.rename(rng.choice(files), _any_dir(), f"r{serial}")
        elif op == "rename_dir":
            d = rng.choice(dirs)
            target = _any_dir()
            try:
                fs.rename(d, target, f"rd{serial}")
            except FsError:
                pass  # subtree or name collision; skip this roll
        elif op == "unlink":
            fid = files.pop(rng.randrange(len(files)))
            fs.unlink(fid)
        elif op == "rmdir":
            empties = [d for d in dirs if d != base and not fs.nodes[d].children]
            if empties:
                d = rng.choice(empties)
                dirs.remove(d)
                fs.rmdir(d)
        elif op == "eval_out_iter":
            f = fs.create(base, f"eo{serial}", uid, gid)
            fs.write_close(f, size=rng.randrange(1, 65536))
            fs.rename(f, base, f"eor{serial}")
            d = fs.mkdir(base, f"eod{serial}", uid, gid)
            fs.rename(f, d, f"eor{serial}")
            fs.recursive_delete(d)
        elif op == "eval_perf_iter":
            f = fs.create(base, f"ep{serial}", uid, gid)
            fs.open_(f)
            fs.write_close(f, size=rng.randrange(1, 65536))
            fs.unlink(f)


def gen_workload(fs: SyntheticFS, profile: WorkloadProfile) -> list[ev.ChangeEvent]:
    """Run one profile against the fs; returns the recorded event stream."""
    rng = random.Random(profile.seed)
    if profile.kind == "eval_out":
        gen_eval_out(fs, profile.iterations, rng)
    elif profile.kind == "eval_perf":
        gen_eval_perf(fs, profile.iterations, rng)
    elif profile.kind == "filebench_like":
        gen_filebench_like(fs, profile)
    elif profile.kind == "mixed":
        gen_mixed(fs, profile.iterations, profile.seed)
    else:
        raise ValueError(f"unknown workload profile: {profile.kind!r}")
    return fs.events


def write_lustre_log(events, path: str) -> int:
    from .events import render_lustre_changelog

    n = 0
    with open(path, "w") as fh:
        for event in events:
            fh.write(render_lustre_changelog(event) + "\n")
            n += 1
    return n


def write_gpfs_log(events, path: str) -> int:
    from .events import render_gpfs_event

    n = 0
    with open(path, "w") as fh:
        for event in events:
            fh.write(render_gpfs_event(event) + "\n")
            n += 1
    return n


# ---------------------------------------------------------------------------
# Snapshot generation
# ---------------------------------------------------------------------------

class SnapshotTruth:
    """Exact per-principal statistics for a generated snapshot."""

    def __init__(self, rows: list[NormalizedRow]):
        self.rows = rows

    def principal_values(self, dmin: int, dmax: int) -> dict:
        groups: dict[str, dict[str, list]] = {}
        for row in self.rows:
            pids = [f"u{row.uid}", f"g{row.gid}"]
            pids.extend(dir_prefixes(row.path, dmin, dmax))
            for pid in pids:
                bucket = groups.get(pid)
                if bucket is None:
                    bucket = groups[pid] = {"size": [], "atime": [], "ctime": [], "mtime": []}
                bucket["size"].append(row.size)
                bucket["atime"].append(row.atime)
                bucket["ctime"].append(row.ctime)
                bucket["mtime"].append(row.mtime)
        return groups

    def stats(self, dmin: int, dmax: int,
              quantiles=(0.10, 0.25, 0.50, 0.75, 0.90, 0.99)) -> dict:
        out: dict[str, dict] = {}
        for pid, attrs in self.principal_values(dmin, dmax).items():
            record: dict = {"file_count": len(attrs["size"])}
            for attr, values in attrs.items():
                ordered = sorted(values)
                record[attr] = {
                    "min": ordered[0],
                    "max": ordered[-1],
                    "mean": sum(ordered) / len(ordered),
                    "total": sum(ordered),
                    "quantiles": {q: exact_quantile(ordered, q) for q in quantiles},
                }
            out[pid] = record
        return out


def gen_snapshot(
    files: int,
    users: int,
    groups: int,
    seed: int,
    n_dirs: int = 200,
    max_depth: int = 4,
    size_mean: float = 16 * 1024,
    size_shape: float = 1.5,
    link_fraction: float = 0.02,
    time_base: int = DEFAULT_START_TIME - 5 * 365 * 86400,
    time_spread: int = 5 * 365 * 86400,
    fileset: str | None = None,
) -> tuple[list[NormalizedRow], SnapshotTruth]:
    """Deterministic snapshot corpus plus its exact statistics oracle."""
    rng = random.Random(seed)
    dirs = ["/home", "/proj"]
    while len(dirs) < n_dirs:
        parent = rng.choice(dirs)
        if parent.count("/") >= max_depth:
            continue
        dirs.append(f"{parent}/d{len(dirs):03d}")
    uid_pool = [1000 + i for i in range(users)]
    gid_pool = [100 + i for i in range(groups)]
    mode_pool = (0o100644, 0o100644, 0o100600, 0o100755, 0o100777)
    rows: list[NormalizedRow] = []
    for i in range(files):
        parent = rng.choice(dirs)
        is_link = rng.random() < link_fraction
        atime = time_base + rng.randrange(time_spread)
        mtime = time_base + rng.randrange(time_spread)
        ctime = max(atime, mtime) - rng.randrange(86400)
        rows.append(NormalizedRow(
            path=f"{parent}/f{i:07d}",
            type=LINK if is_link else FILE,
            mode=0o120777 if is_link else rng.choice(mode_pool),
            uid=rng.choice(uid_pool),
            gid=rng.choice(gid_pool),
            size=rng.randrange(1, 256) if is_link
            else max(1, int(rng.gammavariate(size_shape, size_mean / size_shape))),
            atime=atime,
            ctime=max(0, ctime),
            mtime=mtime,
            fileset=fileset,
        ))
    return rows, SnapshotTruth(rows)


def write_snapshot_chunks(rows: list[NormalizedRow], out_dir: str,
                          source: str = "synthetic", target_rows: int = 100_000) -> list[str]:
    """Write rows as normalized chunk files; returns chunk paths."""
    import os

    from .preprocess import ChunkManifest, _ChunkWriter, write_manifest

    os.makedirs(out_dir, exist_ok=True)
    manifest = ChunkManifest(source=source, format="synthetic", target_rows=target_rows)
    writer = _ChunkWriter(out_dir, source, target_rows, manifest)
    for row in rows:
        writer.write(row)
        manifest.rows_in += 1
        manifest.rows_retained += 1
    writer.finish()
    write_manifest(manifest, out_dir)
    return [os.path.join(out_dir, c["name"]) for c in manifest.chunks]
