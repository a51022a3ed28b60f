"""Stateful reduction of change-event streams into minimal index updates.

Events accumulate in FID-keyed slots. Three rules shrink a batch before it
ever reaches the state manager: repeated updates for one FID coalesce into
one slot, create/unlink (and mkdir/rmdir) pairs inside a batch cancel
outright, and directory renames bypass reduction entirely, preserved as
ordered entries, because they fan out to every descendant path.

A flush applies the surviving operations to the in-memory hierarchy state
and produces an UpdateSet: `to_update` (fid, path, stat) for live objects
and `to_delete` (fid, path) for removed ones, with renamed objects also
retiring their pre-batch subject.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
from dataclasses import dataclass, field

from . import events as ev
from .model import (
    SnapshotVersion,
    VisibilityPolicy,
    epoch_to_iso8601,
    mode_raw,
    render_mode,
)

log = logging.getLogger(__name__)

DEFAULT_BATCH_SIZE = 1000
DEFAULT_INACTIVITY = 5.0


class ResolutionMiss(LookupError):
    """A fid could not be resolved to a path, even via the fallback."""


class StatMiss(LookupError):
    """The object no longer exists at stat time."""


class DirectoryState:
    """In-memory file system hierarchy: fid -> (name, parent) bindings.

    Directories and files are tracked separately; paths are reconstructed
    by walking parent pointers to a bound root. Unknown fids fall back to
    the external resolver exactly once and are then cached. An optional LRU
    capacity bounds directory retention; a directory with live children in
    state is never evicted.
    """

    def __init__(self, roots: dict[str, str], resolver=None,
                 capacity: int | None = None, lost_found: str = "/lost+found"):
        self.roots = dict(roots)
        self.resolver = resolver
        self.capacity = capacity
        self.lost_found = lost_found
        self.dirs: dict[str, tuple[str, str]] = {}
        self.files: dict[str, tuple[str, str]] = {}
        self.children: dict[str, set] = {}
        self.lru: dict[str, None] = {}
        self.path_cache: dict[str, str] = {}
        self.evicted = 0
        self.fallback_resolutions = 0

    # -- bindings ------------------------------------------------------

    def _touch(self, fid: str) -> None:
        lru = self.lru
        if fid in lru:
            del lru[fid]
        lru[fid] = None

    def bind_dir(self, fid: str, name: str, parent: str) -> None:
        self.dirs[fid] = (name, parent)
        self.children.setdefault(parent, set()).add(fid)
        self.children.setdefault(fid, set())
        self.path_cache.pop(fid, None)
        self._touch(fid)
        if self.capacity is not None and len(self.dirs) > self.capacity:
            self.evict(self.capacity)

    def bind_file(self, fid: str, name: str, parent: str) -> None:
        old = self.files.get(fid)
        if old is not None:
            kids = self.children.get(old[1])
            if kids is not None:
                kids.discard(fid)
        self.files[fid] = (name, parent)
        self.children.setdefault(parent, set()).add(fid)

    def unbind_file(self, fid: str) -> tuple[str, str] | None:
        binding = self.files.pop(fid, None)
        if binding is not None:
            kids = self.children.get(binding[1])
            if kids is not None:
                kids.discard(fid)
        return binding

    def unbind_dir(self, fid: str) -> None:
        binding = self.dirs.pop(fid, None)
        if binding is not None:
            kids = self.children.get(binding[1])
            if kids is not None:
                kids.discard(fid)
        self.children.pop(fid, None)
        self.lru.pop(fid, None)
        self.path_cache.pop(fid, None)

    def rebind_dir(self, fid: str, name: str, parent: str) -> None:
        old = self.dirs.get(fid)
        if old is not None:
            kids = self.children.get(old[1])
            if kids is not None:
                kids.discard(fid)
        # Externally cached paths under the old location are now stale.
        if self.path_cache:
            try:
                old_prefix = self.resolve_path(fid) if old is not None else None
            except ResolutionMiss:
                old_prefix = None
            if old_prefix:
                stale = [f for f, p in self.path_cache.items()
                         if p == old_prefix or p.startswith(old_prefix + "/")]
                for f in stale:
                    del self.path_cache[f]
        self.dirs[fid] = (name, parent)
        self.children.setdefault(parent, set()).add(fid)
        self.children.setdefault(fid, set())
        self._touch(fid)

    def rebind_file(self, fid: str, name: str, parent: str) -> None:
        self.bind_file(fid, name, parent)

    # -- resolution ------------------------------------------------------

    def resolve_path(self, fid: str, memo: dict | None = None) -> str:
        """Absolute path of a fid by walking parents; no external latency
        unless a link in the chain was evicted or never seen.

        `memo` caches finished paths for every node visited on the walk;
        callers pass one memo per read-only phase so lookups that share
        ancestors stay linear.
        """
        if memo is not None:
            hit = memo.get(fid)
            if hit is not None:
                return hit
        names: list[tuple[str, str]] = []
        cur = fid
        first = True
        for _ in range(100_000):
            if memo is not None:
                hit = memo.get(cur)
                if hit is not None:
                    base = hit
                    break
            root = self.roots.get(cur)
            if root is not None:
                base = root
                break
            cached = self.path_cache.get(cur)
            if cached is not None:
                base = cached
                break
            binding = self.files.get(cur) if first else None
            if binding is None:
                binding = self.dirs.get(cur)
                if binding is not None:
                    self._touch(cur)
            if binding is None:
                if self.resolver is None:
                    raise ResolutionMiss(fid)
                resolved = self.resolver(cur)
                self.fallback_resolutions += 1
                if resolved is None:
                    raise ResolutionMiss(fid)
                self.path_cache[cur] = resolved
                base = resolved
                break
            names.append((cur, binding[0]))
            cur = binding[1]
            first = False
        else:
            raise ResolutionMiss(f"parent chain too deep or cyclic at {fid}")
        if not names:
            if memo is not None:
                memo[fid] = base
            return base
        path = "" if base == "/" else base.rstrip("/")
        for node, name in reversed(names):
            path = f"{path}/{name}"
            if memo is not None:
                memo[node] = path
        return path

    def orphan_path(self, fid: str, name: str | None) -> str:
        return f"{self.lost_found}/{fid}" + (f"/{name}" if name else "")

    def descendant_files(self, fid: str) -> list[str]:
        """All file fids anywhere under a directory, in deterministic order."""
        out: list[str] = []
        stack = [fid]
        files = self.files
        while stack:
            cur = stack.pop()
            for child in sorted(self.children.get(cur, ())):
                if child in files:
                    out.append(child)
                else:
                    stack.append(child)
        return out

    def evict(self, capacity: int) -> int:
        """Drop least-recently-touched childless directories above capacity."""
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        count = 0
        for fid in list(self.lru):
            if len(self.dirs) <= capacity:
                break
            if fid in self.roots or self.children.get(fid):
                continue
            self.unbind_dir(fid)
            count += 1
        self.evicted += count
        return count


@dataclass
class UpdateItem:
    fid: str
    path: str
    stat: dict
    stale_path: str | None = None  # pre-batch subject to retire after a rename


@dataclass
class UpdateSet:
    to_update: list = field(default_factory=list)
    to_delete: list = field(default_factory=list)  # (fid, path)
    orphans: list = field(default_factory=list)
    stat_misses: int = 0

    def is_empty(self) -> bool:
        return not self.to_update and not self.to_delete


class _Slot:
    __slots__ = ("fid", "order", "is_dir", "created", "deleted", "touched",
                 "naming", "attrs", "delete_naming")

    def __init__(self, fid: str, order: int):
        self.fid = fid
        self.order = order
        self.is_dir = False
        self.created = False
        self.deleted = False
        self.touched = False
        self.naming: tuple[str, str] | None = None
        self.attrs: dict | None = None
        self.delete_naming: tuple[str | None, str | None] | None = None


class Monitor:
    """Single-consumer reducer, state manager, and notification emitter.

    Feed events through `submit` (or `run`/`serve`); flushes happen at the
    batch size limit, after the inactivity threshold, and at shutdown.
    """

    def __init__(
        self,
        state: DirectoryState,
        sink=None,
        *,
        reduce: bool = True,
        batch_size: int = DEFAULT_BATCH_SIZE,
        inactivity: float = DEFAULT_INACTIVITY,
        stat_source=None,
        filter_kinds: frozenset = frozenset({ev.OPEN}),
        per_event_resolution: bool = False,
        visibility: VisibilityPolicy | None = None,
        tz_offset: str = "+00:00",
        clock=time.monotonic,
    ):
        self.state = state
        self.sink = sink
        self.reduce_enabled = reduce
        self.batch_size = batch_size
        self.inactivity = inactivity
        self.stat_source = stat_source
        self.filter_kinds = filter_kinds
        self.per_event_resolution = per_event_resolution
        self.visibility = visibility or VisibilityPolicy()
        self.tz_offset = tz_offset
        self.clock = clock

        self._slots: dict[str, _Slot] = {}
        self._overrides: list[tuple[int, ev.ChangeEvent]] = []
        self._raw: list[ev.ChangeEvent] = []
        self._order = 0
        self._batch_events = 0
        self._last_activity: float | None = None
        self._batch_seq = 0
        self._max_ts = 0
        self.stats = {
            "events": 0,
            "filtered": 0,
            "cancelled_pairs": 0,
            "batches": 0,
            "updates": 0,
            "deletes": 0,
            "stat_misses": 0,
        }

    # -- ingestion -------------------------------------------------------

    def submit(self, event: ev.ChangeEvent) -> UpdateSet | None:
        """Ingest one event; returns an UpdateSet when this event flushed."""
        self.stats["events"] += 1
        if self.per_event_resolution and self.state.resolver is not None:
            # Baseline strategy: resolve every event's fid up front, the way
            # a per-event path resolver would.
            try:
                self.state.resolver(event.fid)
            except Exception:
                pass
        if event.kind in self.filter_kinds:
            self.stats["filtered"] += 1
            return None
        self._last_activity = self.clock()
        if event.timestamp and event.timestamp > self._max_ts:
            self._max_ts = event.timestamp
        if self.reduce_enabled:
            self._reduce(event)
        else:
            self._raw.append(event)
        self._batch_events += 1
        if self._batch_events >= self.batch_size:
            return self.flush()
        return None

    def _is_dir_event(self, event: ev.ChangeEvent) -> bool:
        if event.is_dir or event.fid in self.state.dirs:
            return True
        slot = self._slots.get(event.fid)
        return slot is not None and slot.is_dir

    def _reduce(self, event: ev.ChangeEvent) -> None:
        kind = event.kind
        if kind == ev.RENAME and self._is_dir_event(event):
            # Rename override: directory moves affect both parents and all
            # descendants, so they bypass reduction and keep their place.
            self._order += 1
            self._overrides.append((self._order, event))
            return
        slot = self._slots.get(event.fid)
        if kind in (ev.UNLINK, ev.RMDIR):
            if slot is not None and slot.created:
                # Cancellation: create/unlink (or mkdir/rmdir) in one batch.
                del self._slots[event.fid]
                self.stats["cancelled_pairs"] += 1
                return
            if slot is None:
                slot = self._new_slot(event.fid)
            slot.deleted = True
            slot.touched = False
            slot.is_dir = slot.is_dir or kind == ev.RMDIR or event.is_dir
            slot.delete_naming = (event.parent_fid, event.name)
            return
        if slot is None:
            slot = self._new_slot(event.fid)
        if kind in (ev.CREATE, ev.MKDIR):
            slot.created = True
            slot.touched = True
            slot.is_dir = kind == ev.MKDIR or event.is_dir
            slot.naming = (event.parent_fid, event.name)
        elif kind == ev.RENAME:
            slot.touched = True
            slot.naming = (event.parent_fid, event.name)
        else:
            # Update coalescing: open/close/attr runs collapse to one slot.
            slot.touched = True
        if event.attrs is not None:
            slot.attrs = event.attrs

    def _new_slot(self, fid: str) -> _Slot:
        self._order += 1
        slot = _Slot(fid, self._order)
        self._slots[fid] = slot
        return slot

    # -- flush -----------------------------------------------------------

    def poll(self, now: float | None = None) -> UpdateSet | None:
        """Flush if the inactivity threshold has elapsed with a pending batch."""
        if self._batch_events == 0 or self._last_activity is None:
            return None
        now = self.clock() if now is None else now
        if now - self._last_activity >= self.inactivity:
            return self.flush()
        return None

    def flush(self) -> UpdateSet:
        if self.reduce_enabled:
            actions: list[tuple[int, str, object]] = [
                (slot.order, "slot", slot) for slot in self._slots.values()
            ]
            actions.extend((order, "event", e) for order, e in self._overrides)
            actions.sort(key=lambda a: a[0])
        else:
            actions = [(i, "event", e) for i, e in enumerate(self._raw)]
        self._slots = {}
        self._overrides = []
        self._raw = []
        self._batch_events = 0
        self._order = 0
        self._last_activity = None
        self._batch_seq += 1

        updates = self._apply(actions)
        self.stats["batches"] += 1
        self.stats["updates"] += len(updates.to_update)
        self.stats["deletes"] += len(updates.to_delete)
        self.stats["stat_misses"] += updates.stat_misses
        if self.sink is not None and not updates.is_empty():
            version = f"{SnapshotVersion.new('monitor', self._max_ts).version_id}-{self._batch_seq:08d}"
            emit(updates, self.sink, self.visibility, self.tz_offset, version)
        return updates

    def _apply(self, actions: list) -> UpdateSet:
        state = self.state
        out = UpdateSet()

        # Pre-pass: capture pre-batch paths (the subjects the index knows)
        # for every object this batch touches, including the descendants of
        # any directory about to be renamed.
        old_paths: dict[str, str] = {}
        rename_descendants: dict[int, list[str]] = {}
        pre_memo: dict[str, str] = {}

        def _remember(fid: str) -> None:
            if fid in old_paths:
                return
            if fid in state.files or fid in state.dirs or fid in state.roots:
                try:
                    old_paths[fid] = state.resolve_path(fid, pre_memo)
                except ResolutionMiss:
                    pass

        for order, tag, payload in actions:
            if tag == "slot":
                _remember(payload.fid)
            else:
                _remember(payload.fid)
                if payload.kind == ev.RENAME and payload.fid in state.dirs:
                    desc = state.descendant_files(payload.fid)
                    rename_descendants[order] = desc
                    for fid in desc:
                        _remember(fid)

        created_in_flush: set[str] = set()
        update_order: dict[str, None] = {}
        delete_entries: dict[str, str] = {}
        attr_hint: dict[str, dict] = {}

        def _create(fid, parent, name, is_dir, attrs):
            if is_dir:
                state.bind_dir(fid, name or fid, parent or "?")
                return
            if parent is None:
                out.orphans.append(fid)
            state.bind_file(fid, name or fid, parent or "?")
            created_in_flush.add(fid)
            update_order[fid] = None
            delete_entries.pop(fid, None)
            if attrs is not None:
                attr_hint[fid] = attrs

        def _delete(fid, naming, is_dir):
            if is_dir or fid in state.dirs:
                state.unbind_dir(fid)
                update_order.pop(fid, None)
                return
            state.unbind_file(fid)
            if fid in created_in_flush:
                # Net zero inside this batch: the index never saw it.
                created_in_flush.discard(fid)
                update_order.pop(fid, None)
                return
            update_order.pop(fid, None)
            path = old_paths.get(fid)
            if path is None:
                parent, name = naming if naming else (None, None)
                if parent is not None:
                    try:
                        base = state.resolve_path(parent)
                        path = f"{base.rstrip('/')}/{name}" if name else base
                    except ResolutionMiss:
                        path = None
                if path is None:
                    path = state.orphan_path(fid, name)
                    out.orphans.append(fid)
            delete_entries[fid] = path

        def _rename(order, fid, parent, name, event_is_dir, attrs):
            if fid in state.dirs or (event_is_dir and fid not in state.files):
                for child in rename_descendants.get(order, ()):
                    if child not in delete_entries:
                        update_order.setdefault(child, None)
                state.rebind_dir(fid, name or fid, parent or "?")
                return
            state.rebind_file(fid, name or fid, parent or "?")
            update_order[fid] = None
            if attrs is not None:
                attr_hint[fid] = attrs

        def _update(fid, naming, attrs):
            if fid not in state.files and fid not in state.dirs and naming and naming[0]:
                state.bind_file(fid, naming[1] or fid, naming[0])
            if fid in state.dirs:
                return  # directories are not indexed
            update_order.setdefault(fid, None)
            if attrs is not None:
                attr_hint[fid] = attrs

        for order, tag, payload in actions:
            if tag == "slot":
                slot: _Slot = payload
                if slot.deleted:
                    _delete(slot.fid, slot.delete_naming, slot.is_dir)
                elif slot.created:
                    _create(slot.fid, *(slot.naming or (None, None)), slot.is_dir, slot.attrs)
                elif slot.naming is not None:
                    _rename(order, slot.fid, slot.naming[0], slot.naming[1], slot.is_dir, slot.attrs)
                elif slot.touched:
                    _update(slot.fid, None, slot.attrs)
            else:
                event: ev.ChangeEvent = payload
                kind = event.kind
                if kind in (ev.CREATE, ev.MKDIR):
                    _create(event.fid, event.parent_fid, event.name,
                            kind == ev.MKDIR or event.is_dir, event.attrs)
                elif kind in (ev.UNLINK, ev.RMDIR):
                    _delete(event.fid, (event.parent_fid, event.name),
                            kind == ev.RMDIR or event.is_dir)
                elif kind == ev.RENAME:
                    _rename(order, event.fid, event.parent_fid, event.name,
                            event.is_dir, event.attrs)
                elif kind in ev.UPDATE_KINDS:
                    _update(event.fid, (event.parent_fid, event.name), event.attrs)
                # open and unknown kinds change no tracked metadata

        # Emission set: resolve final paths and gather stats.
        post_memo: dict[str, str] = {}
        for fid in update_order:
            if fid in delete_entries:
                continue
            try:
                path = state.resolve_path(fid, post_memo)
            except ResolutionMiss:
                binding = state.files.get(fid)
                path = state.orphan_path(fid, binding[0] if binding else None)
                out.orphans.append(fid)
            stat = attr_hint.get(fid)
            if stat is None:
                if self.stat_source is None:
                    continue
                try:
                    stat = self.stat_source(fid)
                except (StatMiss, KeyError):
                    # Already gone: demote to a delete of the known subject.
                    out.stat_misses += 1
                    delete_entries.setdefault(fid, old_paths.get(fid, path))
                    continue
            stale = old_paths.get(fid)
            out.to_update.append(UpdateItem(
                fid, path, stat, stale if stale is not None and stale != path else None,
            ))
        out.to_delete.extend(delete_entries.items())
        return out

    # -- drivers -----------------------------------------------------------

    def run(self, event_stream) -> dict:
        """Process a whole stream, flush the tail, and report."""
        for event in event_stream:
            self.submit(event)
        if self._batch_events:
            self.flush()
        return dict(self.stats)

    def serve(self, source: "queue.Queue") -> dict:
        """Consume a live MPSC queue until a `None` sentinel arrives."""
        while True:
            if self._batch_events and self._last_activity is not None:
                wait = max(0.0, self.inactivity - (self.clock() - self._last_activity))
            else:
                wait = None
            try:
                event = source.get(timeout=wait)
            except queue.Empty:
                self.poll()
                continue
            if event is None:
                if self._batch_events:
                    self.flush()
                return dict(self.stats)
            self.submit(event)


# ---------------------------------------------------------------------------
# Notification layer
# ---------------------------------------------------------------------------

def stat_to_content(path: str, stat: dict, version: str, tz_offset: str,
                    fid: str | None = None) -> dict:
    content = {
        "path": path,
        "type": stat["type"],
        "mode": render_mode(stat["mode"]),
        "mode_raw": mode_raw(stat["mode"]),
        "uid": stat["uid"],
        "gid": stat["gid"],
        "size": stat["size"],
        "atime": epoch_to_iso8601(stat["atime"], tz_offset),
        "ctime": epoch_to_iso8601(stat["ctime"], tz_offset),
        "mtime": epoch_to_iso8601(stat["mtime"], tz_offset),
        "version": version,
    }
    if stat.get("fileset") is not None:
        content["fileset"] = stat["fileset"]
    if fid is not None:
        content["fid"] = fid
    return content


def build_requests(updates: UpdateSet, visibility: VisibilityPolicy,
                   tz_offset: str, version: str) -> list[dict]:
    """Order: stale-subject retirements, then ingests, then deletions.

    Retiring a renamed object's old subject before any ingest keeps a
    same-batch recreation of that path from being clobbered; explicit
    deletions stay after updates so a rename-then-delete cannot resurrect
    a record.
    """
    requests: list[dict] = []
    ingest_paths = {item.path for item in updates.to_update}
    for item in updates.to_update:
        if item.stale_path and item.stale_path != item.path:
            requests.append({"action": "delete", "subject": item.stale_path,
                             "fid": item.fid, "reason": "renamed"})
    for item in updates.to_update:
        requests.append({
            "action": "ingest",
            "subject": item.path,
            "visible_to": _visible_for(visibility, item.stat),
            "content": stat_to_content(item.path, item.stat, version, tz_offset, item.fid),
        })
    for fid, path in updates.to_delete:
        if path in ingest_paths:
            continue  # another object now lives at this subject
        requests.append({"action": "delete", "subject": path, "fid": fid})
    return requests


def _visible_for(visibility: VisibilityPolicy, stat: dict) -> list[str]:
    out = list(visibility.static)
    if visibility.include_owner:
        out.append(f"user:{stat['uid']}")
    if visibility.include_group:
        out.append(f"group:{stat['gid']}")
    return out


class CollectEmitter:
    """Keeps emitted requests in memory (tests, dry runs)."""

    def __init__(self):
        self.requests: list[dict] = []

    def handle(self, requests: list[dict], version: str) -> int:
        self.requests.extend(requests)
        return len(requests)


class LogEmitter:
    """Append-only newline-delimited JSON notification log."""

    def __init__(self, path: str):
        self.path = path
        self._fh = open(path, "a")

    def handle(self, requests: list[dict], version: str) -> int:
        for request in requests:
            self._fh.write(json.dumps(request, separators=(",", ":"), sort_keys=True))
            self._fh.write("\n")
        self._fh.flush()
        return len(requests)

    def close(self) -> None:
        self._fh.close()


class IndexEmitter:
    """Applies requests synchronously to an embedded index store."""

    def __init__(self, store):
        self.store = store

    def handle(self, requests: list[dict], version: str) -> int:
        n = 0
        ingests = [r for r in requests if r["action"] == "ingest"]
        # Deletions run in request order around the ingest batch: stale
        # retirements first, explicit deletions last.
        for request in requests:
            if request["action"] == "delete" and request.get("reason") == "renamed":
                self.store.delete(request["subject"])
                n += 1
        if ingests:
            self.store.ingest(
                [{"subject": r["subject"], "visible_to": r["visible_to"],
                  "content": r["content"], "version": version} for r in ingests],
                version,
            )
            n += len(ingests)
        for request in requests:
            if request["action"] == "delete" and request.get("reason") != "renamed":
                self.store.delete(request["subject"])
                n += 1
        return n


def emit(updates: UpdateSet, sink, visibility: VisibilityPolicy,
         tz_offset: str, version: str, retries: int = 3,
         dead_letter: str | None = None) -> int:
    """Convert an UpdateSet into requests and hand them to the sink."""
    requests = build_requests(updates, visibility, tz_offset, version)
    if not requests:
        return 0
    last: Exception | None = None
    for attempt in range(retries):
        try:
            return sink.handle(requests, version)
        except Exception as exc:
            last = exc
            log.warning("notification sink failed (attempt %d/%d): %s",
                        attempt + 1, retries, exc)
            time.sleep(0.05 * (attempt + 1))
    if dead_letter:
        with open(dead_letter, "a") as fh:
            for request in requests:
                fh.write(json.dumps(request, separators=(",", ":")) + "\n")
        log.error("requests written to dead-letter file %s", dead_letter)
        return 0
    raise RuntimeError(f"notification sink failed after {retries} attempts: {last}")
