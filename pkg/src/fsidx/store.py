"""Embedded, queryable dual index with versioned ingest and visibility fences.

Persistence is an append-only log of length-prefixed JSON records plus a
small manifest; the in-memory subject map is rebuilt on open. The store is
single-writer / many-reader: every mutation batch atomically replaces the
query view, so readers see pre- or post-batch state, never a partial one.
"""

from __future__ import annotations

import json
import os
import re
import struct
import threading
import time
from bisect import bisect_left, bisect_right

from .model import iso8601_to_epoch

_LEN = struct.Struct("<I")

PRIMARY = "primary"
AGGREGATE = "aggregate"

_TIME_TOKEN = re.compile(r"^now(?:\(\))?\s*-\s*(\d+)\s*(y|mo|w|d|h|m)$")
_TIME_UNITS = {"y": 365 * 86400, "mo": 30 * 86400, "w": 7 * 86400, "d": 86400, "h": 3600, "m": 30 * 86400}
# "m" follows the administrative convention (months), as in "now() - 6m".

_NUMERIC_OPS = ("eq", "lt", "le", "gt", "ge")
_STRING_OPS = ("eq", "like", "regex")


class UnknownFieldError(KeyError):
    def __init__(self, field: str):
        super().__init__(field)
        self.field = field

    def __str__(self):
        return f"unknown query field: {self.field}"


class QueryFormatError(ValueError):
    pass


def _subject_name(entry: dict) -> str:
    return entry["subject"].rstrip("/").rsplit("/", 1)[-1]


def _subject_kind(entry: dict) -> str:
    return entry["subject"].partition(":")[0]


def _content_time(key: str):
    def get(entry: dict):
        value = entry["content"].get(key)
        if value is None:
            return None
        if isinstance(value, str):
            return iso8601_to_epoch(value)
        return value

    return get


def _content(key: str):
    return lambda entry: entry["content"].get(key)


def _schema(kind: str) -> dict:
    if kind == PRIMARY:
        fields = {
            "subject": ("str", lambda e: e["subject"]),
            "path": ("str", lambda e: e["subject"]),
            "name": ("str", _subject_name),
            "type": ("str", _content("type")),
            "mode": ("str", _content("mode")),
            "fileset": ("str", _content("fileset")),
            "version": ("str", lambda e: e["version"]),
            "mode_raw": ("num", _content("mode_raw")),
            "uid": ("num", _content("uid")),
            "gid": ("num", _content("gid")),
            "size": ("num", _content("size")),
            "atime": ("time", _content_time("atime")),
            "ctime": ("time", _content_time("ctime")),
            "mtime": ("time", _content_time("mtime")),
        }
    elif kind == AGGREGATE:
        fields = {
            "subject": ("str", lambda e: e["subject"]),
            "kind": ("str", _subject_kind),
            "version": ("str", lambda e: e["version"]),
            "file_count": ("num", _content("file_count")),
            "size_total": ("num", _content("size_total")),
        }
        for attr in ("size", "atime", "ctime", "mtime"):
            for stat in ("min", "max", "mean", "p10", "p25", "p50", "p75", "p90", "p99"):
                key = f"{attr}_{stat}"
                fields[key] = ("num", _content(key))
    else:
        raise ValueError(f"unknown schema kind: {kind!r}")
    return fields


class _View:
    """Immutable query view over the live entries of one store generation."""

    def __init__(self, live: dict, schema: dict):
        self.schema = schema
        self.subjects = sorted(live)
        self.entries = [live[s] for s in self.subjects]
        self.visible = [frozenset(e["visible_to"]) for e in self.entries]
        self._columns: dict[str, list] = {}
        self._sorted: dict[str, tuple[list, list]] = {}
        self._eq: dict[str, dict] = {}
        self._lock = threading.Lock()

    def column(self, field: str) -> list:
        col = self._columns.get(field)
        if col is None:
            getter = self.schema[field][1]
            with self._lock:
                col = self._columns.get(field)
                if col is None:
                    col = [getter(e) for e in self.entries]
                    self._columns[field] = col
        return col

    def sorted_index(self, field: str) -> tuple[list, list]:
        idx = self._sorted.get(field)
        if idx is None:
            col = self.column(field)
            with self._lock:
                idx = self._sorted.get(field)
                if idx is None:
                    pairs = sorted((v, i) for i, v in enumerate(col) if v is not None)
                    idx = ([p[0] for p in pairs], [p[1] for p in pairs])
                    self._sorted[field] = idx
        return idx

    def eq_index(self, field: str) -> dict:
        idx = self._eq.get(field)
        if idx is None:
            col = self.column(field)
            with self._lock:
                idx = self._eq.get(field)
                if idx is None:
                    idx = {}
                    for i, v in enumerate(col):
                        if v is not None:
                            idx.setdefault(v, []).append(i)
                    self._eq[field] = idx
        return idx


class _Compiler:
    """Turns a boolean predicate tree into a candidate id set over a view."""

    def __init__(self, view: _View, clock):
        self.view = view
        self.clock = clock

    def eval(self, node: dict) -> set:
        if not isinstance(node, dict):
            raise QueryFormatError(f"predicate must be an object, got {type(node).__name__}")
        op = node.get("op")
        if op in ("and", "or"):
            args = node.get("args")
            if not isinstance(args, list) or not args:
                raise QueryFormatError(f"'{op}' needs a non-empty args list")
            sets = [self.eval(a) for a in args]
            out = sets[0]
            for s in sets[1:]:
                out = (out & s) if op == "and" else (out | s)
            return out
        return self._leaf(node)

    def _leaf(self, node: dict) -> set:
        try:
            field, op, value = node["field"], node["op"], node["value"]
        except KeyError as exc:
            raise QueryFormatError(f"predicate missing key: {exc}") from exc
        spec = self.view.schema.get(field)
        if spec is None:
            raise UnknownFieldError(field)
        kind = spec[0]
        if kind == "str":
            if op not in _STRING_OPS:
                raise QueryFormatError(f"operator {op!r} not valid for string field {field}")
            if not isinstance(value, str):
                raise QueryFormatError(f"string field {field} needs a string value")
            if op == "eq":
                return set(self.view.eq_index(field).get(value, ()))
            col = self.view.column(field)
            if op == "like":
                # Wildcard match: '*' spans any run of characters.
                pat = re.compile(".*".join(re.escape(p) for p in value.split("*")) + "$")
                return {i for i, v in enumerate(col) if v is not None and pat.match(v)}
            try:
                pat = re.compile(value)
            except re.error as exc:
                raise QueryFormatError(f"bad regex for {field}: {exc}") from exc
            return {i for i, v in enumerate(col) if v is not None and pat.search(v)}
        # numeric / time fields
        if op not in _NUMERIC_OPS:
            raise QueryFormatError(f"operator {op!r} not valid for numeric field {field}")
        value = self._numeric_value(kind, field, value)
        values, ids = self.view.sorted_index(field)
        if op == "eq":
            lo, hi = bisect_left(values, value), bisect_right(values, value)
        elif op == "lt":
            lo, hi = 0, bisect_left(values, value)
        elif op == "le":
            lo, hi = 0, bisect_right(values, value)
        elif op == "gt":
            lo, hi = bisect_right(values, value), len(values)
        else:
            lo, hi = bisect_left(values, value), len(values)
        return set(ids[lo:hi])

    def _numeric_value(self, kind: str, field: str, value):
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise QueryFormatError(f"field {field} needs a numeric value")
        if isinstance(value, str):
            if kind != "time":
                raise QueryFormatError(f"field {field} needs a numeric value")
            token = _TIME_TOKEN.match(value.strip())
            if token:
                n, unit = token.groups()
                return int(self.clock()) - int(n) * _TIME_UNITS[unit]
            try:
                return iso8601_to_epoch(value)
            except ValueError as exc:
                raise QueryFormatError(f"bad time literal for {field}: {value!r}") from exc
        return value


class IndexStore:
    """One index (primary or aggregate) with optional on-disk persistence."""

    def __init__(self, path: str | None = None, kind: str = PRIMARY,
                 clock=time.time):
        self.kind = kind
        self.schema = _schema(kind)
        self.path = path
        self.clock = clock
        self._lock = threading.RLock()
        # subject -> (version, entry-or-None); None marks a tombstone.
        self._state: dict[str, tuple[str, dict | None]] = {}
        self._watermark: str | None = None
        self._view: _View | None = None
        self._fh = None
        if path is not None:
            os.makedirs(path, exist_ok=True)
            self._open_log()

    # -- persistence ---------------------------------------------------

    def _manifest_path(self) -> str:
        return os.path.join(self.path, "manifest.json")

    def _open_log(self) -> None:
        manifest_path = self._manifest_path()
        if os.path.exists(manifest_path):
            with open(manifest_path) as fh:
                manifest = json.load(fh)
        else:
            manifest = {"kind": self.kind, "segments": ["000001.log"], "watermark": None}
            with open(manifest_path, "w") as fh:
                json.dump(manifest, fh)
        self._watermark = manifest.get("watermark")
        self._segments = manifest["segments"]
        for segment in self._segments:
            self._replay(os.path.join(self.path, segment))
        self._fh = open(os.path.join(self.path, self._segments[-1]), "ab")

    def _replay(self, segment_path: str) -> None:
        if not os.path.exists(segment_path):
            return
        with open(segment_path, "rb") as fh:
            while True:
                head = fh.read(_LEN.size)
                if len(head) < _LEN.size:
                    break
                (n,) = _LEN.unpack(head)
                payload = fh.read(n)
                if len(payload) < n:
                    break  # truncated tail from an interrupted append
                record = json.loads(payload)
                self._apply(record)

    def _append(self, record: dict) -> None:
        if self._fh is None:
            return
        payload = json.dumps(record, separators=(",", ":"), sort_keys=True).encode("utf-8")
        self._fh.write(_LEN.pack(len(payload)) + payload)
        self._fh.flush()

    def _write_manifest(self) -> None:
        if self.path is None:
            return
        with open(self._manifest_path(), "w") as fh:
            json.dump({"kind": self.kind, "segments": self._segments,
                       "watermark": self._watermark}, fh)

    # -- mutation ------------------------------------------------------

    def _apply(self, record: dict) -> bool:
        """Apply one log record to in-memory state; True if state changed."""
        op = record["t"]
        if op == "put":
            entry = record["e"]
            subject, version = entry["subject"], entry["version"]
            if self._watermark is not None and version < self._watermark:
                return False
            current = self._state.get(subject)
            if current is not None and version <= current[0]:
                return False
            self._state[subject] = (version, entry)
            return True
        if op == "del":
            subject = record["s"]
            current = self._state.get(subject)
            if current is None or current[1] is None:
                return False
            self._state[subject] = (current[0], None)
            return True
        if op == "inv":
            version = record["v"]
            changed = False
            for subject, (v, entry) in list(self._state.items()):
                if entry is not None and v < version:
                    self._state[subject] = (v, None)
                    changed = True
            if self._watermark is None or version > self._watermark:
                self._watermark = version
            return changed
        raise ValueError(f"unknown log record type: {op!r}")

    def ingest(self, entries: list[dict], version: str) -> int:
        """Upsert entries under one version; returns how many were applied.

        Re-ingesting a version an entry already has is a no-op, and entries
        older than the live version (or below the invalidation watermark)
        are ignored, so periodic re-execution is idempotent.
        """
        applied = 0
        rejected: list[dict] = []
        with self._lock:
            for entry in entries:
                problem = _validate_entry(entry)
                if problem:
                    rejected.append({"entry": entry, "error": problem})
                    continue
                record = {"t": "put", "e": {
                    "subject": entry["subject"],
                    "visible_to": list(entry["visible_to"]),
                    "content": entry["content"],
                    "version": entry.get("version", version),
                }}
                if record["e"].get("version") is None:
                    record["e"]["version"] = version
                if self._apply(record):
                    self._append(record)
                    applied += 1
            if applied:
                self._view = None
        if rejected:
            raise IngestRejected(applied, rejected)
        return applied

    def delete(self, subject: str) -> int:
        with self._lock:
            record = {"t": "del", "s": subject}
            if self._apply(record):
                self._append(record)
                self._view = None
                return 1
            return 0

    def invalidate_version(self, older_than: str) -> int:
        with self._lock:
            before = sum(1 for v, e in self._state.values() if e is not None and v < older_than)
            record = {"t": "inv", "v": older_than}
            if self._apply(record):
                self._append(record)
                self._view = None
            self._write_manifest()
            return before

    # -- reads -----------------------------------------------------------

    def _get_view(self) -> _View:
        view = self._view
        if view is None:
            with self._lock:
                view = self._view
                if view is None:
                    live = {s: e for s, (_v, e) in self._state.items() if e is not None}
                    view = self._view = _View(live, self.schema)
        return view

    def count_live(self) -> int:
        return len(self._get_view().entries)

    def get(self, subject: str, principals: set[str] | None = None) -> dict | None:
        view = self._get_view()
        i = bisect_left(view.subjects, subject)
        if i == len(view.subjects) or view.subjects[i] != subject:
            return None
        if principals is not None and not principals & view.visible[i]:
            return None
        return view.entries[i]

    def query(self, payload: dict, principals: set[str]) -> dict:
        """Evaluate a predicate tree; results are visibility-filtered and
        deterministically ordered (sort key, then subject)."""
        if not isinstance(payload, dict):
            raise QueryFormatError("query payload must be an object")
        view = self._get_view()
        where = payload.get("where")
        if where is None:
            ids = set(range(len(view.entries)))
        else:
            ids = _Compiler(view, self.clock).eval(where)
        visible = view.visible
        ids = [i for i in ids if principals & visible[i]]

        sort_field = payload.get("sort")
        descending = bool(payload.get("descending", False))
        ids.sort(key=lambda i: view.subjects[i])
        if sort_field is not None:
            if sort_field not in view.schema:
                raise UnknownFieldError(sort_field)
            col = view.column(sort_field)
            present = [i for i in ids if col[i] is not None]
            missing = [i for i in ids if col[i] is None]
            present.sort(key=lambda i: col[i], reverse=descending)
            ids = present + missing
        elif descending:
            ids.reverse()

        total = len(ids)
        offset = int(payload.get("offset", 0) or 0)
        limit = payload.get("limit")
        if offset < 0:
            raise QueryFormatError("offset must be >= 0")
        page = ids[offset:] if limit is None else ids[offset : offset + int(limit)]
        return {
            "total": total,
            "offset": offset,
            "entries": [view.entries[i] for i in page],
        }

    def top_k(self, field: str, k: int, kind: str | None,
              principals: set[str]) -> list[dict]:
        """The k highest principals by a numeric aggregate field."""
        if k <= 0:
            raise QueryFormatError("k must be positive")
        view = self._get_view()
        spec = view.schema.get(field)
        if spec is None:
            raise UnknownFieldError(field)
        if spec[0] == "str":
            raise QueryFormatError(f"top-k field must be numeric: {field}")
        col = view.column(field)
        visible = view.visible
        rows = []
        for i, value in enumerate(col):
            if value is None or not principals & visible[i]:
                continue
            if kind and not view.subjects[i].startswith(kind + ":"):
                continue
            rows.append((-value, view.subjects[i], i))
        rows.sort()
        return [
            {"subject": subject, "value": -neg, "file_count": view.entries[i]["content"].get("file_count")}
            for neg, subject, i in rows[:k]
        ]

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None


class IngestRejected(ValueError):
    """Some entries failed schema validation; the rest were applied."""

    def __init__(self, applied: int, rejected: list[dict]):
        super().__init__(f"{len(rejected)} entries rejected")
        self.applied = applied
        self.rejected = rejected


def _validate_entry(entry: dict) -> str | None:
    if not isinstance(entry, dict):
        return "entry must be an object"
    subject = entry.get("subject")
    if not isinstance(subject, str) or not subject:
        return "missing or empty subject"
    visible = entry.get("visible_to")
    if not isinstance(visible, (list, tuple)) or not all(isinstance(v, str) for v in visible):
        return "visible_to must be a list of strings"
    if not isinstance(entry.get("content"), dict):
        return "content must be an object"
    return None
