"""Independent oracle implementations used by the test suite.

Everything here is deliberately written without reusing the code paths it
checks: the CRC is table-driven from the polynomial, query evaluation is a
plain linear scan, and the event-stream shadow is a from-scratch replay.
"""

from __future__ import annotations

import math
import re


def _build_crc_table() -> list[int]:
    # Reflected CRC-32, polynomial 0xEDB88320 (bit-reversed 0x04C11DB7).
    table = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ 0xEDB88320 if crc & 1 else crc >> 1
        table.append(crc)
    return table


_CRC_TABLE = _build_crc_table()


def reference_crc32(data: bytes) -> int:
    crc = 0xFFFFFFFF
    for byte in data:
        crc = _CRC_TABLE[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFF


def nearest_rank(values, q: float):
    """Independent nearest-rank quantile: sort, take ceil(q*N), 1-indexed."""
    ordered = sorted(values)
    rank = max(1, math.ceil(q * len(ordered)))
    return ordered[rank - 1]


# ---------------------------------------------------------------------------
# Brute-force query evaluation (linear scan, no indexes)
# ---------------------------------------------------------------------------

def _field_value(entry: dict, field: str):
    from fsidx.model import iso8601_to_epoch

    if field in ("subject", "path"):
        return entry["subject"]
    if field == "name":
        return entry["subject"].rstrip("/").rsplit("/", 1)[-1]
    if field == "kind":
        return entry["subject"].partition(":")[0]
    if field == "version":
        return entry["version"]
    value = entry["content"].get(field)
    if field in ("atime", "ctime", "mtime") and isinstance(value, str):
        return iso8601_to_epoch(value)
    return value


def _leaf_matches(entry: dict, leaf: dict, now: int) -> bool:
    value = _field_value(entry, leaf["field"])
    if value is None:
        return False
    target = leaf["value"]
    if isinstance(target, str) and leaf["field"] in ("atime", "ctime", "mtime"):
        m = re.match(r"^now(?:\(\))?\s*-\s*(\d+)\s*(y|mo|w|d|h|m)$", target.strip())
        if m:
            units = {"y": 365 * 86400, "mo": 30 * 86400, "w": 7 * 86400,
                     "d": 86400, "h": 3600, "m": 30 * 86400}
            target = now - int(m.group(1)) * units[m.group(2)]
        else:
            from fsidx.model import iso8601_to_epoch

            target = iso8601_to_epoch(target)
    op = leaf["op"]
    if op == "eq":
        return value == target
    if op == "lt":
        return value < target
    if op == "le":
        return value <= target
    if op == "gt":
        return value > target
    if op == "ge":
        return value >= target
    if op == "like":
        pattern = ".*".join(re.escape(p) for p in target.split("*")) + "$"
        return re.match(pattern, value) is not None
    if op == "regex":
        return re.search(target, value) is not None
    raise ValueError(f"oracle: unknown op {op}")


def _node_matches(entry: dict, node: dict, now: int) -> bool:
    op = node.get("op")
    if op == "and":
        return all(_node_matches(entry, arg, now) for arg in node["args"])
    if op == "or":
        return any(_node_matches(entry, arg, now) for arg in node["args"])
    return _leaf_matches(entry, node, now)


def scan_query(entries: list[dict], payload: dict, principals: set[str], now: int) -> list[str]:
    """Reference query evaluation: full scan, visibility, deterministic sort.

    Returns the matching subjects in the same order the store must produce.
    """
    where = payload.get("where")
    matched = []
    for entry in entries:
        if not principals.intersection(entry["visible_to"]):
            continue
        if where is not None and not _node_matches(entry, where, now):
            continue
        matched.append(entry)
    sort_field = payload.get("sort")
    descending = bool(payload.get("descending", False))
    matched.sort(key=lambda e: e["subject"])
    if sort_field is not None:
        present = [e for e in matched if _field_value(e, sort_field) is not None]
        missing = [e for e in matched if _field_value(e, sort_field) is None]
        present.sort(key=lambda e: _field_value(e, sort_field), reverse=descending)
        matched = present + missing
    elif descending:
        matched.reverse()
    offset = payload.get("offset", 0) or 0
    limit = payload.get("limit")
    page = matched[offset:] if limit is None else matched[offset : offset + limit]
    return [e["subject"] for e in page]


# ---------------------------------------------------------------------------
# Event-stream shadow replay (fidelity oracle for the generator)
# ---------------------------------------------------------------------------

class ShadowTree:
    """Minimal from-scratch replay of a change-event stream."""

    def __init__(self, root_fid: str, mount: str = "/"):
        self.parent: dict[str, str] = {}
        self.name: dict[str, str] = {}
        self.is_dir: dict[str, bool] = {root_fid: True}
        self.root = root_fid
        self.mount = mount

    def apply(self, event) -> None:
        kind = event.kind
        if kind in ("create", "mkdir"):
            self.parent[event.fid] = event.parent_fid
            self.name[event.fid] = event.name
            self.is_dir[event.fid] = kind == "mkdir"
        elif kind in ("unlink", "rmdir"):
            self.parent.pop(event.fid, None)
            self.name.pop(event.fid, None)
            self.is_dir.pop(event.fid, None)
        elif kind == "rename":
            self.parent[event.fid] = event.parent_fid
            self.name[event.fid] = event.name

    def path(self, fid: str) -> str:
        parts = []
        cur = fid
        while cur != self.root:
            parts.append(self.name[cur])
            cur = self.parent[cur]
        base = self.mount.rstrip("/")
        return (base + "/" + "/".join(reversed(parts))) if parts else (base or "/")

    def live_paths(self) -> set[str]:
        return {self.path(fid) for fid, d in self.is_dir.items() if not d and fid != self.root}


def normalize_index_content(content: dict) -> tuple:
    """Project an index entry's content onto raw stat values for comparison."""
    from fsidx.model import iso8601_to_epoch

    return (
        content["type"],
        int(str(content["mode_raw"]), 8),
        content["uid"],
        content["gid"],
        content["size"],
        iso8601_to_epoch(content["atime"]),
        iso8601_to_epoch(content["ctime"]),
        iso8601_to_epoch(content["mtime"]),
    )


def normalize_stat(stat: dict) -> tuple:
    return (stat["type"], stat["mode"], stat["uid"], stat["gid"], stat["size"],
            stat["atime"], stat["ctime"], stat["mtime"])
