"""Unified change events plus the Lustre and GPFS ingestion adapters.

The Lustre adapter parses a text changelog line per event; no path
resolution happens at this stage. The GPFS adapter parses one JSON document
per event; those events carry an embedded stat block, so the downstream
state manager never needs to stat GPFS objects.

Changelog line grammar (space separated)::

    <id> <NNTYPE> <time> t=[fid] [p=[fid]] <name>          # create/mkdir/unlink/rmdir
    <id> 08RENME <time> s=[fid] sp=[fid] p=[fid] <name>    # rename: source, old parent, new parent
    <id> <NNTYPE> <time> t=[fid]                            # open/close/attr events

`time` is integer epoch seconds (HH:MM:SS is also accepted on input).
"""

from __future__ import annotations

import json
import re

CREATE = "create"
MKDIR = "mkdir"
UNLINK = "unlink"
RMDIR = "rmdir"
RENAME = "rename"
OPEN = "open"
CLOSE = "close"
ATTR_UPDATE = "attr_update"
WRITE_CLOSE = "write_close"

KINDS = frozenset({CREATE, MKDIR, UNLINK, RMDIR, RENAME, OPEN, CLOSE, ATTR_UPDATE, WRITE_CLOSE})

# Kinds that mean "the object's metadata changed; capture its final state".
UPDATE_KINDS = frozenset({CLOSE, WRITE_CLOSE, ATTR_UPDATE})


class ParseError(ValueError):
    """A raw event could not be parsed; keeps the raw input for audit."""

    def __init__(self, message: str, raw=None):
        super().__init__(message)
        self.raw = raw


class ChangeEvent:
    """One file system metadata event in source-independent form."""

    __slots__ = ("event_id", "kind", "fid", "parent_fid", "source_fid",
                 "source_parent_fid", "name", "timestamp", "attrs", "source",
                 "is_dir", "fileset")

    def __init__(self, event_id, kind, fid, parent_fid=None, source_fid=None,
                 source_parent_fid=None, name=None, timestamp=0, attrs=None,
                 source="lustre", is_dir=False, fileset=None):
        self.event_id = event_id
        self.kind = kind
        self.fid = fid
        self.parent_fid = parent_fid
        self.source_fid = source_fid
        self.source_parent_fid = source_parent_fid
        self.name = name
        self.timestamp = timestamp
        self.attrs = attrs
        self.source = source
        self.is_dir = is_dir
        self.fileset = fileset

    def __repr__(self):
        return (f"ChangeEvent(id={self.event_id}, kind={self.kind}, fid={self.fid}, "
                f"parent={self.parent_fid}, name={self.name!r})")

    def __eq__(self, other):
        if not isinstance(other, ChangeEvent):
            return NotImplemented
        return all(getattr(self, a) == getattr(other, a) for a in self.__slots__)


_LUSTRE_CODES = {
    "01CREAT": CREATE,
    "02MKDIR": MKDIR,
    "06UNLNK": UNLINK,
    "07RMDIR": RMDIR,
    "08RENME": RENAME,
    "10OPEN": OPEN,
    "11CLOSE": CLOSE,
    "17MTIME": ATTR_UPDATE,
}
_LUSTRE_RENDER = {kind: code for code, kind in _LUSTRE_CODES.items()}
_LUSTRE_RENDER[WRITE_CLOSE] = "11CLOSE"  # writes surface as close events

_LINE = re.compile(
    r"^(\d+)\s+(\d{2}[A-Z]+)\s+(\S+)((?:\s+(?:t|p|s|sp)=\[[^\]]*\])*)\s*(.*)$"
)
_FID_TOKEN = re.compile(r"(t|p|s|sp)=\[([^\]]*)\]")
_HMS = re.compile(r"^(\d{1,2}):(\d{2}):(\d{2})$")

# Kinds whose directory-ness is implied by the kind itself.
_DIR_KINDS = frozenset({MKDIR, RMDIR})


def parse_lustre_changelog(line: str) -> ChangeEvent:
    """Parse one changelog line into a ChangeEvent (no path resolution)."""
    m = _LINE.match(line.strip())
    if m is None:
        raise ParseError(f"unparseable changelog line: {line!r}", raw=line)
    event_id, code, time_token, fid_blob, name = m.groups()
    kind = _LUSTRE_CODES.get(code)
    if kind is None:
        raise ParseError(f"unknown changelog type code {code!r}", raw=line)
    hms = _HMS.match(time_token)
    if hms:
        h, mn, s = (int(x) for x in hms.groups())
        timestamp = h * 3600 + mn * 60 + s
    else:
        try:
            timestamp = int(time_token)
        except ValueError:
            raise ParseError(f"bad time token {time_token!r}", raw=line) from None
    fids = dict(_FID_TOKEN.findall(fid_blob))
    name = name.strip() or None

    if kind == RENAME:
        if "s" not in fids or "sp" not in fids or "p" not in fids:
            raise ParseError("rename line needs s=, sp= and p= fids", raw=line)
        return ChangeEvent(int(event_id), kind, fid=fids["s"], parent_fid=fids["p"],
                           source_fid=fids["s"], source_parent_fid=fids["sp"],
                           name=name, timestamp=timestamp, source="lustre")
    if "t" not in fids:
        raise ParseError("changelog line missing t= fid", raw=line)
    if kind in (CREATE, MKDIR, UNLINK, RMDIR) and "p" not in fids:
        raise ParseError(f"{kind} line missing p= parent fid", raw=line)
    return ChangeEvent(int(event_id), kind, fid=fids["t"], parent_fid=fids.get("p"),
                       name=name, timestamp=timestamp, source="lustre",
                       is_dir=kind in _DIR_KINDS)


def render_lustre_changelog(event: ChangeEvent) -> str:
    """Render an event back into the canonical changelog line."""
    code = _LUSTRE_RENDER[event.kind]
    parts = [str(event.event_id), code, str(event.timestamp)]
    if event.kind == RENAME:
        parts.append(f"s=[{event.source_fid or event.fid}]")
        parts.append(f"sp=[{event.source_parent_fid}]")
        parts.append(f"p=[{event.parent_fid}]")
    else:
        parts.append(f"t=[{event.fid}]")
        if event.parent_fid is not None:
            parts.append(f"p=[{event.parent_fid}]")
    if event.name:
        parts.append(event.name)
    return " ".join(parts)


_GPFS_EVENTS = {
    "IN_CREATE": CREATE,
    "IN_MKDIR": MKDIR,
    "IN_DELETE": UNLINK,
    "IN_RMDIR": RMDIR,
    "IN_MOVE": RENAME,
    "IN_OPEN": OPEN,
    "IN_CLOSE_NOWRITE": CLOSE,
    "IN_CLOSE_WRITE": WRITE_CLOSE,
    "IN_ATTRIB": ATTR_UPDATE,
}
_GPFS_RENDER = {kind: name for name, kind in _GPFS_EVENTS.items()}

_ATTR_KEYS = ("type", "mode", "uid", "gid", "size", "atime", "ctime", "mtime")


def parse_gpfs_event(message: bytes | str) -> ChangeEvent:
    """Parse one JSON event document from a fileset topic."""
    try:
        doc = json.loads(message)
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad JSON event: {exc}", raw=message) from exc
    if not isinstance(doc, dict):
        raise ParseError("event document must be a JSON object", raw=message)
    name = doc.get("event")
    kind = _GPFS_EVENTS.get(name)
    if kind is None:
        raise ParseError(f"unknown event name {name!r}", raw=message)
    for required in ("id", "fid", "fileset"):
        if required not in doc:
            raise ParseError(f"event missing mandatory field {required!r}", raw=message)
    attrs = doc.get("attrs")
    if attrs is not None:
        missing = [k for k in _ATTR_KEYS if k not in attrs]
        if missing:
            raise ParseError(f"attrs block missing {missing}", raw=message)
    if kind == RENAME and "source_parent_fid" not in doc:
        raise ParseError("IN_MOVE event missing source_parent_fid", raw=message)
    return ChangeEvent(
        event_id=doc["id"],
        kind=kind,
        fid=doc["fid"],
        parent_fid=doc.get("parent_fid"),
        source_fid=doc["fid"] if kind == RENAME else None,
        source_parent_fid=doc.get("source_parent_fid"),
        name=doc.get("name"),
        timestamp=doc.get("ts", 0),
        attrs=attrs,
        source="gpfs",
        is_dir=bool(doc.get("isdir", kind in _DIR_KINDS)),
        fileset=doc["fileset"],
    )


def render_gpfs_event(event: ChangeEvent) -> str:
    doc = {
        "id": event.event_id,
        "event": _GPFS_RENDER[event.kind],
        "fid": event.fid,
        "fileset": event.fileset or "fs0",
        "ts": event.timestamp,
    }
    if event.parent_fid is not None:
        doc["parent_fid"] = event.parent_fid
    if event.source_parent_fid is not None:
        doc["source_parent_fid"] = event.source_parent_fid
    if event.name is not None:
        doc["name"] = event.name
    if event.attrs is not None:
        doc["attrs"] = event.attrs
    if event.is_dir:
        doc["isdir"] = True
    return json.dumps(doc, separators=(",", ":"), sort_keys=True)


def read_lustre_stream(lines, on_clear=None, clear_every: int = 1000):
    """Yield events from an iterable of changelog lines.

    `on_clear(last_event_id)` acknowledges consumed records the way a
    changelog-clear call would; it fires every `clear_every` events and at
    end of stream.
    """
    last_id = None
    since_clear = 0
    for line in lines:
        line = line.rstrip("\n")
        if not line:
            continue
        event = parse_lustre_changelog(line)
        last_id = event.event_id
        since_clear += 1
        if on_clear is not None and since_clear >= clear_every:
            on_clear(last_id)
            since_clear = 0
        yield event
    if on_clear is not None and last_id is not None and since_clear:
        on_clear(last_id)


def read_gpfs_stream(messages):
    """Yield events from an iterable of JSON documents (one per message)."""
    for message in messages:
        if isinstance(message, (bytes, str)) and not message.strip():
            continue
        yield parse_gpfs_event(message)
