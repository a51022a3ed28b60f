"""Canonical domain types shared by the pipelines, the monitor, and the index.

Everything here is an immutable value; instances can be handed between
workers freely.
"""

from __future__ import annotations

import stat as statmod
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from functools import lru_cache

FILE = "f"
LINK = "l"
DIRECTORY = "d"

OBJECT_TYPES = frozenset({FILE, LINK})

# Canonical column order of normalized CSV chunks. `fileset` is appended as a
# tenth column only for sources that carry it.
NORMALIZED_COLUMNS = (
    "path",
    "type",
    "mode",
    "uid",
    "gid",
    "size",
    "atime",
    "ctime",
    "mtime",
)


class RowError(ValueError):
    """A row violates the normalized-row contract."""


@dataclass(frozen=True, slots=True)
class NormalizedRow:
    """One file or link's canonical metadata attributes.

    `mode` is the full POSIX st_mode integer (type bits included) and
    timestamps are integer epoch seconds.
    """

    path: str
    type: str
    mode: int
    uid: int
    gid: int
    size: int
    atime: int
    ctime: int
    mtime: int
    fileset: str | None = None

    def validate(self) -> None:
        if not self.path.startswith("/"):
            raise RowError(f"path must be absolute: {self.path!r}")
        if "\n" in self.path or "," in self.path:
            raise RowError(f"path not escaped: {self.path!r}")
        if self.type not in OBJECT_TYPES:
            raise RowError(f"unsupported object type: {self.type!r}")
        if self.type == FILE and not statmod.S_ISREG(self.mode):
            raise RowError(f"mode {self.mode:o} is not a regular file")
        if self.type == LINK and not statmod.S_ISLNK(self.mode):
            raise RowError(f"mode {self.mode:o} is not a symbolic link")
        if min(self.uid, self.gid, self.size) < 0:
            raise RowError("uid/gid/size must be non-negative")
        if min(self.atime, self.ctime, self.mtime) < 0:
            raise RowError("timestamps must be non-negative")

    def to_csv_fields(self) -> list[str]:
        fields = [
            self.path,
            self.type,
            format(self.mode, "o"),
            str(self.uid),
            str(self.gid),
            str(self.size),
            str(self.atime),
            str(self.ctime),
            str(self.mtime),
        ]
        if self.fileset is not None:
            fields.append(self.fileset)
        return fields

    def to_csv_line(self) -> str:
        return ",".join(self.to_csv_fields())

    @classmethod
    def from_csv_fields(cls, fields: list[str]) -> "NormalizedRow":
        if len(fields) not in (9, 10):
            raise RowError(f"expected 9 or 10 columns, got {len(fields)}")
        try:
            row = cls(
                path=fields[0],
                type=fields[1],
                mode=int(fields[2], 8),
                uid=int(fields[3]),
                gid=int(fields[4]),
                size=int(fields[5]),
                atime=int(fields[6]),
                ctime=int(fields[7]),
                mtime=int(fields[8]),
                fileset=fields[9] if len(fields) == 10 else None,
            )
        except ValueError as exc:
            raise RowError(f"unparseable row: {exc}") from exc
        return row


@dataclass(frozen=True, slots=True)
class SnapshotVersion:
    """Identifier making periodic re-ingestion idempotent.

    `version_id` strings compare lexicographically; a later snapshot must
    produce a greater id, which the timestamp prefix guarantees.
    """

    version_id: str
    source: str = ""

    @classmethod
    def new(cls, source: str, epoch: int) -> "SnapshotVersion":
        stamp = datetime.fromtimestamp(epoch, tz=timezone.utc).strftime("%Y%m%dT%H%M%SZ")
        return cls(version_id=f"{stamp}-{source}", source=source)


@dataclass(frozen=True, slots=True)
class Principal:
    """Aggregation key: a user, a group, or a directory prefix."""

    kind: str  # "user" | "group" | "directory"
    key: int | str

    def counting_id(self) -> str:
        """Compact form used on the counting pipeline's wire."""
        if self.kind == "user":
            return f"u{self.key}"
        if self.kind == "group":
            return f"g{self.key}"
        return str(self.key)

    def subject(self) -> str:
        return encode_subject(self)


def encode_subject(p: Principal) -> str:
    """Render a principal as an index subject: user:<uid>, group:<gid>, dir:<path>."""
    if p.kind == "user":
        return f"user:{p.key}"
    if p.kind == "group":
        return f"group:{p.key}"
    if p.kind == "directory":
        return f"dir:{p.key}"
    raise ValueError(f"unknown principal kind: {p.kind!r}")


def decode_subject(subject: str) -> Principal:
    kind, _, key = subject.partition(":")
    if kind == "user":
        return Principal("user", int(key))
    if kind == "group":
        return Principal("group", int(key))
    if kind == "dir":
        return Principal("directory", key)
    raise ValueError(f"unknown subject form: {subject!r}")


def principal_from_counting_id(principal_id: str) -> Principal:
    if principal_id.startswith("/"):
        return Principal("directory", principal_id)
    if principal_id[:1] == "u" and principal_id[1:].isdigit():
        return Principal("user", int(principal_id[1:]))
    if principal_id[:1] == "g" and principal_id[1:].isdigit():
        return Principal("group", int(principal_id[1:]))
    raise ValueError(f"unknown counting principal id: {principal_id!r}")


_TYPE_CHARS = {
    statmod.S_IFREG: "-",
    statmod.S_IFDIR: "d",
    statmod.S_IFLNK: "l",
    statmod.S_IFBLK: "b",
    statmod.S_IFCHR: "c",
    statmod.S_IFIFO: "p",
    statmod.S_IFSOCK: "s",
}


@lru_cache(maxsize=4096)
def render_mode(mode: int) -> str:
    """Render a st_mode integer as the 10-character symbolic form.

    Unknown type bits render as "?"; setuid/setgid/sticky follow the usual
    s/S and t/T conventions.
    """
    out = [_TYPE_CHARS.get(statmod.S_IFMT(mode), "?")]
    for shift, special, schar in ((6, statmod.S_ISUID, "s"), (3, statmod.S_ISGID, "s"), (0, statmod.S_ISVTX, "t")):
        bits = (mode >> shift) & 0o7
        out.append("r" if bits & 0o4 else "-")
        out.append("w" if bits & 0o2 else "-")
        if mode & special:
            out.append(schar if bits & 0o1 else schar.upper())
        else:
            out.append("x" if bits & 0o1 else "-")
    return "".join(out)


@lru_cache(maxsize=4096)
def mode_raw(mode: int) -> int:
    """Octal rendering of a mode as an integer, e.g. 0o100644 -> 100644."""
    return int(format(mode, "o"))


@lru_cache(maxsize=64)
def parse_offset(offset: str) -> timezone:
    """Parse a "+HH:MM" / "-HH:MM" offset string."""
    if len(offset) != 6 or offset[0] not in "+-" or offset[3] != ":":
        raise ValueError(f"bad timezone offset: {offset!r}")
    sign = 1 if offset[0] == "+" else -1
    delta = timedelta(hours=int(offset[1:3]), minutes=int(offset[4:6]))
    return timezone(sign * delta)


def epoch_to_iso8601(t: int, offset: str = "+00:00") -> str:
    """Render epoch seconds as an RFC-3339 string with an explicit offset."""
    if t < 0:
        raise ValueError("negative timestamp")
    return datetime.fromtimestamp(t, tz=parse_offset(offset)).isoformat()


def iso8601_to_epoch(s: str) -> int:
    return int(datetime.fromisoformat(s).timestamp())


@dataclass(frozen=True)
class VisibilityPolicy:
    """Who may see emitted records.

    `static` entries are copied onto every record; owner/group flags add the
    per-record "user:<uid>" / "group:<gid>" principals.
    """

    static: tuple[str, ...] = ("public",)
    include_owner: bool = False
    include_group: bool = False

    def for_row(self, row: NormalizedRow) -> list[str]:
        out = list(self.static)
        if self.include_owner:
            out.append(f"user:{row.uid}")
        if self.include_group:
            out.append(f"group:{row.gid}")
        return out

    def for_principal(self, p: Principal) -> list[str]:
        out = list(self.static)
        if self.include_owner and p.kind == "user":
            out.append(f"user:{p.key}")
        if self.include_group and p.kind == "group":
            out.append(f"group:{p.key}")
        return out


@dataclass(frozen=True, slots=True)
class PrimaryRecord:
    """Indexable per-object document: subject, visible_to, content."""

    subject: str
    visible_to: tuple[str, ...]
    content: dict

    def to_doc(self) -> dict:
        return {
            "subject": self.subject,
            "visible_to": list(self.visible_to),
            "content": self.content,
        }


def build_primary_record(
    row: NormalizedRow,
    version: SnapshotVersion,
    visibility: VisibilityPolicy,
    tz_offset: str = "+00:00",
) -> PrimaryRecord:
    """Convert one normalized row into its index document.

    Pure function of its inputs: same row, version, and policy always yield
    the same record.
    """
    content = {
        "path": row.path,
        "type": row.type,
        "mode": render_mode(row.mode),
        "mode_raw": mode_raw(row.mode),
        "uid": row.uid,
        "gid": row.gid,
        "size": row.size,
        "atime": epoch_to_iso8601(row.atime, tz_offset),
        "ctime": epoch_to_iso8601(row.ctime, tz_offset),
        "mtime": epoch_to_iso8601(row.mtime, tz_offset),
        "version": version.version_id,
    }
    if row.fileset is not None:
        content["fileset"] = row.fileset
    return PrimaryRecord(
        subject=row.path,
        visible_to=tuple(visibility.for_row(row)),
        content=content,
    )


# The six emitted quantiles, plus min/max/mean carried alongside.
QUANTILES = (0.10, 0.25, 0.50, 0.75, 0.90, 0.99)
QUANTILE_LABELS = ("p10", "p25", "p50", "p75", "p90", "p99")
AGG_ATTRS = ("size", "atime", "ctime", "mtime")


@dataclass(frozen=True, slots=True)
class AggregateRecord:
    """Per-principal statistical summary document."""

    subject: str
    visible_to: tuple[str, ...]
    content: dict

    def to_doc(self) -> dict:
        return {
            "subject": self.subject,
            "visible_to": list(self.visible_to),
            "content": self.content,
        }
