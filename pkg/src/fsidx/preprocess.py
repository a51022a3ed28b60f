"""Convert raw metadata exports into chunked, normalized CSV files.

Two input adapters are built in:

* ``entries_csv`` — a 22-column comma-separated dump of a GUFI-style
  ``entries`` table (documented column order in the README), one row per
  object, ``mode`` as a decimal st_mode integer.
* ``policy_tsv`` — an 18-column tab-separated policy LIST export with octal
  modes and a fileset column.

Both map onto the 9/10-column normalized row; directory rows are dropped,
malformed rows are counted and skipped.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .model import DIRECTORY, FILE, LINK, NormalizedRow, RowError

# Bytes that must never appear raw inside a normalized path field.
_ESCAPE_BYTES = frozenset(b'%,"\n\r') | set(range(0x20))


class PreprocessError(ValueError):
    pass


def escape_path(raw: bytes | str) -> str:
    """Percent-encode a raw path so it is CSV-safe and invertible.

    Separators, quotes, newlines, control bytes, '%' itself, and any byte
    that is not valid UTF-8 are encoded as %XX.
    """
    if isinstance(raw, str):
        raw = raw.encode("utf-8", "surrogateescape")
    if not raw:
        raise PreprocessError("empty path")
    out: list[str] = []
    i = 0
    n = len(raw)
    while i < n:
        b = raw[i]
        if b in _ESCAPE_BYTES or b > 0x7F:
            # Multi-byte sequences are passed through only when they decode
            # cleanly; anything else is escaped byte-by-byte.
            if b > 0x7F:
                for width in (2, 3, 4):
                    chunk = raw[i : i + width]
                    try:
                        decoded = chunk.decode("utf-8")
                    except UnicodeDecodeError:
                        continue
                    if len(chunk) == width:
                        out.append(decoded)
                        i += width
                        break
                else:
                    out.append(f"%{b:02X}")
                    i += 1
                continue
            out.append(f"%{b:02X}")
            i += 1
        else:
            out.append(chr(b))
            i += 1
    return "".join(out)


def unescape_path(escaped: str) -> bytes:
    out = bytearray()
    i = 0
    n = len(escaped)
    while i < n:
        c = escaped[i]
        if c == "%":
            out.append(int(escaped[i + 1 : i + 3], 16))
            i += 3
        else:
            out.extend(c.encode("utf-8"))
            i += 1
    return bytes(out)


@dataclass(frozen=True)
class RawListingFormat:
    """Column mapping from a raw export to the normalized row fields."""

    name: str
    separator: str
    n_columns: int
    columns: dict  # normalized field -> raw column index
    type_codes: dict  # raw type value -> "f" | "l" | "d"
    mode_base: int  # 10 for decimal st_mode, 8 for octal digit strings
    has_fileset: bool = False

    def parse_row(self, fields: list[str]) -> NormalizedRow | None:
        """Parse one raw row; returns None for directory rows."""
        if len(fields) != self.n_columns:
            raise PreprocessError(
                f"{self.name}: expected {self.n_columns} columns, got {len(fields)}"
            )
        cols = self.columns
        obj_type = self.type_codes.get(fields[cols["type"]])
        if obj_type is None:
            raise PreprocessError(f"{self.name}: unknown type code {fields[cols['type']]!r}")
        if obj_type == DIRECTORY:
            return None
        row = NormalizedRow(
            path=escape_path(fields[cols["path"]]),
            type=obj_type,
            mode=int(fields[cols["mode"]], self.mode_base),
            uid=int(fields[cols["uid"]]),
            gid=int(fields[cols["gid"]]),
            size=int(fields[cols["size"]]),
            atime=int(fields[cols["atime"]]),
            ctime=int(fields[cols["ctime"]]),
            mtime=int(fields[cols["mtime"]]),
            fileset=fields[cols["fileset"]] if self.has_fileset else None,
        )
        row.validate()
        return row


# GUFI-style entries dump: path, type, inode, mode, nlink, uid, gid, size,
# blksize, blocks, atime, mtime, ctime, linkname, xattrs, crtime,
# ossint1..ossint4, osstext1, osstext2.
ENTRIES_CSV = RawListingFormat(
    name="entries_csv",
    separator=",",
    n_columns=22,
    columns={
        "path": 0, "type": 1, "mode": 3, "uid": 5, "gid": 6, "size": 7,
        "atime": 10, "mtime": 11, "ctime": 12,
    },
    type_codes={"f": FILE, "l": LINK, "d": DIRECTORY},
    mode_base=10,
)

# Policy LIST export: inode, gen, snapshot, path, type, mode, uid, gid, size,
# kb_allocated, atime, ctime, mtime, blocks, nlink, pool, misc, fileset.
POLICY_TSV = RawListingFormat(
    name="policy_tsv",
    separator="\t",
    n_columns=18,
    columns={
        "path": 3, "type": 4, "mode": 5, "uid": 6, "gid": 7, "size": 8,
        "atime": 10, "ctime": 11, "mtime": 12, "fileset": 17,
    },
    type_codes={"F": FILE, "L": LINK, "D": DIRECTORY},
    mode_base=8,
    has_fileset=True,
)

FORMATS = {"entries_csv": ENTRIES_CSV, "policy_tsv": POLICY_TSV}


@dataclass
class ChunkManifest:
    source: str
    format: str
    target_rows: int
    chunks: list = field(default_factory=list)  # [{"name", "rows", "bytes"}]
    rows_in: int = 0
    rows_retained: int = 0
    rows_filtered_dirs: int = 0
    rows_rejected: int = 0
    bytes_in: int = 0
    bytes_out: int = 0
    errors: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ChunkManifest":
        return cls(**json.loads(text))


class _ChunkWriter:
    """Writes normalized rows into `<source>-<seq>.csv` chunk files.

    Split points land on unit boundaries (a unit is a maximal run of rows
    sharing a parent directory, standing in for one per-directory source
    database) once a chunk reaches the target; a chunk is force-split at
    2x target even mid-unit.
    """

    def __init__(self, out_dir: str, source: str, target_rows: int, manifest: ChunkManifest):
        self.out_dir = out_dir
        self.source = source
        self.target = target_rows
        self.hard_cap = 2 * target_rows
        self.manifest = manifest
        self.seq = 0
        self.rows = 0
        self.bytes = 0
        self.fh = None
        self.current_unit: str | None = None

    def _open(self) -> None:
        name = f"{self.source}-{self.seq:05d}.csv"
        self.fh = open(os.path.join(self.out_dir, name), "wb")
        self.name = name
        self.rows = 0
        self.bytes = 0

    def _close(self) -> None:
        if self.fh is None:
            return
        self.fh.close()
        self.fh = None
        self.manifest.chunks.append({"name": self.name, "rows": self.rows, "bytes": self.bytes})
        self.manifest.bytes_out += self.bytes
        self.seq += 1

    def write(self, row: NormalizedRow) -> None:
        unit = row.path.rsplit("/", 1)[0] or "/"
        if self.fh is not None and unit != self.current_unit and self.rows >= self.target:
            self._close()
        self.current_unit = unit
        if self.fh is None:
            self._open()
        line = row.to_csv_line().encode("utf-8") + b"\n"
        self.fh.write(line)
        self.rows += 1
        self.bytes += len(line)
        if self.rows >= self.hard_cap:
            self._close()

    def finish(self) -> None:
        self._close()


def normalize(
    input_path: str,
    fmt: RawListingFormat | str,
    target_rows: int,
    out_dir: str,
    source: str | None = None,
) -> ChunkManifest:
    """Convert one raw listing into normalized chunk files plus a manifest."""
    if isinstance(fmt, str):
        fmt = FORMATS[fmt]
    if target_rows < 1:
        raise PreprocessError("target_rows must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    if source is None:
        source = os.path.basename(input_path).rsplit(".", 1)[0]

    manifest = ChunkManifest(source=source, format=fmt.name, target_rows=target_rows)
    writer = _ChunkWriter(out_dir, source, target_rows, manifest)
    with open(input_path, "rb") as fh:
        for lineno, raw_line in enumerate(fh, 1):
            line = raw_line.rstrip(b"\n").rstrip(b"\r")
            if not line:
                continue
            manifest.rows_in += 1
            manifest.bytes_in += len(raw_line)
            try:
                fields = line.decode("utf-8", "surrogateescape").split(fmt.separator)
                row = fmt.parse_row(fields)
            except (PreprocessError, RowError, ValueError) as exc:
                manifest.rows_rejected += 1
                if len(manifest.errors) < 100:
                    manifest.errors.append({"line": lineno, "error": str(exc)})
                continue
            if row is None:
                manifest.rows_filtered_dirs += 1
                continue
            writer.write(row)
            manifest.rows_retained += 1
    writer.finish()
    return manifest


def write_manifest(manifest: ChunkManifest, out_dir: str) -> str:
    path = os.path.join(out_dir, f"{manifest.source}.manifest.json")
    with open(path, "w") as fh:
        fh.write(manifest.to_json())
        fh.write("\n")
    return path


def read_rows(chunk_path: str):
    """Iterate NormalizedRows from one chunk file, yielding (line_bytes, row)."""
    with open(chunk_path, "rb") as fh:
        for raw in fh:
            line = raw.rstrip(b"\n")
            if not line:
                continue
            fields = line.decode("utf-8").split(",")
            yield line, NormalizedRow.from_csv_fields(fields)
