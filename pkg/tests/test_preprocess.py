import os
import random

import pytest
from hypothesis import given, settings, strategies as st

from fsidx.preprocess import (
    ENTRIES_CSV,
    POLICY_TSV,
    ChunkManifest,
    PreprocessError,
    escape_path,
    normalize,
    read_rows,
    unescape_path,
    write_manifest,
)


def test_escape_plain_path_unchanged():
    assert escape_path("/a/plain.txt") == "/a/plain.txt"


def test_escape_empty_path_rejected():
    with pytest.raises(PreprocessError):
        escape_path(b"")


def test_escape_removes_separators():
    for nasty in ("/a/with,comma", '/a/with"quote', "/a/with\nnewline", "/a/with\rcr"):
        escaped = escape_path(nasty)
        assert "," not in escaped
        assert '"' not in escaped
        assert "\n" not in escaped and "\r" not in escaped
        assert unescape_path(escaped) == nasty.encode("utf-8")


def test_escape_round_trips_randomized_paths():
    rng = random.Random(5)
    alphabet = b'abc/,"\n\r%\xff\xc3\xa9 \x00'
    for _ in range(10_000):
        raw = b"/" + bytes(rng.choice(alphabet) for _ in range(rng.randrange(1, 24)))
        escaped = escape_path(raw)
        assert not set(escaped) & {",", '"', "\n", "\r"}
        assert unescape_path(escaped) == raw


@settings(max_examples=200)
@given(st.binary(min_size=1, max_size=64))
def test_escape_round_trip_property(raw):
    escaped = escape_path(b"/" + raw)
    assert unescape_path(escaped) == b"/" + raw


def _entries_line(path, typ="f", mode=33188, uid=1, gid=2, size=10,
                  atime=100, mtime=200, ctime=300):
    cols = [path, typ, "9001", str(mode), "1", str(uid), str(gid), str(size),
            "4096", "8", str(atime), str(mtime), str(ctime), "", "", "50",
            "0", "0", "0", "0", "", ""]
    assert len(cols) == 22
    return ",".join(cols)


def _policy_line(path, typ="F", mode="100644", uid=1, gid=2, size=10,
                 atime=100, ctime=300, mtime=200, fileset="fs0"):
    cols = ["12", "1", "0", path, typ, mode, str(uid), str(gid), str(size),
            "16", str(atime), str(ctime), str(mtime), "8", "1", "system", "-", fileset]
    assert len(cols) == 18
    return "\t".join(cols)


def test_normalize_entries_drops_directories(tmp_path):
    src = tmp_path / "dump.csv"
    src.write_text("\n".join([
        _entries_line("/a/f1"),
        _entries_line("/a", typ="d", mode=16877),
        _entries_line("/a/l1", typ="l", mode=41471),
    ]) + "\n")
    manifest = normalize(str(src), ENTRIES_CSV, 1_000_000, str(tmp_path / "out"))
    assert manifest.rows_in == 3
    assert manifest.rows_retained == 2
    assert manifest.rows_filtered_dirs == 1
    assert len(manifest.chunks) == 1
    rows = [row for _line, row in read_rows(str(tmp_path / "out" / manifest.chunks[0]["name"]))]
    assert [r.type for r in rows] == ["f", "l"]
    assert rows[0].mode == 0o100644  # decimal st_mode 33188 normalizes to octal form


def test_normalize_policy_tsv_carries_fileset(tmp_path):
    src = tmp_path / "dump.tsv"
    src.write_text(_policy_line("/b/f1") + "\n" + _policy_line("/b", typ="D", mode="40755") + "\n")
    manifest = normalize(str(src), POLICY_TSV, 100, str(tmp_path / "out"))
    assert manifest.rows_retained == 1
    rows = [row for _l, row in read_rows(str(tmp_path / "out" / manifest.chunks[0]["name"]))]
    assert rows[0].fileset == "fs0"
    assert rows[0].mode == 0o100644


def test_normalize_empty_input(tmp_path):
    src = tmp_path / "empty.csv"
    src.write_text("")
    manifest = normalize(str(src), ENTRIES_CSV, 100, str(tmp_path / "out"))
    assert manifest.rows_in == 0
    assert manifest.chunks == []


def test_normalize_counts_malformed_rows(tmp_path):
    src = tmp_path / "bad.csv"
    src.write_text("\n".join([
        _entries_line("/a/good"),
        "only,three,cols",
        _entries_line("/a/badmode").replace(",33188,", ",notanint,"),
    ]) + "\n")
    manifest = normalize(str(src), ENTRIES_CSV, 100, str(tmp_path / "out"))
    assert manifest.rows_retained == 1
    assert manifest.rows_rejected == 2
    assert len(manifest.errors) == 2
    # Row conservation: files in = retained + rejected (no dirs here).
    assert manifest.rows_in == manifest.rows_retained + manifest.rows_rejected


def test_chunking_splits_near_target(tmp_path):
    src = tmp_path / "big.csv"
    lines = []
    for i in range(2500):
        # Parent directory changes every few rows, so unit runs stay short.
        lines.append(_entries_line(f"/d{i // 4:04d}/f{i:05d}"))
    src.write_text("\n".join(lines) + "\n")
    manifest = normalize(str(src), ENTRIES_CSV, 1000, str(tmp_path / "out"))
    rows_per_chunk = [c["rows"] for c in manifest.chunks]
    assert len(rows_per_chunk) == 3
    assert rows_per_chunk[0] >= 1000 and rows_per_chunk[0] <= 1004
    assert sum(rows_per_chunk) == 2500
    for n in rows_per_chunk:
        assert n <= 2 * 1000


def test_chunking_hard_cap_on_one_giant_unit(tmp_path):
    src = tmp_path / "one-dir.csv"
    src.write_text("\n".join(_entries_line(f"/same/f{i:05d}") for i in range(2500)) + "\n")
    manifest = normalize(str(src), ENTRIES_CSV, 1000, str(tmp_path / "out"))
    rows_per_chunk = [c["rows"] for c in manifest.chunks]
    assert all(n <= 2000 for n in rows_per_chunk)
    assert sum(rows_per_chunk) == 2500


def test_determinism_byte_identical(tmp_path):
    src = tmp_path / "dump.csv"
    src.write_text("\n".join(_entries_line(f"/a/f{i}") for i in range(50)) + "\n")
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    m1 = normalize(str(src), ENTRIES_CSV, 10, str(out1))
    m2 = normalize(str(src), ENTRIES_CSV, 10, str(out2))
    assert m1.to_json() == m2.to_json()
    for chunk in m1.chunks:
        b1 = (out1 / chunk["name"]).read_bytes()
        b2 = (out2 / chunk["name"]).read_bytes()
        assert b1 == b2


def test_output_smaller_than_22_column_input(tmp_path):
    src = tmp_path / "dump.csv"
    src.write_text("\n".join(_entries_line(f"/a/f{i}") for i in range(100)) + "\n")
    manifest = normalize(str(src), ENTRIES_CSV, 1000, str(tmp_path / "out"))
    assert manifest.bytes_out < manifest.bytes_in


def test_manifest_round_trip(tmp_path):
    src = tmp_path / "dump.csv"
    src.write_text(_entries_line("/a/f1") + "\n")
    manifest = normalize(str(src), ENTRIES_CSV, 10, str(tmp_path / "out"))
    path = write_manifest(manifest, str(tmp_path / "out"))
    restored = ChunkManifest.from_json(open(path).read())
    assert restored.to_json() == manifest.to_json()


def test_non_utf8_paths_survive(tmp_path):
    # Raw input rows cannot carry the separator or newlines in the path
    # column (the documented dump contract), but arbitrary other bytes pass
    # through the escaper and round-trip.
    src = tmp_path / "dump.csv"
    raw = b"/weird/\xff\xfe name%with\x01control"
    line = _entries_line("PLACEHOLDER").encode().replace(b"PLACEHOLDER", raw)
    src.write_bytes(line + b"\n")
    manifest = normalize(str(src), ENTRIES_CSV, 10, str(tmp_path / "out"))
    assert manifest.rows_retained == 1
    rows = [row for _l, row in read_rows(str(tmp_path / "out" / manifest.chunks[0]["name"]))]
    assert unescape_path(rows[0].path) == raw
