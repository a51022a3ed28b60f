import stat as statmod

import pytest
from hypothesis import given, strategies as st

from fsidx.model import (
    FILE,
    LINK,
    NormalizedRow,
    Principal,
    RowError,
    SnapshotVersion,
    VisibilityPolicy,
    build_primary_record,
    decode_subject,
    encode_subject,
    epoch_to_iso8601,
    iso8601_to_epoch,
    mode_raw,
    principal_from_counting_id,
    render_mode,
)


def test_render_mode_regular_file():
    assert render_mode(0o100644) == "-rw-r--r--"


def test_render_mode_symlink_full_permissions():
    assert render_mode(0o120777) == "lrwxrwxrwx"


def test_render_mode_setuid():
    # Oracle: the platform's own ls-style rendering.
    assert render_mode(0o104755) == statmod.filemode(0o104755) == "-rwsr-xr-x"


@given(st.integers(min_value=0, max_value=0o177777))
def test_render_mode_matches_platform_rendering(mode):
    expected = statmod.filemode(mode)
    got = render_mode(mode)
    # stat.filemode leaves unknown type bits blank in some versions; we pin "?".
    if expected[0] == "?" or got[0] == "?":
        assert got[1:] == expected[1:]
    else:
        assert got == expected


def test_render_mode_file_and_link_lead_characters():
    assert render_mode(0o100000)[0] == "-"
    assert render_mode(0o120000)[0] == "l"


def test_encode_subject_forms():
    assert encode_subject(Principal("user", 123)) == "user:123"
    assert encode_subject(Principal("group", 456)) == "group:456"
    assert encode_subject(Principal("directory", "/a/b/c")) == "dir:/a/b/c"


def test_encode_subject_injective_and_invertible():
    principals = [Principal("user", 7), Principal("group", 7), Principal("directory", "/7")]
    subjects = {encode_subject(p) for p in principals}
    assert len(subjects) == 3
    for p in principals:
        assert decode_subject(encode_subject(p)) == p


def test_counting_id_forms():
    assert Principal("user", 123).counting_id() == "u123"
    assert Principal("group", 456).counting_id() == "g456"
    assert Principal("directory", "/a/b").counting_id() == "/a/b"
    for p in (Principal("user", 5), Principal("group", 9), Principal("directory", "/x")):
        assert principal_from_counting_id(p.counting_id()) == p


def test_epoch_to_iso8601_origin():
    assert epoch_to_iso8601(0) == "1970-01-01T00:00:00+00:00"


def test_epoch_to_iso8601_known_value():
    # Oracle: standard calendar conversion of 1700000000.
    assert epoch_to_iso8601(1_700_000_000) == "2023-11-14T22:13:20+00:00"


@given(st.integers(min_value=0, max_value=2**33), st.sampled_from(["+00:00", "+05:30", "-07:00"]))
def test_epoch_iso_round_trip(t, offset):
    assert iso8601_to_epoch(epoch_to_iso8601(t, offset)) == t


def test_mode_raw_octal_digits():
    assert mode_raw(0o100644) == 100644
    assert mode_raw(0o40755) == 40755


def _row(**kw):
    base = dict(path="/a/f.txt", type=FILE, mode=0o100644, uid=1, gid=2,
                size=10, atime=100, ctime=100, mtime=100)
    base.update(kw)
    return NormalizedRow(**base)


def test_row_validation_accepts_good_rows():
    _row().validate()
    _row(type=LINK, mode=0o120777).validate()


@pytest.mark.parametrize("kw", [
    dict(path="relative/path"),
    dict(path="/a,b"),
    dict(type="d", mode=0o40755),
    dict(type=FILE, mode=0o120777),
    dict(type=LINK, mode=0o100644),
    dict(atime=-1),
    dict(size=-5),
])
def test_row_validation_rejects_bad_rows(kw):
    with pytest.raises(RowError):
        _row(**kw).validate()


def test_row_csv_round_trip():
    row = _row(fileset="fs7")
    fields = row.to_csv_fields()
    assert len(fields) == 10
    assert fields[2] == "100644"
    assert NormalizedRow.from_csv_fields(fields) == row
    nine = _row()
    assert NormalizedRow.from_csv_fields(nine.to_csv_fields()) == nine


def test_primary_record_shape():
    row = _row(atime=0, ctime=1_700_000_000, mtime=86400)
    version = SnapshotVersion.new("snap", 1_700_000_000)
    record = build_primary_record(row, version, VisibilityPolicy(static=("public",)))
    assert record.subject == row.path == record.content["path"]
    assert record.content["mode"] == "-rw-r--r--"
    assert record.content["mode_raw"] == 100644
    assert record.content["atime"] == "1970-01-01T00:00:00+00:00"
    assert iso8601_to_epoch(record.content["ctime"]) == 1_700_000_000
    assert record.content["version"] == version.version_id
    assert "fileset" not in record.content  # absent, not null


def test_primary_record_is_pure():
    row = _row()
    version = SnapshotVersion.new("snap", 1_700_000_000)
    policy = VisibilityPolicy(static=("public",), include_owner=True)
    a = build_primary_record(row, version, policy)
    b = build_primary_record(row, version, policy)
    assert a == b
    assert "user:1" in a.visible_to


def test_snapshot_version_ordering():
    v1 = SnapshotVersion.new("s", 1_700_000_000)
    v2 = SnapshotVersion.new("s", 1_700_000_001)
    assert v1.version_id < v2.version_id
