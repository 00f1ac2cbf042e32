import struct
import zlib

import numpy as np
import pytest

from vit_export.sidecar import verify_sidecar, write_sidecar


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_valid_file_has_no_errors(tmp_path, rng):
    path = tmp_path / "a.spxf"
    write_sidecar(path, rng.random((9, 4)).astype(np.float32))
    report = verify_sidecar(path)
    assert report.ok
    assert report.patch_count == 9 and report.feature_dim == 4


def test_truncation_reported(tmp_path, rng):
    path = tmp_path / "a.spxf"
    write_sidecar(path, rng.random((5, 3)).astype(np.float32))
    data = path.read_bytes()
    path.write_bytes(data[:-7])
    report = verify_sidecar(path)
    assert not report.ok
    assert any("size" in e for e in report.errors)


def test_crc_failure_reported(tmp_path, rng):
    path = tmp_path / "a.spxf"
    write_sidecar(path, rng.random((5, 3)).astype(np.float32))
    data = bytearray(path.read_bytes())
    data[18] ^= 0xFF
    path.write_bytes(bytes(data))
    report = verify_sidecar(path)
    assert any("CRC" in e for e in report.errors)


def _raw_file(records, n, m):
    buf = bytearray()
    buf += b"SPXF"
    buf += struct.pack("<III", 1, n, m)
    for pid, values in records:
        buf += struct.pack("<I", pid)
        buf += np.asarray(values, dtype="<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    return bytes(buf)


def test_duplicate_patch_id_enumerated(tmp_path):
    path = tmp_path / "dup.spxf"
    path.write_bytes(_raw_file([(0, [1, 2]), (0, [3, 4]), (2, [5, 6])], 3, 2))
    report = verify_sidecar(path)
    assert any("duplicate patch id 0" in e for e in report.errors)


def test_multiple_failures_all_listed(tmp_path):
    path = tmp_path / "multi.spxf"
    # duplicate id AND a non-finite value: both must be reported
    path.write_bytes(_raw_file([(1, [np.nan, 0]), (1, [0, 0])], 2, 2))
    report = verify_sidecar(path)
    assert any("non-finite" in e for e in report.errors)
    assert any("duplicate" in e for e in report.errors)


def test_patch_map_count_mismatch(tmp_path, rng):
    path = tmp_path / "a.spxf"
    write_sidecar(path, rng.random((4, 2)).astype(np.float32))
    labels = np.zeros((6, 6), np.int32)  # one patch, header says four
    report = verify_sidecar(path, labels)
    assert any("patch map" in e for e in report.errors)


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.spxf"
    path.write_bytes(b"JUNK" + b"\0" * 40)
    report = verify_sidecar(path)
    assert any("magic" in e for e in report.errors)
