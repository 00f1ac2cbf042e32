"""Writer and validator for the .spxf per-patch feature sidecar.

Little-endian layout: magic "SPXF", u32 version=1, u32 N (patch count),
u32 M (feature dim), N records of (u32 patch_id, M x f32), u32 CRC32 over
all preceding bytes. Patch ids must cover 0..N-1 of the frame's patch map.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SPXF"
VERSION = 1


def write_sidecar(path, features: np.ndarray) -> None:
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 2:
        raise ValueError(f"features must be (N, M), got shape {features.shape}")
    n, m = features.shape
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<III", VERSION, n, m)
    for pid in range(n):
        buf += struct.pack("<I", pid)
        buf += features[pid].tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(buf))


@dataclass
class SidecarReport:
    path: str
    errors: list = field(default_factory=list)
    patch_count: int | None = None
    feature_dim: int | None = None

    @property
    def ok(self) -> bool:
        return not self.errors


def verify_sidecar(path, patch_map: np.ndarray | None = None) -> SidecarReport:
    """Validate magic, version, size, CRC, and patch-id coverage.

    All failures are enumerated, not just the first. When patch_map is given
    its patch count must equal the header's N.
    """
    path = Path(path)
    report = SidecarReport(path=str(path))
    data = path.read_bytes()

    if len(data) < 20:
        report.errors.append(f"file too short ({len(data)} bytes)")
        return report
    if data[:4] != MAGIC:
        report.errors.append(f"bad magic {data[:4]!r}")
    version, n, m = struct.unpack("<III", data[4:16])
    report.patch_count = n
    report.feature_dim = m
    if version != VERSION:
        report.errors.append(f"unsupported version {version}")
    expected = 16 + n * (4 + 4 * m) + 4
    if len(data) != expected:
        report.errors.append(f"size {len(data)} != expected {expected}")
        return report

    (crc_stored,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc_stored:
        report.errors.append("CRC mismatch")

    seen = np.zeros(n, dtype=bool)
    off = 16
    for _ in range(n):
        (pid,) = struct.unpack_from("<I", data, off)
        if pid >= n:
            report.errors.append(f"patch id {pid} out of range (N={n})")
        elif seen[pid]:
            report.errors.append(f"duplicate patch id {pid}")
        else:
            seen[pid] = True
        values = np.frombuffer(data, dtype="<f4", count=m, offset=off + 4)
        if not np.isfinite(values).all():
            report.errors.append(f"non-finite values for patch id {pid}")
        off += 4 + 4 * m
    missing = np.flatnonzero(~seen)
    if missing.size and not any("out of range" in e or "duplicate" in e for e in report.errors):
        report.errors.append(f"missing patch ids {missing[:8].tolist()}")

    if patch_map is not None:
        map_count = int(np.asarray(patch_map).max()) + 1
        if map_count != n:
            report.errors.append(f"header N={n} but patch map has {map_count} patches")
    return report
