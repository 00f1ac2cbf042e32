"""Patch neighborhood graph: per-patch features, adjacency edges, ground-truth
edge labels, and rebalanced training-pair sampling.

Per-patch feature layout (explicit part, 9 components):

    [r, g, b, x, y, z, nx, ny, nz]

r,g,b are patch-mean color in [0,1]; x,y the patch centroid normalized by
image width/height; z the normalized depth at the valid pixel nearest the
centroid; (nx,ny,nz) the unit surface normal at that pixel. Optional implicit
features (M per patch) append after the explicit block. An edge sample
concatenates the two endpoint vectors.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imagery import RgbdFrame
from .superpixel import SuperpixelMap

EXPLICIT_DIM = 9
FEATURE_BLOCKS = ("rgb", "xyz", "normals", "implicit")
_BLOCK_SLICES = {"rgb": slice(0, 3), "xyz": slice(3, 6), "normals": slice(6, 9)}


class SidecarError(RuntimeError):
    """Implicit-feature sidecar file is malformed or inconsistent."""


def compute_normals(depth: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Per-pixel unit surface normals from depth gradients.

    Gradients are central differences in units of the normalized image extent
    (a full-width ramp of height 1 has x-gradient 1). Differences touching
    invalid pixels fall back to the one-sided difference on the valid side,
    or to 0. The raw normal (-gx, -gy, 1) is L2-normalized.
    """
    depth = np.asarray(depth, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    h, w = depth.shape

    def axis_gradient(d, v, axis):
        n = d.shape[axis]
        nxt = np.roll(d, -1, axis=axis)
        prv = np.roll(d, 1, axis=axis)
        vn = np.roll(v, -1, axis=axis)
        vp = np.roll(v, 1, axis=axis)
        idx = np.arange(n)
        shape = [1, 1]
        shape[axis] = n
        interior = np.broadcast_to(((idx > 0) & (idx < n - 1)).reshape(shape), d.shape)
        has_next = np.broadcast_to((idx < n - 1).reshape(shape), d.shape) & vn
        has_prev = np.broadcast_to((idx > 0).reshape(shape), d.shape) & vp

        central = interior & vn & vp
        g = np.zeros_like(d)
        g[central] = (nxt[central] - prv[central]) / 2.0
        fwd = ~central & has_next & v
        g[fwd] = nxt[fwd] - d[fwd]
        bwd = ~central & ~fwd & has_prev & v
        g[bwd] = d[bwd] - prv[bwd]
        return g

    gx = axis_gradient(depth, valid, 1) * w
    gy = axis_gradient(depth, valid, 0) * h
    raw = np.stack([-gx, -gy, np.ones_like(depth)], axis=-1)
    return raw / np.linalg.norm(raw, axis=-1, keepdims=True)


@dataclass
class FrameFeatures:
    """Per-patch features for one frame, as column blocks."""

    rgb_mean: np.ndarray  # (N, 3)
    centroid_xy: np.ndarray  # (N, 2)
    z: np.ndarray  # (N,)
    normal: np.ndarray  # (N, 3)
    implicit: np.ndarray | None = None  # (N, M)
    all_invalid: np.ndarray | None = None  # (N,) patches with no valid depth

    @property
    def patch_count(self) -> int:
        return self.rgb_mean.shape[0]

    @property
    def implicit_dim(self) -> int:
        return 0 if self.implicit is None else self.implicit.shape[1]

    def matrix(self, blocks=("rgb", "xyz", "normals")) -> np.ndarray:
        """Stack the selected feature blocks into an (N, D) matrix."""
        cols = []
        explicit = np.concatenate(
            [self.rgb_mean, self.centroid_xy, self.z[:, None], self.normal], axis=1
        )
        for b in blocks:
            if b == "implicit":
                if self.implicit is None:
                    raise ValueError("implicit features requested but not loaded")
                cols.append(self.implicit)
            else:
                cols.append(explicit[:, _BLOCK_SLICES[b]])
        return np.concatenate(cols, axis=1)


def extract_features(
    frame: RgbdFrame,
    spx: SuperpixelMap,
    sidecar: np.ndarray | None = None,
    normals: np.ndarray | None = None,
) -> FrameFeatures:
    """Average color, centroid, depth and normal at the centroid, per patch."""
    if spx.shape != frame.shape:
        raise ValueError(f"map shape {spx.shape} != frame shape {frame.shape}")
    n = spx.patch_count
    flat = spx.labels.ravel()
    areas = spx.areas.astype(np.float64)
    h, w = frame.shape

    rgb_mean = np.stack(
        [np.bincount(flat, weights=frame.rgb[:, :, c].ravel(), minlength=n) / areas for c in range(3)],
        axis=1,
    )
    cx = spx.centroids[:, 1] / max(w - 1, 1)
    cy = spx.centroids[:, 0] / max(h - 1, 1)

    if normals is None:
        normals = compute_normals(frame.depth, frame.valid_mask)

    # z and normal are read at the valid pixel nearest the centroid; patches
    # with no valid depth get z=0, normal=(0,0,1) and are flagged
    z = np.zeros(n)
    nrm = np.zeros((n, 3))
    nrm[:, 2] = 1.0
    all_invalid = np.zeros(n, dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w]
    for pid in range(n):
        r0, c0, r1, c1 = spx.bboxes[pid]
        sel = spx.labels[r0:r1, c0:c1] == pid
        vsel = sel & frame.valid_mask[r0:r1, c0:c1]
        if not vsel.any():
            all_invalid[pid] = True
            continue
        py = yy[r0:r1, c0:c1][vsel]
        px = xx[r0:r1, c0:c1][vsel]
        d2 = (py - spx.centroids[pid, 0]) ** 2 + (px - spx.centroids[pid, 1]) ** 2
        j = int(np.argmin(d2))
        z[pid] = frame.depth[py[j], px[j]]
        nrm[pid] = normals[py[j], px[j]]

    implicit = None
    if sidecar is not None:
        sidecar = np.asarray(sidecar, dtype=np.float32)
        if sidecar.shape[0] != n:
            raise SidecarError(
                f"sidecar covers {sidecar.shape[0]} patches, map has {n}"
            )
        implicit = sidecar

    return FrameFeatures(
        rgb_mean=rgb_mean,
        centroid_xy=np.stack([cx, cy], axis=1),
        z=z,
        normal=nrm,
        implicit=implicit,
        all_invalid=all_invalid,
    )


@dataclass
class PatchGraph:
    """Patches as vertices, 4-adjacent patch pairs as undirected edges."""

    features: FrameFeatures
    edges: np.ndarray  # (E, 2) int, each row (i, j) with i < j
    gt_labels: np.ndarray | None = None  # (E,) 1 positive / 0 negative
    probabilities: np.ndarray | None = None  # (E,) predicted merge probability
    gt_instance: np.ndarray | None = None  # (N,) majority instance id per patch
    positive_fraction: float | None = None
    frame_id: str = ""

    @property
    def patch_count(self) -> int:
        return self.features.patch_count

    @property
    def edge_count(self) -> int:
        return self.edges.shape[0]


def build_graph(spx: SuperpixelMap, features: FrameFeatures, frame_id: str = "") -> PatchGraph:
    """Edge set = all unordered pairs of patches adjacent under 4-connectivity."""
    if features.patch_count != spx.patch_count:
        raise ValueError(
            f"feature count {features.patch_count} != patch count {spx.patch_count}"
        )
    lab = spx.labels
    a = np.concatenate([lab[:-1, :].ravel(), lab[:, :-1].ravel()])
    b = np.concatenate([lab[1:, :].ravel(), lab[:, 1:].ravel()])
    m = a != b
    lo = np.minimum(a[m], b[m]).astype(np.int64)
    hi = np.maximum(a[m], b[m]).astype(np.int64)
    edges = np.unique(np.stack([lo, hi], axis=1), axis=0)
    return PatchGraph(features=features, edges=edges.astype(np.int32), frame_id=frame_id)


def label_edges_from_gt(graph: PatchGraph, spx: SuperpixelMap, instance_gt: np.ndarray) -> PatchGraph:
    """Label every edge positive iff both endpoints share the same majority
    ground-truth instance (ties broken toward the smaller id; background 0
    is a label of its own, so background patches merge with each other)."""
    if instance_gt.shape != spx.shape:
        raise ValueError("instance map shape mismatch")
    n = spx.patch_count
    inst = instance_gt.astype(np.int64)
    n_inst = int(inst.max()) + 1
    counts = np.bincount(
        spx.labels.ravel().astype(np.int64) * n_inst + inst.ravel(),
        minlength=n * n_inst,
    ).reshape(n, n_inst)
    majority = counts.argmax(axis=1).astype(np.int32)  # argmax -> smallest id on ties

    gt = (majority[graph.edges[:, 0]] == majority[graph.edges[:, 1]]).astype(np.int8)
    graph.gt_instance = majority
    graph.gt_labels = gt
    graph.positive_fraction = float(gt.mean()) if gt.size else 0.0
    return graph


@dataclass
class EdgeSample:
    features: np.ndarray
    label: int


@dataclass
class EdgePools:
    """Pooled edge feature pairs from a graph corpus, split by gt label."""

    positive: np.ndarray  # (P, 2*D) concatenated endpoint features
    negative: np.ndarray  # (Q, 2*D)

    @property
    def total(self) -> int:
        return self.positive.shape[0] + self.negative.shape[0]

    @property
    def natural_positive_fraction(self) -> float:
        return self.positive.shape[0] / max(self.total, 1)


def build_edge_pools(graphs, blocks=("rgb", "xyz", "normals")) -> EdgePools:
    pos, neg = [], []
    for g in graphs:
        if g.gt_labels is None:
            raise ValueError(f"graph {g.frame_id!r} has no ground-truth edge labels")
        feats = g.features.matrix(blocks)
        pair = np.concatenate([feats[g.edges[:, 0]], feats[g.edges[:, 1]]], axis=1)
        mask = g.gt_labels.astype(bool)
        pos.append(pair[mask])
        neg.append(pair[~mask])
    positive = np.concatenate(pos, axis=0) if pos else np.empty((0, 0))
    negative = np.concatenate(neg, axis=0) if neg else np.empty((0, 0))
    return EdgePools(positive=positive.astype(np.float32), negative=negative.astype(np.float32))


def _swap_halves(x: np.ndarray, mask: np.ndarray) -> None:
    d = x.shape[1] // 2
    x[mask] = np.concatenate([x[mask][:, d:], x[mask][:, :d]], axis=1)


def sample_batch(
    pools: EdgePools,
    target_positive_fraction: float | None,
    batch_size: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """One rebalanced batch: floor(batch*p) positives, the rest negatives,
    drawn uniformly with replacement; half the pairs are randomly swapped.

    target_positive_fraction None draws from the unmodified (natural) pool.
    """
    if target_positive_fraction is None:
        n_pos = pools.positive.shape[0]
        if pools.total == 0:
            raise ValueError("edge pool is empty")
        idx = rng.integers(0, pools.total, size=batch_size)
        pos_mask = idx < n_pos
        dim = pools.positive.shape[1] if n_pos else pools.negative.shape[1]
        x = np.empty((batch_size, dim), dtype=np.float32)
        x[pos_mask] = pools.positive[idx[pos_mask]]
        x[~pos_mask] = pools.negative[idx[~pos_mask] - n_pos]
        y = pos_mask.astype(np.float32)
    else:
        if not 0.0 < target_positive_fraction < 1.0:
            raise ValueError("target_positive_fraction must be in (0, 1)")
        if pools.positive.shape[0] == 0 or pools.negative.shape[0] == 0:
            raise ValueError("both edge pools must be non-empty for rebalanced sampling")
        n_pos = int(batch_size * target_positive_fraction)
        n_neg = batch_size - n_pos
        pi = rng.integers(0, pools.positive.shape[0], size=n_pos)
        ni = rng.integers(0, pools.negative.shape[0], size=n_neg)
        x = np.concatenate([pools.positive[pi], pools.negative[ni]], axis=0).copy()
        y = np.concatenate([np.ones(n_pos), np.zeros(n_neg)]).astype(np.float32)
    _swap_halves(x, rng.random(batch_size) < 0.5)
    return x, y


def sample_pairs(
    graphs,
    target_positive_fraction: float | None,
    batch_size: int,
    rng: np.random.Generator,
    num_batches: int = 1,
    blocks=("rgb", "xyz", "normals"),
) -> list[EdgeSample]:
    """Emit num_batches rebalanced batches as a flat EdgeSample sequence."""
    pools = build_edge_pools(graphs, blocks)
    out = []
    for _ in range(num_batches):
        x, y = sample_batch(pools, target_positive_fraction, batch_size, rng)
        out.extend(EdgeSample(features=x[i], label=int(y[i])) for i in range(batch_size))
    return out


# --- implicit-feature sidecar (.spxf) ---------------------------------------
#
# Little-endian binary: magic "SPXF", u32 version=1, u32 N (patch count),
# u32 M (feature dim), N records of (u32 patch_id, M × f32), u32 CRC32 of
# all preceding bytes.

SIDECAR_MAGIC = b"SPXF"
SIDECAR_VERSION = 1


def write_sidecar(path, features: np.ndarray) -> None:
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 2:
        raise ValueError("sidecar features must be (N, M)")
    n, m = features.shape
    buf = bytearray()
    buf += SIDECAR_MAGIC
    buf += struct.pack("<III", SIDECAR_VERSION, n, m)
    for pid in range(n):
        buf += struct.pack("<I", pid)
        buf += features[pid].tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(buf))


def read_sidecar(path) -> np.ndarray:
    """Read and validate a .spxf file; returns features ordered by patch id."""
    data = Path(path).read_bytes()
    if len(data) < 20:
        raise SidecarError(f"{path}: truncated header")
    if data[:4] != SIDECAR_MAGIC:
        raise SidecarError(f"{path}: bad magic {data[:4]!r}")
    version, n, m = struct.unpack("<III", data[4:16])
    if version != SIDECAR_VERSION:
        raise SidecarError(f"{path}: unsupported version {version}")
    expected = 16 + n * (4 + 4 * m) + 4
    if len(data) != expected:
        raise SidecarError(f"{path}: size {len(data)} != expected {expected}")
    (crc_stored,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc_stored:
        raise SidecarError(f"{path}: CRC mismatch")
    out = np.full((n, m), np.nan, dtype=np.float32)
    seen = np.zeros(n, dtype=bool)
    off = 16
    rec = 4 + 4 * m
    for _ in range(n):
        (pid,) = struct.unpack_from("<I", data, off)
        if pid >= n:
            raise SidecarError(f"{path}: patch id {pid} out of range (N={n})")
        if seen[pid]:
            raise SidecarError(f"{path}: duplicate patch id {pid}")
        seen[pid] = True
        out[pid] = np.frombuffer(data, dtype="<f4", count=m, offset=off + 4)
        off += rec
    return out
