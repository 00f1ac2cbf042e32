"""SLIC over-segmentation of RGB and depth, and combination of the two maps.

The combination step multiplies RGB patch ids by a decimal shift (1000 by
default) and adds depth patch ids, so every combined patch lies inside
exactly one patch of each input map. Hash combination produces sliver
patches; those below the absorption threshold are merged into their largest
4-adjacent neighbor.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage import measure
from skimage.color import rgb2lab

from .imagery import RgbdFrame
from .unionfind import UnionFind

# Depth lives in [0,1]; rescale to the CIELAB luminance range so the default
# compactness weighs depth steps comparably to color steps.
DEPTH_FEATURE_SCALE = 100.0


@dataclass
class SlicConfig:
    target_patch_count: int = 128
    compactness: float = 10.0
    iterations: int = 10
    min_patch_area: int = 16
    seed: int = 0
    algorithm: str = "slic"  # reserved; only SLIC is implemented

    def __post_init__(self):
        if self.target_patch_count < 1:
            raise ValueError("target_patch_count must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.min_patch_area < 1:
            raise ValueError("min_patch_area must be >= 1")
        if self.algorithm != "slic":
            raise ValueError(f"unsupported superpixel algorithm {self.algorithm!r}")


@dataclass
class SuperpixelMap:
    """Per-pixel patch ids in [0, N) with per-patch metadata."""

    labels: np.ndarray
    patch_count: int
    areas: np.ndarray
    centroids: np.ndarray  # (N, 2) mean (row, col) per patch
    bboxes: np.ndarray  # (N, 4) r0, c0, r1, c1 (exclusive)
    extras: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    @classmethod
    def from_labels(cls, labels: np.ndarray, extras: dict | None = None) -> "SuperpixelMap":
        labels = np.ascontiguousarray(labels, dtype=np.int32)
        n = int(labels.max()) + 1
        flat = labels.ravel()
        areas = np.bincount(flat, minlength=n)
        if (areas == 0).any():
            raise ValueError("patch ids are not contiguous")
        h, w = labels.shape
        yy, xx = np.mgrid[0:h, 0:w]
        cy = np.bincount(flat, weights=yy.ravel(), minlength=n) / areas
        cx = np.bincount(flat, weights=xx.ravel(), minlength=n) / areas
        slices = ndimage.find_objects(labels + 1)
        bboxes = np.zeros((n, 4), dtype=np.int32)
        for i, sl in enumerate(slices):
            bboxes[i] = (sl[0].start, sl[1].start, sl[0].stop, sl[1].stop)
        return cls(
            labels=labels,
            patch_count=n,
            areas=areas.astype(np.int64),
            centroids=np.stack([cy, cx], axis=1),
            bboxes=bboxes,
            extras=extras or {},
        )


def _relabel_by_scan_order(labels: np.ndarray) -> np.ndarray:
    """Map arbitrary non-negative ids to contiguous 0..N-1 in row-major first-pixel order."""
    flat = labels.ravel()
    uniq, first = np.unique(flat, return_index=True)
    order = np.argsort(first, kind="stable")
    remap = np.empty(int(uniq.max()) + 1, dtype=np.int32)
    remap[uniq[order]] = np.arange(len(uniq), dtype=np.int32)
    return remap[labels]


def _absorption_threshold(configured: int, mean_patch_area: float) -> int:
    # A fixed pixel threshold is only meaningful when patches are larger than
    # it; cap at a quarter of the nominal patch area so toy-scale maps
    # (singleton patches, 4x4 quadrants) are never collapsed.
    return min(configured, max(1, int(mean_patch_area) // 4))


def _absorb_and_relabel(labels: np.ndarray, threshold: int) -> tuple[np.ndarray, int]:
    """Split disconnected ids, absorb components below threshold into their
    largest 4-adjacent neighbor, and relabel contiguously.

    Returns the relabeled map and the number of absorbed components.
    """
    comp = measure.label(labels, connectivity=1, background=-1) - 1
    ncomp = int(comp.max()) + 1
    if ncomp == 1:
        return np.zeros_like(labels, dtype=np.int32), 0

    areas = np.bincount(comp.ravel(), minlength=ncomp).astype(np.int64)
    a = np.concatenate([comp[:-1, :].ravel(), comp[:, :-1].ravel()])
    b = np.concatenate([comp[1:, :].ravel(), comp[:, 1:].ravel()])
    m = a != b
    pairs = np.unique(
        np.stack([np.minimum(a[m], b[m]), np.maximum(a[m], b[m])], axis=1), axis=0
    )
    adj: list[set[int]] = [set() for _ in range(ncomp)]
    for u, v in pairs:
        adj[u].add(int(v))
        adj[v].add(int(u))

    uf = UnionFind(ncomp)
    area = list(areas)
    absorbed = 0
    heap = [(int(areas[i]), i) for i in range(ncomp) if areas[i] < threshold]
    heapq.heapify(heap)
    alive = ncomp
    while heap and alive > 1:
        ar, c = heapq.heappop(heap)
        if uf.find(c) != c or area[c] != ar or ar >= threshold:
            continue  # stale entry
        neighbors = {uf.find(n) for n in adj[c]} - {c}
        if not neighbors:
            continue
        # largest neighbor, ties toward the smaller id
        target = max(neighbors, key=lambda n: (area[n], -n))
        root = uf.union_into(c, target)
        other = c if root == target else target
        area[root] = area[target] + area[c]
        adj[root] = (adj[target] | adj[c]) - {target, c}
        adj[other] = set()
        absorbed += 1
        alive -= 1
        if area[root] < threshold:
            heapq.heappush(heap, (area[root], root))

    root_of = np.fromiter((uf.find(i) for i in range(ncomp)), dtype=np.int32, count=ncomp)
    return _relabel_by_scan_order(root_of[comp]), absorbed


def _gradient_magnitude(channels: np.ndarray) -> np.ndarray:
    gx = np.zeros(channels.shape[:2])
    gy = np.zeros(channels.shape[:2])
    d = channels.astype(np.float64)
    gx[:, 1:-1] = ((d[:, 2:] - d[:, :-2]) ** 2).sum(axis=-1)
    gy[1:-1, :] = ((d[2:, :] - d[:-2, :]) ** 2).sum(axis=-1)
    return gx + gy


def slic(channels: np.ndarray, config: SlicConfig) -> SuperpixelMap:
    """Localized k-means over feature + spatial coordinates.

    Seeds sit on a regular grid of step S = floor(sqrt(H*W/K)), perturbed to
    the lowest-gradient pixel in a 3x3 window. Pixels are assigned within
    2S-wide windows around each center using
    D = ||feature diff|| + (compactness / S) * ||spatial diff||,
    then connectivity is enforced and sliver patches absorbed.
    """
    channels = np.asarray(channels, dtype=np.float64)
    if channels.ndim == 2:
        channels = channels[:, :, None]
    if channels.ndim != 3:
        raise ValueError(f"channels must be H×W×C, got shape {channels.shape}")
    h, w, _ = channels.shape
    if h * w == 0:
        raise ValueError("empty image")
    k = config.target_patch_count
    if k > h * w:
        raise ValueError(f"target_patch_count {k} exceeds pixel count {h * w}")

    s = max(1, int(math.sqrt(h * w / k)))
    # per-axis seed counts so the grid holds ~K seeds at any aspect ratio
    n_rows = min(h, k, max(1, round(math.sqrt(k * h / w))))
    n_cols = min(w, max(1, round(k / n_rows)))
    ys = ((np.arange(n_rows) + 0.5) * h / n_rows).astype(np.int64)
    xs = ((np.arange(n_cols) + 0.5) * w / n_cols).astype(np.int64)
    seed_y, seed_x = np.meshgrid(ys, xs, indexing="ij")
    seed_y = seed_y.ravel()
    seed_x = seed_x.ravel()
    search_r = max(s, -(-h // n_rows), -(-w // n_cols))

    # perturb each seed to the lowest-gradient pixel in its 3x3 neighborhood;
    # ties keep the grid position so flat regions cannot collapse seeds
    grad = _gradient_magnitude(channels)
    for i in range(len(seed_y)):
        y0, y1 = max(0, seed_y[i] - 1), min(h, seed_y[i] + 2)
        x0, x1 = max(0, seed_x[i] - 1), min(w, seed_x[i] + 2)
        gwin = grad[y0:y1, x0:x1]
        if gwin.min() < grad[seed_y[i], seed_x[i]]:
            dy, dx = np.unravel_index(np.argmin(gwin), gwin.shape)
            seed_y[i], seed_x[i] = y0 + dy, x0 + dx

    n_centers = len(seed_y)
    centers_f = channels[seed_y, seed_x, :].copy()
    centers_s = np.stack([seed_y, seed_x], axis=1).astype(np.float64)
    ratio = config.compactness / s

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    labels = np.full((h, w), -1, dtype=np.int32)
    dists = np.empty((h, w), dtype=np.float64)

    for _ in range(config.iterations):
        labels.fill(-1)
        dists.fill(np.inf)
        for c in range(n_centers):
            cy, cx = centers_s[c]
            r0, r1 = max(0, int(cy) - search_r), min(h, int(cy) + search_r + 1)
            c0, c1 = max(0, int(cx) - search_r), min(w, int(cx) + search_r + 1)
            if r0 >= r1 or c0 >= c1:
                continue
            df = np.sqrt(((channels[r0:r1, c0:c1, :] - centers_f[c]) ** 2).sum(axis=-1))
            ds = np.hypot(yy[r0:r1, c0:c1] - cy, xx[r0:r1, c0:c1] - cx)
            d = df + ratio * ds
            win = dists[r0:r1, c0:c1]
            better = d < win
            win[better] = d[better]
            labels[r0:r1, c0:c1][better] = c

        if (labels < 0).any():
            # pixels outside every search window inherit the nearest assignment
            _, (iy, ix) = ndimage.distance_transform_edt(labels < 0, return_indices=True)
            labels = labels[iy, ix]

        flat = labels.ravel()
        cnt = np.bincount(flat, minlength=n_centers).astype(np.float64)
        nz = cnt > 0
        sy = np.bincount(flat, weights=yy.ravel(), minlength=n_centers)
        sx = np.bincount(flat, weights=xx.ravel(), minlength=n_centers)
        centers_s[nz, 0] = sy[nz] / cnt[nz]
        centers_s[nz, 1] = sx[nz] / cnt[nz]
        for ch in range(channels.shape[2]):
            sc = np.bincount(flat, weights=channels[:, :, ch].ravel(), minlength=n_centers)
            centers_f[nz, ch] = sc[nz] / cnt[nz]

    threshold = _absorption_threshold(config.min_patch_area, float(s * s))
    final, absorbed = _absorb_and_relabel(labels, threshold)
    return SuperpixelMap.from_labels(
        final,
        extras={"config": asdict(config), "grid_step": s, "absorbed": absorbed},
    )


def slic_rgb(frame: RgbdFrame, config: SlicConfig) -> SuperpixelMap:
    """SLIC on the color image in CIELAB (D65)."""
    lab = rgb2lab(frame.rgb)
    spx = slic(lab, config)
    spx.extras["modality"] = "rgb"
    return spx


def slic_depth(frame: RgbdFrame, config: SlicConfig) -> SuperpixelMap:
    """SLIC on normalized depth; invalid pixels participate with depth 0."""
    spx = slic(frame.depth[:, :, None] * DEPTH_FEATURE_SCALE, config)
    spx.extras["modality"] = "depth"
    return spx


def combine_maps(
    rgb_map: SuperpixelMap, depth_map: SuperpixelMap, min_patch_area: int = 16
) -> SuperpixelMap:
    """Fuse two patch maps into one that refines both.

    Per pixel the raw key is rgb_id * shift + depth_id with shift 1000,
    widened to the next power of ten if the depth map has 1000+ patches.
    Raw keys are relabeled contiguously, 4-connectivity is re-enforced, and
    sliver patches are absorbed. Pass min_patch_area=1 to inspect the
    pre-absorption refinement.
    """
    if rgb_map.shape != depth_map.shape:
        raise ValueError(f"map shapes differ: {rgb_map.shape} vs {depth_map.shape}")
    shift = 1000
    while depth_map.patch_count >= shift:
        shift *= 10
    raw = rgb_map.labels.astype(np.int64) * shift + depth_map.labels
    pre = _relabel_by_scan_order(raw)
    n_pre = int(pre.max()) + 1
    h, w = pre.shape
    threshold = _absorption_threshold(min_patch_area, h * w / n_pre)
    final, absorbed = _absorb_and_relabel(pre, threshold)
    return SuperpixelMap.from_labels(
        final,
        extras={
            "shift": shift,
            "raw_patch_count": n_pre,
            "absorbed": absorbed,
            "source_counts": [rgb_map.patch_count, depth_map.patch_count],
        },
    )


def save_superpixel_map(spx: SuperpixelMap, root, frame_id: str) -> None:
    """Write `<id>_spx.png` (16-bit ids) + `<id>_spx.json` metadata."""
    root = Path(root)
    if spx.patch_count > 65536:
        raise ValueError("patch count exceeds 16-bit id space")
    Image.fromarray(spx.labels.astype(np.uint16)).save(root / f"{frame_id}_spx.png")
    meta = {"patch_count": spx.patch_count}
    for key in ("shift", "config", "modality", "source_counts"):
        if key in spx.extras:
            meta[key] = spx.extras[key]
    (root / f"{frame_id}_spx.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n"
    )


def load_superpixel_map(root, frame_id: str) -> SuperpixelMap:
    root = Path(root)
    png = root / f"{frame_id}_spx.png"
    if not png.exists():
        raise FileNotFoundError(f"no superpixel map for frame {frame_id!r} under {root}")
    labels = np.asarray(Image.open(png)).astype(np.int32)
    extras = {}
    meta_path = root / f"{frame_id}_spx.json"
    if meta_path.exists():
        extras = json.loads(meta_path.read_text())
    return SuperpixelMap.from_labels(labels, extras=extras)
