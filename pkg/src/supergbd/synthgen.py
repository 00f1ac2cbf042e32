"""Procedural cluttered-tabletop RGB-D scenes with instance ground truth.

Scenes are a tilted ground plane ("table") plus analytic heightfield shapes
rasterized with a painter's depth buffer: at every contested pixel the
nearest surface wins and owns the instance id. Ground truth is extracted
before sensor noise is applied, so instance maps are always noise-free.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imagery import DatasetIndex, RgbdFrame, save_frame, scan_dataset, write_manifest

SCENE_REFERENCE_SIZE = 256


class SynthError(RuntimeError):
    """Scene could not be generated within the configured retry budget."""


@dataclass
class ShapeFamily:
    name: str
    size_range: tuple  # characteristic half-extent in px at the 256 reference size
    height_range: tuple  # object height in normalized depth units
    aspect_range: tuple = (0.55, 1.0)

    def __post_init__(self):
        if self.size_range[0] >= self.size_range[1] or self.height_range[0] >= self.height_range[1]:
            raise ValueError(f"degenerate parameter range for family {self.name!r}")


DEFAULT_FAMILIES = {
    "box": ShapeFamily("box", (13, 26), (0.07, 0.20)),
    "cylinder": ShapeFamily("cylinder", (12, 24), (0.08, 0.22)),
    "sphere": ShapeFamily("sphere", (13, 26), (0.10, 0.24)),
    "lbracket": ShapeFamily("lbracket", (16, 30), (0.07, 0.18)),
    "ring": ShapeFamily("ring", (14, 26), (0.07, 0.18)),
    "wedge": ShapeFamily("wedge", (14, 28), (0.09, 0.22)),
    "cone": ShapeFamily("cone", (13, 26), (0.12, 0.26)),
    "tblock": ShapeFamily("tblock", (16, 30), (0.07, 0.18)),
}

# saturated, mutually distinct object colors; the table stays desaturated
PALETTE = np.array(
    [
        (0.85, 0.20, 0.18), (0.16, 0.45, 0.80), (0.22, 0.65, 0.25), (0.90, 0.65, 0.12),
        (0.55, 0.25, 0.70), (0.10, 0.65, 0.65), (0.88, 0.35, 0.55), (0.55, 0.55, 0.12),
        (0.30, 0.30, 0.85), (0.80, 0.45, 0.20), (0.25, 0.75, 0.50), (0.70, 0.15, 0.35),
        (0.45, 0.60, 0.85), (0.65, 0.50, 0.30), (0.35, 0.18, 0.55), (0.12, 0.50, 0.35),
        (0.92, 0.50, 0.40), (0.40, 0.70, 0.15), (0.20, 0.35, 0.60), (0.75, 0.70, 0.30),
    ]
)


@dataclass
class SceneSpec:
    seed: int = 0
    object_count: tuple = (5, 25)
    image_size: tuple = (256, 256)
    seen_families: tuple = ("box", "cylinder", "sphere", "wedge")
    unseen_families: tuple = ("ring", "lbracket")
    camera_pitch: tuple = (0.02, 0.14)  # depth slope across the image height
    depth_noise_sigma: float = 0.002
    depth_dropout: float = 0.01
    rgb_texture_amplitude: float = 0.035
    table_depth: tuple = (0.50, 0.62)
    min_visible_px: int = 40
    placement_retries: int = 50

    def __post_init__(self):
        if set(self.seen_families) & set(self.unseen_families):
            raise ValueError("seen and unseen families must be disjoint")
        if self.object_count[0] < 1 or self.object_count[0] > self.object_count[1]:
            raise ValueError("object count range must be 1 <= lo <= hi")
        unknown = (set(self.seen_families) | set(self.unseen_families)) - set(DEFAULT_FAMILIES)
        if unknown:
            raise ValueError(f"unknown shape families: {sorted(unknown)}")


def _footprint_height(name, u, v, a, b, height):
    """Returns (mask, heightfield) on the local rotated coordinates."""
    if name == "box":
        mask = (np.abs(u) <= a) & (np.abs(v) <= b)
        h = np.full(u.shape, height)
    elif name == "cylinder":
        mask = u * u + v * v <= a * a
        h = np.full(u.shape, height)
    elif name == "sphere":
        d2 = (u * u + v * v) / (a * a)
        mask = d2 <= 1.0
        h = height * np.sqrt(np.clip(1.0 - d2, 0.0, 1.0))
    elif name == "cone":
        d = np.sqrt(u * u + v * v) / a
        mask = d <= 1.0
        h = height * np.clip(1.0 - d, 0.0, 1.0)
    elif name == "ring":
        d2 = u * u + v * v
        mask = (d2 <= a * a) & (d2 >= (0.55 * a) ** 2)
        h = np.full(u.shape, height)
    elif name == "wedge":
        mask = (np.abs(u) <= a) & (np.abs(v) <= b)
        h = height * (0.2 + 0.8 * (u + a) / (2 * a))
    elif name == "lbracket":
        t = 0.42
        bar = (np.abs(u) <= a) & (v >= -b) & (v <= -b + t * 2 * b)
        leg = (u >= -a) & (u <= -a + t * 2 * a) & (np.abs(v) <= b)
        mask = bar | leg
        h = np.full(u.shape, height)
    elif name == "tblock":
        bar = (np.abs(u) <= a) & (v >= -b) & (v <= -b + 0.45 * 2 * b)
        stem = (np.abs(u) <= 0.28 * a) & (np.abs(v) <= b)
        mask = bar | stem
        h = np.full(u.shape, height)
    else:
        raise ValueError(f"unknown shape family {name!r}")
    return mask, h


def _render_scene(spec: SceneSpec, families: list, rng: np.random.Generator):
    """Depth-buffer rasterization pass.

    Returns (plane, depth, owner, placed, table_color) where placed holds
    (family, a, b, height, angle, cy, cx, color) per object in placement
    order and owner carries 1-based placement indices.
    """
    h_img, w_img = spec.image_size
    scale = min(h_img, w_img) / SCENE_REFERENCE_SIZE
    yy, xx = np.mgrid[0:h_img, 0:w_img].astype(np.float64)

    table_z = rng.uniform(*spec.table_depth)
    slope = rng.uniform(*spec.camera_pitch) * (1 if rng.random() < 0.5 else -1)
    table_color = np.array([0.52, 0.46, 0.40]) + rng.uniform(-0.06, 0.06, 3)
    plane = table_z + slope * (yy / h_img - 0.5)

    depth = plane.copy()
    owner = np.zeros((h_img, w_img), dtype=np.int32)
    n_obj = int(rng.integers(spec.object_count[0], spec.object_count[1] + 1))
    placed = []

    min_visible = max(8, int(spec.min_visible_px * scale * scale))
    for i in range(n_obj):
        for _attempt in range(spec.placement_retries):
            fam = DEFAULT_FAMILIES[families[rng.integers(len(families))]]
            a = rng.uniform(*fam.size_range) * scale
            b = a * rng.uniform(*fam.aspect_range)
            height = rng.uniform(*fam.height_range)
            angle = rng.uniform(0.0, np.pi)
            color = PALETTE[rng.integers(len(PALETTE))] + rng.uniform(-0.06, 0.06, 3)
            r = int(np.hypot(a, b)) + 2
            cy = rng.uniform(r, h_img - r)
            cx = rng.uniform(r, w_img - r)

            r0, r1 = max(0, int(cy) - r), min(h_img, int(cy) + r + 1)
            c0, c1 = max(0, int(cx) - r), min(w_img, int(cx) + r + 1)
            dy = yy[r0:r1, c0:c1] - cy
            dx = xx[r0:r1, c0:c1] - cx
            u = np.cos(angle) * dx + np.sin(angle) * dy
            v = -np.sin(angle) * dx + np.cos(angle) * dy
            mask, hf = _footprint_height(fam.name, u, v, a, b, height)
            if not mask.any():
                continue
            cand = plane[r0:r1, c0:c1] - hf
            closer = mask & (cand < depth[r0:r1, c0:c1])
            if closer.sum() < max(min_visible, 0.30 * mask.sum()):
                continue
            depth[r0:r1, c0:c1][closer] = cand[closer]
            owner[r0:r1, c0:c1][closer] = i + 1
            placed.append((fam.name, a, b, height, angle, cy, cx, np.clip(color, 0.0, 1.0)))
            break
        else:
            raise SynthError(
                f"could not place object {i + 1}/{n_obj} within "
                f"{spec.placement_retries} retries (spec too crowded)"
            )
    return plane, depth, owner, placed, table_color


def generate_scene(spec: SceneSpec, split: str, rng: np.random.Generator) -> RgbdFrame:
    """One scene; the train split draws only seen families, test draws from
    their union. Deterministic given the rng state."""
    if split == "train":
        families = list(spec.seen_families)
    elif split == "test":
        families = list(spec.seen_families) + list(spec.unseen_families)
    else:
        raise ValueError(f"split must be train or test, got {split!r}")
    if not families:
        raise ValueError("no families to draw from")

    h_img, w_img = spec.image_size
    scale = min(h_img, w_img) / SCENE_REFERENCE_SIZE
    min_visible = max(8, int(spec.min_visible_px * scale * scale))
    plane, depth, owner, placed, table_color = _render_scene(spec, families, rng)
    n_obj = len(placed)

    # keep only objects that stayed visible after later placements
    visible = np.bincount(owner.ravel(), minlength=n_obj + 1)
    keep = [i for i in range(1, n_obj + 1) if visible[i] >= min_visible]
    remap = np.zeros(n_obj + 1, dtype=np.int32)
    for new_id, old_id in enumerate(keep, start=1):
        remap[old_id] = new_id
    instance_gt = remap[owner]
    owner = instance_gt
    class_of_instance = {new_id: placed[old_id - 1][0] for new_id, old_id in enumerate(keep, 1)}

    # color pass: table texture, then per-object flat color with height shading
    rgb = np.empty((h_img, w_img, 3))
    grid = rng.normal(0.0, 1.0, (h_img // 16 + 2, w_img // 16 + 2))
    texture = ndimage.zoom(grid, (h_img / grid.shape[0], w_img / grid.shape[1]), order=1)
    rgb[:] = table_color[None, None, :] + spec.rgb_texture_amplitude * texture[:, :, None]
    speckle = rng.normal(0.0, spec.rgb_texture_amplitude, (h_img, w_img, 3))
    for new_id, old_id in enumerate(keep, start=1):
        fam_name, a, b, height, angle, cy, cx, color = placed[old_id - 1]
        sel = owner == new_id
        shade = 0.72 + 0.28 * np.clip((plane[sel] - depth[sel]) / height, 0.0, 1.0)
        rgb[sel] = color[None, :] * shade[:, None]
    rgb = np.clip(rgb + 0.5 * spec.rgb_texture_amplitude * speckle, 0.0, 1.0)

    # sensor noise, applied strictly after ground-truth extraction
    if spec.depth_noise_sigma > 0:
        depth = depth + rng.normal(0.0, spec.depth_noise_sigma, depth.shape)
    depth = np.clip(depth, 1e-4, 1.0)
    if spec.depth_dropout > 0:
        holes = rng.random(depth.shape) < spec.depth_dropout
        depth[holes] = 0.0
    valid = depth > 0.0

    return RgbdFrame(
        rgb=rgb,
        depth=depth,
        valid_mask=valid,
        instance_gt=instance_gt,
        class_of_instance=class_of_instance,
    )


def _frame_rng(seed: int, split_tag: int, index: int, attempt: int) -> np.random.Generator:
    return np.random.default_rng([seed, split_tag, index, attempt])


def generate_benchmark(spec: SceneSpec, n_train: int, n_test: int, out_root) -> DatasetIndex:
    """Write a full train/test dataset directory plus manifest and
    benchmark.json (spec, family partition, per-frame seeds).

    Test frames are resampled until they contain at least one unseen-family
    object, so the unseen split is never empty.
    """
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be >= 1")
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)

    frame_seeds = {}
    splits = {}
    for i in range(n_train):
        fid = f"train_{i:04d}"
        frame = generate_scene(spec, "train", _frame_rng(spec.seed, 0, i, 0))
        frame.frame_id = fid
        save_frame(frame, out_root)
        frame_seeds[fid] = [spec.seed, 0, i, 0]
        splits[fid] = "train"
    max_attempts = 25
    for i in range(n_test):
        fid = f"test_{i:04d}"
        for attempt in range(max_attempts):
            frame = generate_scene(spec, "test", _frame_rng(spec.seed, 1, i, attempt))
            if set(frame.class_of_instance.values()) & set(spec.unseen_families):
                break
        else:
            raise SynthError(f"test frame {i}: no unseen object after {max_attempts} resamples")
        frame.frame_id = fid
        save_frame(frame, out_root)
        frame_seeds[fid] = [spec.seed, 1, i, attempt]
        splits[fid] = "test"

    index = scan_dataset_after_write(out_root, splits, spec)
    (out_root / "benchmark.json").write_text(
        json.dumps(
            {
                "spec": asdict(spec),
                "n_train": n_train,
                "n_test": n_test,
                "frame_seeds": frame_seeds,
            },
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    return index


def scan_dataset_after_write(root: Path, splits: dict, spec: SceneSpec) -> DatasetIndex:
    index = scan_dataset(root)
    index.split_tags = dict(splits)
    index.meta["seen_families"] = sorted(spec.seen_families)
    index.meta["unseen_families"] = sorted(spec.unseen_families)
    index.entries = {
        fid: index.entries[fid] for fid in sorted(index.entries, key=lambda f: (splits.get(f, ""), f))
    }
    write_manifest(index)
    return index
