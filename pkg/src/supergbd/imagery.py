"""Core RGB-D frame types, dataset directory IO, and dataset filtering.

Dataset layout (one directory per dataset):

    <id>_rgb.png     8-bit, 3-channel color
    <id>_depth.png   16-bit single channel, millimeters, 0 = invalid
    <id>_inst.png    16-bit single channel instance ids, 0 = background
    <id>_class.json  {"<instance id>": "<class name>", ...}
    <id>.spxf        optional per-patch implicit-feature sidecar
    manifest.json    frame ids and split tags
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

DEFAULT_MAX_DEPTH_MM = 10000


class DatasetError(RuntimeError):
    """A dataset file is missing, unreadable, or inconsistent."""


@dataclass
class RgbdFrame:
    """One registered RGB image + depth map + optional instance ground truth.

    rgb is H×W×3 in [0, 1]; depth is H×W normalized to [0, 1] with 0 marking
    invalid readings; valid_mask is True exactly where the raw sensor value
    was nonzero. instance_gt uses 0 for background and ids >= 1 for objects.
    """

    rgb: np.ndarray
    depth: np.ndarray
    valid_mask: np.ndarray
    instance_gt: np.ndarray | None = None
    class_of_instance: dict[int, str] | None = None
    frame_id: str = ""

    def __post_init__(self):
        rgb = np.asarray(self.rgb, dtype=np.float64)
        depth = np.asarray(self.depth, dtype=np.float64)
        valid = np.asarray(self.valid_mask, dtype=bool)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ValueError(f"rgb must be H×W×3, got {rgb.shape}")
        if depth.shape != rgb.shape[:2] or valid.shape != rgb.shape[:2]:
            raise ValueError(
                f"channel shapes differ: rgb {rgb.shape[:2]}, depth {depth.shape}, "
                f"valid {valid.shape} (frame {self.frame_id!r})"
            )
        if not np.isfinite(rgb).all() or not np.isfinite(depth).all():
            raise ValueError(f"non-finite values in frame {self.frame_id!r}")
        if depth.min() < 0.0 or depth.max() > 1.0:
            raise ValueError(f"depth outside [0,1] in frame {self.frame_id!r}")
        if rgb.min() < 0.0 or rgb.max() > 1.0:
            raise ValueError(f"rgb outside [0,1] in frame {self.frame_id!r}")
        if self.instance_gt is not None:
            inst = np.asarray(self.instance_gt)
            if inst.shape != depth.shape:
                raise ValueError(
                    f"instance_gt shape {inst.shape} != {depth.shape} (frame {self.frame_id!r})"
                )
            if inst.min() < 0:
                raise ValueError("instance ids must be >= 0")
            self.instance_gt = inst.astype(np.int32)
            if self.class_of_instance is not None:
                ids = np.unique(inst)
                missing = [int(i) for i in ids if i >= 1 and int(i) not in self.class_of_instance]
                if missing:
                    raise ValueError(
                        f"instance ids {missing} lack class entries (frame {self.frame_id!r})"
                    )
        self.rgb = rgb
        self.depth = depth
        self.valid_mask = valid

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass
class FrameEntry:
    """Per-frame file paths; optional files are None when absent."""

    frame_id: str
    rgb_path: Path
    depth_path: Path
    inst_path: Path | None = None
    class_path: Path | None = None
    sidecar_path: Path | None = None


@dataclass
class DatasetIndex:
    root: Path
    entries: dict[str, FrameEntry] = field(default_factory=dict)
    split_tags: dict[str, str] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)

    @property
    def frame_ids(self) -> list[str]:
        return list(self.entries)

    def with_frames(self, frame_ids) -> "DatasetIndex":
        keep = [fid for fid in self.entries if fid in set(frame_ids)]
        return DatasetIndex(
            root=self.root,
            entries={fid: self.entries[fid] for fid in keep},
            split_tags={fid: self.split_tags[fid] for fid in keep if fid in self.split_tags},
            meta=dict(self.meta),
        )


def _entry_for(root: Path, frame_id: str) -> FrameEntry:
    rgb = root / f"{frame_id}_rgb.png"
    depth = root / f"{frame_id}_depth.png"
    inst = root / f"{frame_id}_inst.png"
    cls = root / f"{frame_id}_class.json"
    spxf = root / f"{frame_id}.spxf"
    return FrameEntry(
        frame_id=frame_id,
        rgb_path=rgb,
        depth_path=depth,
        inst_path=inst if inst.exists() else None,
        class_path=cls if cls.exists() else None,
        sidecar_path=spxf if spxf.exists() else None,
    )


def scan_dataset(root) -> DatasetIndex:
    """Build a DatasetIndex from manifest.json, or by globbing *_rgb.png."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    manifest_path = root / "manifest.json"
    meta = {}
    split_tags = {}
    if manifest_path.exists():
        meta = json.loads(manifest_path.read_text())
        frame_ids = [f["id"] for f in meta.get("frames", [])]
        split_tags = {f["id"]: f.get("split", "") for f in meta.get("frames", [])}
    else:
        frame_ids = sorted(p.name[: -len("_rgb.png")] for p in root.glob("*_rgb.png"))
    index = DatasetIndex(root=root, meta=meta, split_tags=split_tags)
    for fid in frame_ids:
        entry = _entry_for(root, fid)
        if not entry.rgb_path.exists() or not entry.depth_path.exists():
            raise DatasetError(f"frame {fid!r}: missing rgb or depth file under {root}")
        index.entries[fid] = entry
    return index


def write_manifest(index: DatasetIndex) -> Path:
    """Write manifest.json for the index (deterministic ordering)."""
    frames = []
    for fid in index.frame_ids:
        rec = {"id": fid}
        if fid in index.split_tags:
            rec["split"] = index.split_tags[fid]
        frames.append(rec)
    doc = dict(index.meta)
    doc["frames"] = frames
    path = index.root / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _read_png(path: Path, frame_id: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img)
    except FileNotFoundError:
        raise DatasetError(f"frame {frame_id!r}: missing file {path}")
    except Exception as exc:
        raise DatasetError(f"frame {frame_id!r}: cannot parse {path}: {exc}")


def load_frame(index: DatasetIndex, frame_id: str, max_depth_mm: int = DEFAULT_MAX_DEPTH_MM) -> RgbdFrame:
    """Load a frame from disk and normalize it.

    Raw 16-bit depth in millimeters is divided by max_depth_mm and clamped
    to [0, 1]; the sentinel value 0 yields valid_mask False and depth 0.
    """
    if frame_id not in index.entries:
        raise DatasetError(f"frame {frame_id!r} not in index for {index.root}")
    entry = index.entries[frame_id]

    rgb_raw = _read_png(entry.rgb_path, frame_id)
    if rgb_raw.ndim != 3 or rgb_raw.shape[2] < 3:
        raise DatasetError(f"frame {frame_id!r}: {entry.rgb_path} is not 3-channel")
    rgb = rgb_raw[:, :, :3].astype(np.float64) / 255.0

    depth_raw = _read_png(entry.depth_path, frame_id).astype(np.int64)
    if depth_raw.ndim != 2:
        raise DatasetError(f"frame {frame_id!r}: {entry.depth_path} is not single-channel")
    if depth_raw.shape != rgb.shape[:2]:
        raise DatasetError(
            f"frame {frame_id!r}: depth {depth_raw.shape} != rgb {rgb.shape[:2]}"
        )
    valid = depth_raw > 0
    depth = np.clip(depth_raw.astype(np.float64) / float(max_depth_mm), 0.0, 1.0)
    depth[~valid] = 0.0

    instance_gt = None
    class_of_instance = None
    if entry.inst_path is not None:
        inst = _read_png(entry.inst_path, frame_id)
        if inst.shape != rgb.shape[:2]:
            raise DatasetError(
                f"frame {frame_id!r}: instance map {inst.shape} != rgb {rgb.shape[:2]}"
            )
        instance_gt = inst.astype(np.int32)
    if entry.class_path is not None:
        raw = json.loads(entry.class_path.read_text())
        class_of_instance = {int(k): str(v) for k, v in raw.items()}

    return RgbdFrame(
        rgb=rgb,
        depth=depth,
        valid_mask=valid,
        instance_gt=instance_gt,
        class_of_instance=class_of_instance,
        frame_id=frame_id,
    )


def save_frame(frame: RgbdFrame, root, max_depth_mm: int = DEFAULT_MAX_DEPTH_MM) -> FrameEntry:
    """Write a frame in the dataset layout (8-bit RGB, 16-bit depth/instances)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    fid = frame.frame_id
    if not fid:
        raise ValueError("frame_id must be set before saving")

    rgb8 = np.rint(frame.rgb * 255.0).astype(np.uint8)
    Image.fromarray(rgb8, mode="RGB").save(root / f"{fid}_rgb.png")

    depth_mm = np.rint(frame.depth * float(max_depth_mm))
    depth_mm[~frame.valid_mask] = 0
    if depth_mm.max() > 65535:
        raise ValueError(f"depth exceeds 16-bit range at max_depth_mm={max_depth_mm}")
    Image.fromarray(depth_mm.astype(np.uint16)).save(root / f"{fid}_depth.png")

    if frame.instance_gt is not None:
        if frame.instance_gt.max() > 65535:
            raise ValueError(
                f"frame {fid!r}: {frame.instance_gt.max()} exceeds 16-bit instance id space"
            )
        Image.fromarray(frame.instance_gt.astype(np.uint16)).save(root / f"{fid}_inst.png")
    if frame.class_of_instance is not None:
        doc = {str(k): v for k, v in sorted(frame.class_of_instance.items())}
        (root / f"{fid}_class.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return _entry_for(root, fid)


def filter_dataset(index: DatasetIndex, min_objects: int = 2, min_object_pixels: int = 50) -> DatasetIndex:
    """Keep only frames with >= min_objects instances of >= min_object_pixels each.

    Frames without instance ground truth are skipped and recorded on the
    returned index (``skipped``), never silently retained.
    """
    kept = []
    skipped = []
    for fid in index.frame_ids:
        entry = index.entries[fid]
        if entry.inst_path is None:
            log.warning("filter_dataset: frame %r lacks ground truth, skipping", fid)
            skipped.append(fid)
            continue
        inst = _read_png(entry.inst_path, fid)
        counts = np.bincount(inst.ravel().astype(np.int64))
        big = int(np.sum(counts[1:] >= min_object_pixels)) if counts.size > 1 else 0
        if big >= min_objects:
            kept.append(fid)
    result = index.with_frames(kept)
    result.skipped = skipped
    return result
