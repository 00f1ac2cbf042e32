"""Per-frame export: ViT class-token attention maps averaged over superpixels.

For each of the M attention heads of the selected block the map is bilinearly
upsampled to the frame resolution, averaged over every patch's pixel set, and
min-max normalized to [0,1] per frame (a constant head normalizes to all 0).
The result is written as a .spxf sidecar keyed by patch id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .sidecar import verify_sidecar, write_sidecar
from .vit import build_model, preprocess_image


class ExportError(RuntimeError):
    pass


@dataclass
class ExportJob:
    data_root: Path
    arch: str = "vit_small_16"
    weights: Path | None = None
    layer: int = -1  # attention block; -1 = final
    image_size: int = 224
    overwrite: bool = False
    seed: int = 0  # random-weight fallback init

    def __post_init__(self):
        self.data_root = Path(self.data_root)
        if self.weights is not None:
            self.weights = Path(self.weights)
            if not self.weights.exists():
                raise ExportError(f"weights file {self.weights} does not exist")

    def load_model(self):
        return build_model(self.arch, self.weights, seed=self.seed, image_size=self.image_size)


def load_patch_map(root, frame_id: str) -> np.ndarray:
    path = Path(root) / f"{frame_id}_spx.png"
    if not path.exists():
        raise ExportError(f"frame {frame_id!r}: no patch map {path.name}; preprocess the dataset first")
    labels = np.asarray(Image.open(path)).astype(np.int64)
    meta_path = Path(root) / f"{frame_id}_spx.json"
    if meta_path.exists():
        declared = json.loads(meta_path.read_text()).get("patch_count")
        if declared is not None and declared != labels.max() + 1:
            raise ExportError(
                f"frame {frame_id!r}: patch map has {labels.max() + 1} ids, metadata says {declared}"
            )
    return labels


def patch_means(attention: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Mean attention per patch; attention is (M, H, W), labels (H, W).

    Returns (N, M) with N = labels.max() + 1.
    """
    if attention.shape[1:] != labels.shape:
        raise ValueError(f"attention {attention.shape[1:]} vs labels {labels.shape}")
    n = int(labels.max()) + 1
    flat = labels.ravel()
    areas = np.bincount(flat, minlength=n).astype(np.float64)
    if (areas == 0).any():
        raise ValueError("patch ids are not contiguous")
    out = np.empty((n, attention.shape[0]), dtype=np.float64)
    for head in range(attention.shape[0]):
        out[:, head] = np.bincount(flat, weights=attention[head].ravel(), minlength=n) / areas
    return out


def minmax_per_head(values: np.ndarray) -> np.ndarray:
    """Min-max normalize each column to [0,1]; constant columns become 0.

    Columns whose span is within float rounding of zero count as constant,
    so averaging noise cannot blow up into full-range features.
    """
    lo = values.min(axis=0, keepdims=True)
    hi = values.max(axis=0, keepdims=True)
    span = hi - lo
    eps = 1e-9 * np.maximum(np.abs(hi), np.abs(lo)) + 1e-12
    keep = span > eps
    out = np.where(keep, (values - lo) / np.where(keep, span, 1.0), 0.0)
    return out.astype(np.float32)


def attention_for_frame(model, rgb01: np.ndarray, layer: int, image_size: int) -> np.ndarray:
    """(M, H, W) class-token attention upsampled to the frame resolution."""
    h, w = rgb01.shape[:2]
    with torch.no_grad():
        x = preprocess_image(rgb01, image_size)
        attn = model.cls_attention(x, layer=layer)
        up = F.interpolate(attn, size=(h, w), mode="bilinear", align_corners=False)
    return up[0].numpy()


def export_frame(job: ExportJob, frame_id: str, model=None) -> Path:
    """Compute and write the `.spxf` sidecar for one frame."""
    out_path = job.data_root / f"{frame_id}.spxf"
    if out_path.exists() and not job.overwrite:
        raise ExportError(f"{out_path} exists; pass overwrite to replace it")
    rgb_path = job.data_root / f"{frame_id}_rgb.png"
    if not rgb_path.exists():
        raise ExportError(f"frame {frame_id!r}: missing {rgb_path.name}")
    labels = load_patch_map(job.data_root, frame_id)
    rgb01 = np.asarray(Image.open(rgb_path))[:, :, :3].astype(np.float32) / 255.0

    if model is None:
        model = job.load_model()
    attention = attention_for_frame(model, rgb01, job.layer, job.image_size)
    features = minmax_per_head(patch_means(attention, labels))
    write_sidecar(out_path, features)

    report = verify_sidecar(out_path, labels)
    if not report.ok:
        raise ExportError(f"emitted sidecar failed validation: {report.errors}")
    return out_path


def export_dataset(job: ExportJob, frame_ids) -> list:
    model = job.load_model()
    return [export_frame(job, fid, model=model) for fid in frame_ids]
