"""Static visualization: boundary overlays and report figures."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image


def instance_colors(n: int) -> np.ndarray:
    """Deterministic, well-separated colors for n instance ids (id 0 unused)."""
    hues = (np.arange(n) * 0.61803398875) % 1.0
    cmap = plt.get_cmap("hsv")
    colors = cmap(hues)[:, :3]
    return (0.25 + 0.75 * colors).clip(0, 1)


def label_boundaries(labels: np.ndarray) -> np.ndarray:
    """Pixels whose 4-neighbor carries a different id."""
    b = np.zeros(labels.shape, dtype=bool)
    b[:-1, :] |= labels[:-1, :] != labels[1:, :]
    b[1:, :] |= labels[1:, :] != labels[:-1, :]
    b[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    b[:, 1:] |= labels[:, 1:] != labels[:, :-1]
    return b


def overlay_boundaries(rgb: np.ndarray, instance_map: np.ndarray) -> np.ndarray:
    """Instance boundaries in per-id colors over the RGB image; output has
    exactly the input dimensions."""
    out = rgb.copy()
    ids = np.unique(instance_map)
    ids = ids[ids > 0]
    colors = instance_colors(int(instance_map.max()) + 1)
    edges = label_boundaries(instance_map)
    for i in ids:
        sel = edges & (instance_map == i)
        out[sel] = colors[i - 1]
    return out


def label_image(labels: np.ndarray) -> np.ndarray:
    """Color every instance id; background stays dark."""
    colors = np.vstack([[[0.12, 0.12, 0.12]], instance_colors(max(int(labels.max()), 1))])
    return colors[labels]


def save_overlay(rgb: np.ndarray, instance_map: np.ndarray, path) -> None:
    img = (overlay_boundaries(rgb, instance_map) * 255).round().astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(path)


def save_panels(frame, prediction_map: np.ndarray, path, spx_labels=None) -> None:
    """One panel per input modality plus the prediction, as a single figure."""
    panels = [
        ("color + predicted boundaries", overlay_boundaries(frame.rgb, prediction_map)),
        ("depth", frame.depth),
        ("prediction", label_image(prediction_map)),
    ]
    if frame.instance_gt is not None:
        panels.append(("ground truth", label_image(frame.instance_gt)))
    if spx_labels is not None:
        panels.insert(2, ("superpixels", label_boundaries(spx_labels).astype(float)))
    fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 3.4))
    for ax, (title, img) in zip(np.atleast_1d(axes), panels):
        if img.ndim == 2:
            ax.imshow(img, cmap="viridis")
        else:
            ax.imshow(img)
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_report_figures(report, out_dir) -> list:
    """Bar chart of the headline metrics and a per-image F histogram."""
    out_dir = Path(out_dir)
    written = []

    groups = [("All", report.overall)]
    if report.seen is not None:
        groups = [("HM", report.hm), ("Seen", report.seen), ("Unseen", report.unseen), ("All", report.overall)]
    names = [g[0] for g in groups]
    metric_keys = [
        ("overlap_p", "Overlap P"),
        ("overlap_r", "Overlap R"),
        ("overlap_f", "Overlap F"),
        ("boundary_p", "Boundary P"),
        ("boundary_r", "Boundary R"),
        ("boundary_f", "Boundary F"),
    ]
    fig, ax = plt.subplots(figsize=(8.2, 3.6))
    width = 0.13
    xs = np.arange(len(names))
    for j, (key, label) in enumerate(metric_keys):
        vals = [getattr(s, key) for _, s in groups]
        ax.bar(xs + (j - 2.5) * width, vals, width, label=label)
    ax.set_xticks(xs)
    ax.set_xticklabels(names)
    ax.set_ylim(0, 105)
    ax.set_ylabel("%")
    ax.legend(fontsize=7, ncols=3)
    ax.set_title("segmentation scores")
    fig.tight_layout()
    p = out_dir / "report_scores.png"
    fig.savefig(p, dpi=110)
    plt.close(fig)
    written.append(p)

    if report.per_image:
        fig, ax = plt.subplots(figsize=(5.2, 3.4))
        ax.hist([r["overlap_f"] for r in report.per_image], bins=20, range=(0, 100), color="#3465a4")
        ax.set_xlabel("per-image overlap F")
        ax.set_ylabel("frames")
        fig.tight_layout()
        p = out_dir / "report_per_image.png"
        fig.savefig(p, dpi=110)
        plt.close(fig)
        written.append(p)
    return written
