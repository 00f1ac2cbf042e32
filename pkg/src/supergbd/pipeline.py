"""End-to-end orchestration: preprocess a frame into a patch graph, score
edges with the merger network, and derive the instance map via connected
components over the kept edges."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import metrics as _metrics
from .imagery import RgbdFrame
from .patch_graph import (
    FrameFeatures,
    PatchGraph,
    build_graph,
    compute_normals,
    extract_features,
    label_edges_from_gt,
    read_sidecar,
)
from .superpixel import SlicConfig, SuperpixelMap, combine_maps, slic_depth, slic_rgb
from .tinynet import MlpModel, forward
from .unionfind import UnionFind


@dataclass
class PipelineConfig:
    slic: SlicConfig = field(default_factory=SlicConfig)
    features: tuple = ("rgb", "xyz", "normals")
    merge_threshold: float = 0.5
    use_sidecar: bool = False
    min_patch_area: int = 16  # sliver absorption in the combined map
    suppress_largest_segment: bool = False

    def __post_init__(self):
        if not 0.0 < self.merge_threshold < 1.0:
            raise ValueError("merge_threshold must be in (0, 1)")
        if self.use_sidecar and "implicit" not in self.features:
            self.features = tuple(self.features) + ("implicit",)
        if "implicit" in self.features:
            self.use_sidecar = True


@dataclass
class FramePack:
    """A frame with its combined superpixel map and (optionally labeled) graph."""

    frame: RgbdFrame
    spx: SuperpixelMap
    graph: PatchGraph


def preprocess(
    frame: RgbdFrame,
    config: PipelineConfig,
    sidecar: np.ndarray | None = None,
    spx: SuperpixelMap | None = None,
) -> FramePack:
    """Dual SLIC, map combination, feature extraction, graph construction.

    A precomputed combined map may be passed to skip the over-segmentation
    (the cached `_spx.png` path). If the frame carries instance ground truth
    the graph edges are labeled from it.
    """
    if config.use_sidecar and sidecar is None:
        raise ValueError(
            f"frame {frame.frame_id!r}: implicit features enabled but no sidecar given"
        )
    if spx is None:
        rgb_map = slic_rgb(frame, config.slic)
        depth_map = slic_depth(frame, config.slic)
        spx = combine_maps(rgb_map, depth_map, config.min_patch_area)
        spx.extras["config"] = asdict(config.slic)
    feats = extract_features(frame, spx, sidecar=sidecar)
    graph = build_graph(spx, feats, frame_id=frame.frame_id)
    if frame.instance_gt is not None:
        label_edges_from_gt(graph, spx, frame.instance_gt)
    return FramePack(frame=frame, spx=spx, graph=graph)


def connected_components(patch_count: int, kept_edges) -> np.ndarray:
    """Union-find partition of patches; component ids are contiguous from 1
    in order of the smallest member patch id."""
    kept_edges = np.asarray(kept_edges, dtype=np.int64).reshape(-1, 2)
    if kept_edges.size and (kept_edges.min() < 0 or kept_edges.max() >= patch_count):
        raise ValueError("edge references a patch id out of range")
    uf = UnionFind(patch_count)
    for a, b in kept_edges:
        uf.union(int(a), int(b))
    roots = np.fromiter((uf.find(i) for i in range(patch_count)), dtype=np.int64, count=patch_count)
    # smallest member == first occurrence since we scan ids in order
    _, first = np.unique(roots, return_index=True)
    order = np.argsort(first, kind="stable")
    remap = np.empty(patch_count, dtype=np.int32)
    remap[np.unique(roots)[order]] = np.arange(1, len(order) + 1, dtype=np.int32)
    return remap[roots]


@dataclass
class InstancePrediction:
    instance_map: np.ndarray  # H×W int32, segments >= 1, 0 reserved
    segments: list  # patch-id list per segment, index = id - 1
    edge_probabilities: np.ndarray  # aligned with the graph's edge list
    threshold: float

    @property
    def segment_count(self) -> int:
        return len(self.segments)


def score_edges(graph: PatchGraph, model: MlpModel, blocks) -> np.ndarray:
    feats = graph.features.matrix(blocks)
    if graph.edge_count == 0:
        return np.zeros(0)
    x = np.concatenate(
        [feats[graph.edges[:, 0]], feats[graph.edges[:, 1]]], axis=1
    ).astype(np.float32)
    if x.shape[1] != model.input_dim:
        raise ValueError(
            f"feature dimension {x.shape[1]} does not match model input {model.input_dim}; "
            "check the feature-subset flags against the checkpoint manifest"
        )
    return forward(model, x, mode="eval")


def segment_pack(pack: FramePack, probs: np.ndarray, threshold: float) -> InstancePrediction:
    """Threshold edge probabilities, run connected components, paint pixels."""
    kept = pack.graph.edges[probs >= threshold] if probs.size else np.empty((0, 2), int)
    comp = connected_components(pack.graph.patch_count, kept)
    instance_map = comp[pack.spx.labels]
    segments = [[] for _ in range(int(comp.max()))]
    for pid, cid in enumerate(comp):
        segments[cid - 1].append(pid)
    return InstancePrediction(
        instance_map=instance_map.astype(np.int32),
        segments=segments,
        edge_probabilities=np.asarray(probs),
        threshold=threshold,
    )


def infer(
    frame: RgbdFrame,
    model: MlpModel,
    config: PipelineConfig,
    sidecar: np.ndarray | None = None,
    spx: SuperpixelMap | None = None,
) -> InstancePrediction:
    pack = preprocess(frame, config, sidecar=sidecar, spx=spx)
    probs = score_edges(pack.graph, model, config.features)
    pred = segment_pack(pack, probs, config.merge_threshold)
    if config.suppress_largest_segment and pred.segment_count > 1:
        areas = np.bincount(pred.instance_map.ravel())
        largest = int(np.argmax(areas[1:])) + 1
        pred.instance_map[pred.instance_map == largest] = 0
    return pred


def validation_overlap_f(model: MlpModel, packs, blocks, threshold: float) -> float:
    """Pooled overlap F over already-preprocessed frames; used during training."""
    evals = []
    for pack in packs:
        if pack.frame.instance_gt is None:
            continue
        probs = score_edges(pack.graph, model, blocks)
        pred = segment_pack(pack, probs, threshold)
        evals.append(
            _metrics.evaluate_frame(
                pred.instance_map, pack.frame.instance_gt, pack.frame.frame_id
            )
        )
    if not evals:
        return float("nan")
    return _metrics.zero_shot_aggregate(evals).overall.overlap_f


def majority_projection(spx: SuperpixelMap, instance_gt: np.ndarray) -> np.ndarray:
    """Paint every patch with its majority ground-truth instance id.

    This is the quantization ceiling: no merger can beat the map obtained by
    projecting ground truth onto the over-segmentation.
    """
    n = spx.patch_count
    inst = instance_gt.astype(np.int64)
    n_inst = int(inst.max()) + 1
    counts = np.bincount(
        spx.labels.ravel().astype(np.int64) * n_inst + inst.ravel(),
        minlength=n * n_inst,
    ).reshape(n, n_inst)
    majority = counts.argmax(axis=1).astype(np.int32)
    return majority[spx.labels]


def save_prediction(pred: InstancePrediction, root, frame_id: str, checkpoint_path=None) -> None:
    """Write `<id>_pred.png` (16-bit ids) and `<id>_pred.json`."""
    root = Path(root)
    if pred.instance_map.max() > 65535:
        raise ValueError("segment id exceeds 16-bit range")
    Image.fromarray(pred.instance_map.astype(np.uint16)).save(root / f"{frame_id}_pred.png")
    meta = {
        "threshold": pred.threshold,
        "segment_patch_counts": [len(s) for s in pred.segments],
        "checkpoint_sha256": (
            hashlib.sha256(Path(checkpoint_path).read_bytes()).hexdigest()
            if checkpoint_path
            else None
        ),
    }
    (root / f"{frame_id}_pred.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_prediction_map(root, frame_id: str) -> np.ndarray:
    path = Path(root) / f"{frame_id}_pred.png"
    if not path.exists():
        raise FileNotFoundError(f"no prediction for frame {frame_id!r} under {root}")
    return np.asarray(Image.open(path)).astype(np.int32)
