import numpy as np
import pytest

from conftest import flat_frame
from supergbd import metrics
from supergbd.imagery import RgbdFrame
from supergbd.pipeline import (
    PipelineConfig,
    connected_components,
    infer,
    majority_projection,
    preprocess,
    segment_pack,
)
from supergbd.superpixel import SlicConfig
from supergbd.synthgen import SceneSpec, generate_scene
from supergbd.tinynet import MlpModel


def _constant_model(dim, logit):
    return MlpModel(
        layer_dims=[dim, 1],
        weights=[np.zeros((dim, 1), np.float32)],
        biases=[np.full(1, logit, np.float32)],
    )


def _two_object_frame():
    h = w = 48
    rgb = np.full((h, w, 3), 0.45)
    depth = np.full((h, w), 0.6)
    inst = np.zeros((h, w), int)
    rgb[8:20, 8:20] = (0.9, 0.1, 0.1)
    depth[8:20, 8:20] = 0.45
    inst[8:20, 8:20] = 1
    rgb[28:42, 26:42] = (0.1, 0.2, 0.9)
    depth[28:42, 26:42] = 0.5
    inst[28:42, 26:42] = 2
    return RgbdFrame(
        rgb=rgb,
        depth=depth,
        valid_mask=np.ones((h, w), bool),
        instance_gt=inst,
        class_of_instance={1: "box", 2: "box"},
        frame_id="two",
    )


SMALL = PipelineConfig(slic=SlicConfig(target_patch_count=32))


# --- connected components ----------------------------------------------------------


def test_no_edges_gives_singletons():
    comp = connected_components(5, np.empty((0, 2), int))
    assert list(comp) == [1, 2, 3, 4, 5]


def test_full_graph_single_component():
    edges = [(i, i + 1) for i in range(7)]
    assert set(connected_components(8, edges)) == {1}


def test_chain_plus_isolated():
    comp = connected_components(4, [(0, 1), (1, 2)])
    assert list(comp) == [1, 1, 1, 2]


def _dfs_components(n, edges):
    adj = [[] for _ in range(n)]
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    comp = [-1] * n
    next_id = 1
    for start in range(n):
        if comp[start] != -1:
            continue
        stack = [start]
        while stack:
            v = stack.pop()
            if comp[v] != -1:
                continue
            comp[v] = next_id
            stack.extend(adj[v])
        next_id += 1
    return comp


def test_components_match_dfs_oracle(rng):
    for _ in range(50):
        n = int(rng.integers(2, 40))
        n_edges = int(rng.integers(0, n * 2))
        edges = rng.integers(0, n, (n_edges, 2))
        edges = edges[edges[:, 0] != edges[:, 1]]
        assert list(connected_components(n, edges)) == _dfs_components(n, edges)


def test_out_of_range_edge():
    with pytest.raises(ValueError):
        connected_components(3, [(0, 3)])


# --- preprocess ---------------------------------------------------------------------


def test_two_object_scene_has_three_gt_groups():
    pack = preprocess(_two_object_frame(), SMALL)
    assert pack.graph.gt_labels is not None
    assert len(np.unique(pack.graph.gt_instance)) >= 3


def test_flat_scene_all_edges_positive():
    frame = flat_frame(32, 32)
    frame.instance_gt = np.zeros((32, 32), np.int32)
    pack = preprocess(frame, SMALL)
    assert pack.graph.gt_labels.all()


def test_missing_sidecar_errors():
    config = PipelineConfig(slic=SlicConfig(target_patch_count=16), use_sidecar=True)
    with pytest.raises(ValueError, match="sidecar"):
        preprocess(flat_frame(16, 16), config)


def test_preprocess_deterministic():
    a = preprocess(_two_object_frame(), SMALL)
    b = preprocess(_two_object_frame(), SMALL)
    assert np.array_equal(a.spx.labels, b.spx.labels)
    assert np.array_equal(a.graph.edges, b.graph.edges)


# --- infer -------------------------------------------------------------------------


def test_merge_all_model_single_segment():
    frame = _two_object_frame()
    pred = infer(frame, _constant_model(18, 10.0), SMALL)
    assert pred.segment_count == 1
    assert (pred.instance_map == 1).all()


def test_merge_none_model_keeps_patches():
    frame = _two_object_frame()
    pack = preprocess(frame, SMALL)
    pred = infer(frame, _constant_model(18, -10.0), SMALL)
    assert pred.segment_count == pack.spx.patch_count
    assert np.array_equal(pred.instance_map, pack.spx.labels + 1)


def test_threshold_monotonicity(rng):
    pack = preprocess(_two_object_frame(), SMALL)
    probs = rng.random(pack.graph.edge_count)
    counts = [
        segment_pack(pack, probs, theta).segment_count
        for theta in (0.1, 0.3, 0.5, 0.7, 0.9)
    ]
    assert counts == sorted(counts)


def test_painting_correctness(rng):
    pack = preprocess(_two_object_frame(), SMALL)
    probs = rng.random(pack.graph.edge_count)
    pred = segment_pack(pack, probs, 0.5)
    kept = pack.graph.edges[probs >= 0.5]
    comp = connected_components(pack.graph.patch_count, kept)
    assert (pred.instance_map == comp[pack.spx.labels]).all()
    for cid, patches in enumerate(pred.segments, start=1):
        for pid in patches:
            assert comp[pid] == cid


def test_oracle_edges_reproduce_majority_projection():
    spec = SceneSpec(
        seed=11, object_count=(4, 7), image_size=(128, 128),
        depth_noise_sigma=0.0, depth_dropout=0.0,
    )
    frame = generate_scene(spec, "test", np.random.default_rng(3))
    frame.frame_id = "oracle"
    pack = preprocess(frame, PipelineConfig())
    pred = segment_pack(pack, pack.graph.gt_labels.astype(float), 0.5)

    projected = majority_projection(pack.spx, frame.instance_gt)
    # prediction partition == connected regions of the projected map
    from skimage import measure

    expected = measure.label(projected, connectivity=1, background=-1)
    got = pred.instance_map
    pairs = np.unique(np.stack([expected.ravel(), got.ravel()]), axis=1)
    assert pairs.shape[1] == len(np.unique(expected))
    assert pairs.shape[1] == len(np.unique(got))


def test_oracle_beats_95_on_clean_scene():
    spec = SceneSpec(seed=2, object_count=(5, 9), depth_noise_sigma=0.0, depth_dropout=0.0)
    evals = []
    for s in range(3):
        frame = generate_scene(spec, "test", np.random.default_rng(s))
        frame.frame_id = f"s{s}"
        pack = preprocess(frame, PipelineConfig())
        pred = segment_pack(pack, pack.graph.gt_labels.astype(float), 0.5)
        evals.append(metrics.evaluate_frame(pred.instance_map, frame.instance_gt, f"s{s}"))
    report = metrics.zero_shot_aggregate(evals)
    assert report.overall.overlap_f >= 95.0


def test_suppress_largest_segment_flag():
    frame = _two_object_frame()
    config = PipelineConfig(slic=SlicConfig(target_patch_count=32), suppress_largest_segment=True)
    pred = infer(frame, _constant_model(18, -10.0), config)
    assert (pred.instance_map == 0).sum() > 0


def test_feature_dim_mismatch_errors():
    frame = _two_object_frame()
    with pytest.raises(ValueError, match="feature dimension"):
        infer(frame, _constant_model(12, 0.0), SMALL)
