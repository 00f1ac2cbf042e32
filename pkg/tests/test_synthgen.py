import json

import numpy as np
import pytest

from supergbd.synthgen import (
    DEFAULT_FAMILIES,
    SceneSpec,
    SynthError,
    _footprint_height,
    _render_scene,
    generate_benchmark,
    generate_scene,
)


def test_single_sphere_footprint():
    spec = SceneSpec(
        seed=0,
        object_count=(1, 1),
        seen_families=("sphere",),
        unseen_families=(),
        depth_noise_sigma=0.0,
        depth_dropout=0.0,
        camera_pitch=(0.0, 0.0),
    )
    frame = generate_scene(spec, "train", np.random.default_rng(5))
    inst = frame.instance_gt
    assert set(np.unique(inst)) == {0, 1}
    obj = inst == 1
    assert (frame.depth[obj] < frame.depth[~obj].min()).all()
    # disk footprint: object pixels form a filled circle (area vs bbox ratio)
    ys, xs = np.where(obj)
    height = ys.max() - ys.min() + 1
    width = xs.max() - xs.min() + 1
    assert abs(obj.sum() / (height * width) - np.pi / 4) < 0.08


def test_contested_pixels_go_to_nearer_shape(rng):
    spec = SceneSpec(
        seed=0, object_count=(2, 2), seen_families=("box",), unseen_families=(),
        camera_pitch=(0.0, 0.0), min_visible_px=20,
    )
    overlaps_checked = 0
    for s in range(60):
        r = np.random.default_rng(s)
        plane, depth, owner, placed, _ = _render_scene(spec, ["box"], r)
        if len(placed) < 2:
            continue
        h, w = depth.shape
        yy, xx = np.mgrid[0:h, 0:w].astype(float)
        cands = []
        for name, a, b, height, angle, cy, cx, _c in placed:
            u = np.cos(angle) * (xx - cx) + np.sin(angle) * (yy - cy)
            v = -np.sin(angle) * (xx - cx) + np.cos(angle) * (yy - cy)
            mask, hf = _footprint_height(name, u, v, a, b, height)
            cand = np.where(mask, plane - hf, np.inf)
            cands.append(cand)
        stack = np.stack(cands)
        contested = (np.isfinite(stack).sum(axis=0) >= 2)
        if contested.sum() == 0:
            continue
        overlaps_checked += 1
        winner = stack.argmin(axis=0) + 1
        sel = contested
        assert np.array_equal(owner[sel], winner[sel])
    assert overlaps_checked >= 3


def test_same_seed_bit_identical():
    spec = SceneSpec(seed=9, object_count=(3, 6))
    a = generate_scene(spec, "test", np.random.default_rng(4))
    b = generate_scene(spec, "test", np.random.default_rng(4))
    assert np.array_equal(a.rgb, b.rgb)
    assert np.array_equal(a.depth, b.depth)
    assert np.array_equal(a.instance_gt, b.instance_gt)
    assert a.class_of_instance == b.class_of_instance


def test_ground_truth_is_noise_free():
    noisy = SceneSpec(seed=3, object_count=(4, 6), depth_noise_sigma=0.01, depth_dropout=0.05)
    clean = SceneSpec(seed=3, object_count=(4, 6), depth_noise_sigma=0.0, depth_dropout=0.0)
    a = generate_scene(noisy, "train", np.random.default_rng(8))
    b = generate_scene(clean, "train", np.random.default_rng(8))
    assert np.array_equal(a.instance_gt, b.instance_gt)
    assert not np.array_equal(a.depth, b.depth)
    assert (~a.valid_mask).sum() > 0


def test_train_split_never_draws_unseen():
    spec = SceneSpec(seed=1, object_count=(5, 10))
    for s in range(10):
        frame = generate_scene(spec, "train", np.random.default_rng(s))
        assert set(frame.class_of_instance.values()) <= set(spec.seen_families)


def test_overcrowded_spec_errors():
    spec = SceneSpec(
        seed=0, object_count=(150, 150), image_size=(48, 48), placement_retries=2
    )
    with pytest.raises(SynthError, match="retries"):
        generate_scene(spec, "train", np.random.default_rng(0))


def test_invalid_spec():
    with pytest.raises(ValueError):
        SceneSpec(seen_families=("box",), unseen_families=("box",))
    with pytest.raises(ValueError):
        SceneSpec(object_count=(0, 3))
    with pytest.raises(ValueError):
        SceneSpec(seen_families=("pyramid",))


def test_benchmark_bookkeeping(tmp_path):
    spec = SceneSpec(seed=7, object_count=(3, 6), image_size=(96, 96))
    index = generate_benchmark(spec, n_train=8, n_test=4, out_root=tmp_path)
    assert len(index.frame_ids) == 12
    tags = list(index.split_tags.values())
    assert tags.count("train") == 8 and tags.count("test") == 4

    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert len(manifest["frames"]) == 12
    assert manifest["seen_families"] == sorted(spec.seen_families)

    unseen = set(spec.unseen_families)
    counts = []
    for fid in index.frame_ids:
        classes = set(json.loads((tmp_path / f"{fid}_class.json").read_text()).values())
        if index.split_tags[fid] == "train":
            assert classes <= set(spec.seen_families)
        else:
            assert classes & unseen
    benchmark = json.loads((tmp_path / "benchmark.json").read_text())
    assert set(benchmark["frame_seeds"]) == set(index.frame_ids)


def test_object_count_distribution(tmp_path):
    spec = SceneSpec(seed=5, object_count=(3, 6), image_size=(96, 96))
    seen_counts = set()
    for s in range(40):
        frame = generate_scene(spec, "train", np.random.default_rng(s))
        seen_counts.add(len(frame.class_of_instance))
    # culling can reduce counts, so check the configured span is reached
    assert max(seen_counts) == 6
    assert min(seen_counts) <= 3


def test_benchmark_determinism(tmp_path):
    spec = SceneSpec(seed=2, object_count=(3, 5), image_size=(80, 80))
    a_dir, b_dir = tmp_path / "a", tmp_path / "b"
    generate_benchmark(spec, 3, 2, a_dir)
    generate_benchmark(spec, 3, 2, b_dir)
    for path in sorted(a_dir.iterdir()):
        assert path.read_bytes() == (b_dir / path.name).read_bytes(), path.name
