import numpy as np
from PIL import Image

from conftest import flat_frame, random_voronoi_labels
from supergbd import metrics
from supergbd.viz import label_boundaries, overlay_boundaries, save_overlay, save_panels, save_report_figures


def test_label_boundaries_simple():
    labels = np.zeros((4, 4), np.int32)
    labels[:, 2:] = 1
    b = label_boundaries(labels)
    assert b[:, 1].all() and b[:, 2].all()
    assert not b[:, 0].any() and not b[:, 3].any()


def test_overlay_keeps_dimensions(rng):
    rgb = rng.random((20, 30, 3))
    inst = random_voronoi_labels(rng, 20, 30, 4) + 1
    out = overlay_boundaries(rgb, inst)
    assert out.shape == rgb.shape
    assert out.min() >= 0 and out.max() <= 1
    # non-boundary pixels are untouched
    interior = ~label_boundaries(inst)
    assert np.array_equal(out[interior], rgb[interior])


def test_save_overlay_file_dimensions(tmp_path, rng):
    rgb = rng.random((24, 18, 3))
    inst = random_voronoi_labels(rng, 24, 18, 3) + 1
    save_overlay(rgb, inst, tmp_path / "o.png")
    img = np.asarray(Image.open(tmp_path / "o.png"))
    assert img.shape == (24, 18, 3)


def test_save_panels_and_report_figures(tmp_path, rng):
    frame = flat_frame(16, 16)
    frame.instance_gt = (random_voronoi_labels(rng, 16, 16, 2) + 1).astype(np.int32)
    pred = frame.instance_gt.copy()
    save_panels(frame, pred, tmp_path / "p.png", spx_labels=pred)
    assert (tmp_path / "p.png").exists()

    fe = metrics.evaluate_frame(pred, frame.instance_gt, "f", suppress_bg=False)
    report = metrics.zero_shot_aggregate([fe])
    written = save_report_figures(report, tmp_path)
    assert all(p.exists() for p in written)
