import itertools

import numpy as np
import pytest

from supergbd.metrics import (
    MatchResult,
    boundary_prf,
    default_boundary_radius,
    evaluate_frame,
    harmonic_mean,
    hungarian_match,
    overlap_prf,
    pairwise_f_matrix,
    suppress_background_predictions,
    zero_shot_aggregate,
)


# --- pairwise F ------------------------------------------------------------------


def test_identical_maps_identity_structure():
    m = np.array([[0, 1, 1], [2, 2, 0]])
    f = pairwise_f_matrix(m, m)
    assert f.shape == (2, 2)
    assert np.allclose(np.diag(f), 1.0)
    assert f[0, 1] == 0 and f[1, 0] == 0


def test_disjoint_objects_zero_matrix():
    gt = np.zeros((4, 4), int)
    gt[:2, :2] = 1
    pred = np.zeros((4, 4), int)
    pred[2:, 2:] = 1
    assert (pairwise_f_matrix(pred, gt) == 0).all()


def test_hand_counted_f():
    gt = np.zeros((4, 4), int)
    gt[0, 0:3] = 1  # 3 px
    pred = np.zeros((4, 4), int)
    pred[0, 0:2] = 7  # 2 px, 2 overlap
    f = pairwise_f_matrix(pred, gt)
    assert np.isclose(f[0, 0], 2 * 2 / (2 + 3))


# --- hungarian ---------------------------------------------------------------------


def test_dominant_diagonal():
    match = hungarian_match(np.array([[0.9, 0.1], [0.2, 0.8]]))
    assert {(g, s) for g, s, _ in match.pairs} == {(0, 0), (1, 1)}


def test_anti_diagonal():
    match = hungarian_match(np.array([[0.1, 0.9], [0.8, 0.2]]))
    assert {(g, s) for g, s, _ in match.pairs} == {(0, 1), (1, 0)}


def test_zero_matches_discarded():
    match = hungarian_match(np.array([[0.0, 0.0], [0.0, 0.5]]))
    assert len(match.pairs) == 1
    assert match.unmatched_gt == [0]
    assert len(match.unmatched_pred) == 1


def _brute_force_max_total(f):
    g, s = f.shape
    best = 0.0
    if g == 0 or s == 0:
        return 0.0
    if g <= s:
        for cols in itertools.permutations(range(s), g):
            best = max(best, sum(f[i, cols[i]] for i in range(g)))
    else:
        for rows in itertools.permutations(range(g), s):
            best = max(best, sum(f[rows[j], j] for j in range(s)))
    return best


def test_hungarian_optimal_on_random_rectangles(rng):
    for _ in range(60):
        g, s = rng.integers(1, 7, 2)
        f = rng.random((g, s)) * (rng.random((g, s)) > 0.2)
        match = hungarian_match(f)
        total = sum(v for _, _, v in match.pairs)
        assert abs(total - _brute_force_max_total(f)) < 1e-9


# --- overlap -------------------------------------------------------------------------


def test_perfect_prediction():
    gt = np.array([[1, 1, 0], [2, 2, 0]])
    match = hungarian_match(pairwise_f_matrix(gt, gt))
    assert overlap_prf(gt, gt, match) == (100.0, 100.0, 100.0)


def test_empty_prediction_convention():
    gt = np.array([[1, 1], [0, 0]])
    pred = np.zeros((2, 2), int)
    match = hungarian_match(pairwise_f_matrix(pred, gt))
    p, r, f = overlap_prf(pred, gt, match)
    assert (p, r, f) == (0.0, 0.0, 0.0)


def test_hand_counted_overlap():
    gt = np.zeros((4, 4), int)
    gt[0, 0:3] = 1
    pred = np.zeros((4, 4), int)
    pred[0, 0:2] = 7
    match = hungarian_match(pairwise_f_matrix(pred, gt))
    p, r, f = overlap_prf(pred, gt, match)
    assert p == 100.0
    assert np.isclose(r, 100 * 2 / 3)
    assert np.isclose(f, 80.0)


# --- boundary -----------------------------------------------------------------------


def test_single_pixel_boundary_is_itself():
    gt = np.zeros((5, 5), int)
    gt[2, 2] = 1
    match = hungarian_match(pairwise_f_matrix(gt, gt))
    assert boundary_prf(gt, gt, match, 0) == (100.0, 100.0, 100.0)


def test_identity_boundary_any_radius():
    gt = np.zeros((8, 8), int)
    gt[1:5, 2:6] = 1
    gt[6:8, 0:3] = 2
    match = hungarian_match(pairwise_f_matrix(gt, gt))
    for radius in (0, 1, 2, 5):
        assert boundary_prf(gt, gt, match, radius) == (100.0, 100.0, 100.0)


def test_shifted_square_dilation():
    gt = np.zeros((12, 12), int)
    gt[3:8, 3:8] = 1
    pred = np.zeros((12, 12), int)
    pred[4:9, 3:8] = 1  # shifted one row down
    match = hungarian_match(pairwise_f_matrix(pred, gt))
    p2, r2, f2 = boundary_prf(pred, gt, match, 2)
    assert (p2, r2, f2) == (100.0, 100.0, 100.0)

    p0, r0, f0 = boundary_prf(pred, gt, match, 0)
    assert f0 < 100.0
    # exhaustive pixel-count oracle at radius 0
    def bd(mask):
        out = set()
        h, w = mask.shape
        for y in range(h):
            for x in range(w):
                if not mask[y, x]:
                    continue
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if not (0 <= ny < h and 0 <= nx < w) or not mask[ny, nx]:
                        out.add((y, x))
                        break
        return out

    gtb, prb = bd(gt == 1), bd(pred == 1)
    expected_p = 100 * len(prb & gtb) / len(prb)
    expected_r = 100 * len(gtb & prb) / len(gtb)
    assert np.isclose(p0, expected_p) and np.isclose(r0, expected_r)


def test_default_radius_scales_with_height():
    assert default_boundary_radius(480) == 2
    assert default_boundary_radius(960) == 4
    assert default_boundary_radius(100) == 1


# --- acceptance-style oracle comparison ------------------------------------------------


def _random_label_map(rng, h, w, n_obj):
    m = np.zeros((h, w), np.int64)
    for oid in range(1, n_obj + 1):
        y, x = rng.integers(0, h - 2), rng.integers(0, w - 2)
        hh, ww = rng.integers(1, h - y + 1), rng.integers(1, w - x + 1)
        m[y : y + hh, x : x + ww] = oid
    return m


def _oracle_prf(pred, gt):
    """Exhaustive-permutation matching + per-pixel counting, returning all
    P/R/F triples achievable by a max-total-F assignment."""
    gt_ids = [int(v) for v in np.unique(gt) if v > 0]
    pred_ids = [int(v) for v in np.unique(pred) if v > 0]
    inter = {
        (g, s): int(np.sum((gt == g) & (pred == s))) for g in gt_ids for s in pred_ids
    }
    fpair = {
        (g, s): 2 * inter[(g, s)] / (np.sum(pred == s) + np.sum(gt == g))
        for g in gt_ids
        for s in pred_ids
    }
    ssum = int(np.sum(pred > 0))
    gsum = int(np.sum(gt > 0))
    best_total = 0.0
    results = set()
    k = min(len(gt_ids), len(pred_ids))
    assignments = [[]]
    if k:
        assignments = []
        if len(gt_ids) <= len(pred_ids):
            for cols in itertools.permutations(pred_ids, len(gt_ids)):
                assignments.append(list(zip(gt_ids, cols)))
        else:
            for rows in itertools.permutations(gt_ids, len(pred_ids)):
                assignments.append(list(zip(rows, pred_ids)))
    for pairs in assignments:
        total = sum(fpair[(g, s)] for g, s in pairs)
        if total > best_total + 1e-12:
            best_total = total
            results = set()
        if abs(total - best_total) <= 1e-12:
            i_tot = sum(inter[(g, s)] for g, s in pairs if fpair[(g, s)] > 0)
            p = 100 * i_tot / ssum if ssum else 0.0
            r = 100 * i_tot / gsum if gsum else 0.0
            f = 2 * p * r / (p + r) if p + r > 0 else 0.0
            results.add((round(p, 9), round(r, 9), round(f, 9)))
    return best_total, results


def test_overlap_matches_permutation_oracle(rng):
    for _ in range(80):
        gt = _random_label_map(rng, 12, 12, int(rng.integers(0, 5)))
        pred = _random_label_map(rng, 12, 12, int(rng.integers(0, 5)))
        fmat = pairwise_f_matrix(pred, gt)
        match = hungarian_match(fmat)
        total = sum(v for _, _, v in match.pairs)
        best_total, results = _oracle_prf(pred, gt)
        assert abs(total - best_total) < 1e-9
        p, r, f = overlap_prf(pred, gt, match)
        assert (round(p, 9), round(r, 9), round(f, 9)) in results


# --- aggregation ------------------------------------------------------------------------


def test_hm_arithmetic_reference_values():
    for (s, u), expected in [
        ((79.23, 67.53), 72.92),
        ((73.05, 68.53), 70.72),
        ((76.31, 76.66), 76.48),
    ]:
        assert abs(harmonic_mean(s, u) - expected) <= 0.01


def test_hm_bounds(rng):
    for _ in range(200):
        s, u = rng.random(2) * 100
        hm = harmonic_mean(s, u)
        assert hm <= (s + u) / 2 + 1e-9
        assert hm <= 2 * min(s, u) + 1e-9


def _two_class_frame():
    gt = np.zeros((8, 8), int)
    gt[1:4, 1:4] = 1  # class a (seen)
    gt[5:8, 5:8] = 2  # class b (unseen)
    return gt


def test_zero_shot_aggregate_splits():
    gt = _two_class_frame()
    fe = evaluate_frame(gt, gt, "f", class_of_instance={1: "a", 2: "b"}, suppress_bg=False)
    report = zero_shot_aggregate([fe], seen_classes=["a"], unseen_classes=["b"])
    assert report.seen.overlap_f == 100.0
    assert report.unseen.overlap_f == 100.0
    assert report.hm.overlap_f == 100.0
    assert report.overall.n_gt == 2


def test_unknown_class_errors():
    gt = _two_class_frame()
    fe = evaluate_frame(gt, gt, "f", class_of_instance={1: "a", 2: "weird"}, suppress_bg=False)
    with pytest.raises(ValueError, match="weird"):
        zero_shot_aggregate([fe], seen_classes=["a"], unseen_classes=["b"])


def test_relabeling_invariance(rng):
    gt = _random_label_map(rng, 10, 10, 3)
    pred = _random_label_map(rng, 10, 10, 3)
    fe1 = evaluate_frame(pred, gt, suppress_bg=False)
    r1 = zero_shot_aggregate([fe1]).overall
    perm = np.array([0, 7, 5, 9, 2])[: int(max(gt.max(), pred.max())) + 1]
    fe2 = evaluate_frame(perm[pred], perm[gt], suppress_bg=False)
    r2 = zero_shot_aggregate([fe2]).overall
    assert np.isclose(r1.overlap_f, r2.overlap_f)
    assert np.isclose(r1.boundary_f, r2.boundary_f)


def test_background_suppression():
    gt = np.zeros((8, 8), int)
    gt[0:4, 0:4] = 1
    pred = np.zeros((8, 8), int)
    pred[0:4, 0:4] = 3  # real object
    pred[4:, :] = 9  # table segment, majority background
    cleaned = suppress_background_predictions(pred, gt)
    assert set(np.unique(cleaned)) == {0, 3}
    fe = evaluate_frame(pred, gt, suppress_bg=True)
    rep = zero_shot_aggregate([fe])
    assert rep.overall.overlap_f == 100.0


def test_report_serialization():
    gt = _two_class_frame()
    fe = evaluate_frame(gt, gt, "f", class_of_instance={1: "a", 2: "b"}, suppress_bg=False)
    report = zero_shot_aggregate([fe], ["a"], ["b"])
    doc = report.as_dict()
    assert doc["hm"]["overlap"]["F"] == 100.0
    table = report.to_table()
    assert "Seen" in table and "Unseen" in table
    csv = report.to_csv()
    assert csv.splitlines()[0].startswith("frame_id,")
    assert len(csv.splitlines()) == 2


def test_per_image_aggregation():
    gt = _two_class_frame()
    fe = evaluate_frame(gt, gt, "f", suppress_bg=False)
    report = zero_shot_aggregate([fe, fe], aggregation="per_image")
    assert report.overall.overlap_f == 100.0
    assert report.aggregation == "per_image"
