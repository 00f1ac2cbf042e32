"""Instance segmentation evaluation: Hungarian-matched overlap and boundary
precision/recall/F, aggregated over all objects and by seen/unseen class
splits with their harmonic mean.

All reported values are percentages in [0, 100]. Precision/recall follow the
pooled-over-objects sums

    P = sum_i |s_i ∩ g(s_i)| / sum_i |s_i|
    R = sum_i |s_i ∩ g(s_i)| / sum_j |g_j|

where s_i are predicted objects, g(s_i) the Hungarian-matched ground-truth
partner, and g_j the ground-truth objects; F = 2PR/(P+R). Boundary metrics
use the same sums restricted to (dilated) object boundary pixels. Background
id 0 is excluded from both object sets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment


def harmonic_mean(seen: float, unseen: float) -> float:
    if seen + unseen <= 0:
        return 0.0
    return 2.0 * seen * unseen / (seen + unseen)


def default_boundary_radius(image_height: int) -> int:
    """Dilation radius 2 px at 480-row resolution, scaled by image height."""
    return max(1, round(2.0 * image_height / 480.0))


def _object_ids(m: np.ndarray) -> np.ndarray:
    ids = np.unique(m)
    return ids[ids > 0]


def _intersection_table(pred: np.ndarray, gt: np.ndarray):
    """Pixel intersection counts between gt and pred objects.

    Returns (gt_ids, pred_ids, inter[G,S], gt_sizes[G], pred_sizes[S]).
    """
    if pred.shape != gt.shape:
        raise ValueError(f"map shapes differ: {pred.shape} vs {gt.shape}")
    gt_ids = _object_ids(gt)
    pred_ids = _object_ids(pred)
    gi = np.full(int(gt.max()) + 1, -1, dtype=np.int64)
    gi[gt_ids] = np.arange(len(gt_ids))
    si = np.full(int(pred.max()) + 1, -1, dtype=np.int64)
    si[pred_ids] = np.arange(len(pred_ids))
    gmask = gt > 0
    smask = pred > 0
    both = gmask & smask
    code = gi[gt[both]] * max(len(pred_ids), 1) + si[pred[both]]
    inter = np.bincount(code, minlength=len(gt_ids) * max(len(pred_ids), 1)).reshape(
        len(gt_ids), max(len(pred_ids), 1)
    )[:, : len(pred_ids)]
    gt_sizes = np.array([np.sum(gt == v) for v in gt_ids], dtype=np.int64)
    pred_sizes = np.array([np.sum(pred == v) for v in pred_ids], dtype=np.int64)
    return gt_ids, pred_ids, inter, gt_sizes, pred_sizes


def pairwise_f_matrix(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """(G, S) matrix of F-scores 2|s∩g| / (|s|+|g|) between object masks."""
    gt_ids, pred_ids, inter, gsz, ssz = _intersection_table(pred, gt)
    if len(gt_ids) == 0 or len(pred_ids) == 0:
        return np.zeros((len(gt_ids), len(pred_ids)))
    return 2.0 * inter / (ssz[None, :] + gsz[:, None])


@dataclass
class MatchResult:
    """One-to-one gt/pred assignment maximizing total pairwise F."""

    pairs: list  # (gt_index, pred_index, f) with f > 0
    unmatched_gt: list
    unmatched_pred: list

    def pred_partner(self) -> dict:
        return {si: gi for gi, si, _ in self.pairs}

    def gt_partner(self) -> dict:
        return {gi: si for gi, si, _ in self.pairs}


def hungarian_match(f_matrix: np.ndarray) -> MatchResult:
    """Maximum-total-F assignment; zero-F matches are discarded as unmatched."""
    f = np.asarray(f_matrix, dtype=np.float64)
    if f.size and (not np.isfinite(f).all() or f.min() < 0):
        raise ValueError("pairwise matrix must be finite and non-negative")
    g, s = f.shape
    pairs = []
    matched_g, matched_s = set(), set()
    if g and s:
        rows, cols = linear_sum_assignment(f, maximize=True)
        for r, c in zip(rows, cols):
            if f[r, c] > 0.0:
                pairs.append((int(r), int(c), float(f[r, c])))
                matched_g.add(int(r))
                matched_s.add(int(c))
    return MatchResult(
        pairs=pairs,
        unmatched_gt=[i for i in range(g) if i not in matched_g],
        unmatched_pred=[i for i in range(s) if i not in matched_s],
    )


def _prf(p_num: float, p_den: float, r_num: float, r_den: float):
    p = 100.0 * p_num / p_den if p_den > 0 else 0.0
    r = 100.0 * r_num / r_den if r_den > 0 else 0.0
    f = 2.0 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def overlap_prf(pred: np.ndarray, gt: np.ndarray, match: MatchResult):
    """Pooled overlap P, R, F as percentages."""
    _, _, inter, gsz, ssz = _intersection_table(pred, gt)
    i_total = sum(inter[gi, si] for gi, si, _ in match.pairs)
    return _prf(i_total, ssz.sum(), i_total, gsz.sum())


def _boundary(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one 4-neighbor outside the mask (image
    border counts as outside)."""
    padded = np.pad(mask, 1, constant_values=False)
    inner = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return mask & ~inner


def _disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (yy * yy + xx * xx) <= r * r


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return mask
    return ndimage.binary_dilation(mask, structure=_disk(radius))


def boundary_prf(pred: np.ndarray, gt: np.ndarray, match: MatchResult, dilation_radius: int = 2):
    """Overlap-style sums restricted to dilated object boundary pixels."""
    gt_ids, pred_ids, _, _, _ = _intersection_table(pred, gt)
    gb = {i: _boundary(gt == v) for i, v in enumerate(gt_ids)}
    sb = {i: _boundary(pred == v) for i, v in enumerate(pred_ids)}
    p_num = r_num = 0
    for gi, si, _ in match.pairs:
        p_num += int((sb[si] & _dilate(gb[gi], dilation_radius)).sum())
        r_num += int((gb[gi] & _dilate(sb[si], dilation_radius)).sum())
    p_den = sum(int(b.sum()) for b in sb.values())
    r_den = sum(int(b.sum()) for b in gb.values())
    return _prf(p_num, p_den, r_num, r_den)


def suppress_background_predictions(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Zero out predicted segments whose pixel-majority ground truth is
    background. The merger segments tables and floors too; evaluation follows
    the object-level convention and drops those segments from the prediction
    side before matching."""
    pred_ids = _object_ids(pred)
    if len(pred_ids) == 0:
        return pred
    si = np.zeros(int(pred.max()) + 1, dtype=np.int64)
    si[pred_ids] = np.arange(len(pred_ids))
    n_inst = int(gt.max()) + 1
    pmask = pred > 0
    code = si[pred[pmask]] * n_inst + gt[pmask]
    counts = np.bincount(code, minlength=len(pred_ids) * n_inst).reshape(len(pred_ids), n_inst)
    majority_bg = counts.argmax(axis=1) == 0
    drop = pred_ids[majority_bg]
    if len(drop) == 0:
        return pred
    out = pred.copy()
    out[np.isin(pred, drop)] = 0
    return out


@dataclass
class ObjectRecord:
    object_id: int
    size: int
    boundary_size: int
    matched: bool
    inter: int = 0  # pixel intersection with the matched partner
    boundary_inter: int = 0  # dilated-boundary intersection with the partner
    best_overlap_gt: Optional[int] = None  # gt id with maximum overlap (preds only)
    class_name: Optional[str] = None  # gt objects only


@dataclass
class FrameEval:
    """Per-object evaluation tables for one frame."""

    frame_id: str
    gt_objects: list
    pred_objects: list
    n_gt: int
    n_pred: int
    boundary_radius: int
    class_of_instance: Optional[dict] = None

    def overlap_prf(self):
        i_total = sum(o.inter for o in self.pred_objects)
        return _prf(
            i_total,
            sum(o.size for o in self.pred_objects),
            sum(o.inter for o in self.gt_objects),
            sum(o.size for o in self.gt_objects),
        )

    def boundary_prf(self):
        return _prf(
            sum(o.boundary_inter for o in self.pred_objects),
            sum(o.boundary_size for o in self.pred_objects),
            sum(o.boundary_inter for o in self.gt_objects),
            sum(o.boundary_size for o in self.gt_objects),
        )


def evaluate_frame(
    pred: np.ndarray,
    gt: np.ndarray,
    frame_id: str = "",
    class_of_instance: Optional[dict] = None,
    boundary_radius: Optional[int] = None,
    suppress_bg: bool = True,
) -> FrameEval:
    """Match one frame's prediction against ground truth and tabulate
    per-object pixel and boundary counts for later aggregation."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if boundary_radius is None:
        boundary_radius = default_boundary_radius(gt.shape[0])
    if suppress_bg:
        pred = suppress_background_predictions(pred, gt)

    gt_ids, pred_ids, inter, gsz, ssz = _intersection_table(pred, gt)
    f = (
        2.0 * inter / (ssz[None, :] + gsz[:, None])
        if len(gt_ids) and len(pred_ids)
        else np.zeros((len(gt_ids), len(pred_ids)))
    )
    match = hungarian_match(f)

    gb = {i: _boundary(gt == v) for i, v in enumerate(gt_ids)}
    sb = {i: _boundary(pred == v) for i, v in enumerate(pred_ids)}

    gt_records = []
    for i, v in enumerate(gt_ids):
        cls = None
        if class_of_instance is not None:
            cls = class_of_instance.get(int(v))
            if cls is None:
                raise ValueError(f"frame {frame_id!r}: gt object {int(v)} has no class entry")
        gt_records.append(
            ObjectRecord(
                object_id=int(v),
                size=int(gsz[i]),
                boundary_size=int(gb[i].sum()),
                matched=False,
                class_name=cls,
            )
        )
    pred_records = [
        ObjectRecord(
            object_id=int(v),
            size=int(ssz[i]),
            boundary_size=int(sb[i].sum()),
            matched=False,
            best_overlap_gt=(
                int(gt_ids[np.argmax(inter[:, i])]) if len(gt_ids) and inter[:, i].max() > 0 else None
            ),
        )
        for i, v in enumerate(pred_ids)
    ]
    for gi, si, _ in match.pairs:
        px = int(inter[gi, si])
        bd_p = int((sb[si] & _dilate(gb[gi], boundary_radius)).sum())
        bd_r = int((gb[gi] & _dilate(sb[si], boundary_radius)).sum())
        gt_records[gi].matched = True
        gt_records[gi].inter = px
        gt_records[gi].boundary_inter = bd_r
        pred_records[si].matched = True
        pred_records[si].inter = px
        pred_records[si].boundary_inter = bd_p
        pred_records[si].best_overlap_gt = int(gt_ids[gi])

    return FrameEval(
        frame_id=frame_id,
        gt_objects=gt_records,
        pred_objects=pred_records,
        n_gt=len(gt_ids),
        n_pred=len(pred_ids),
        boundary_radius=boundary_radius,
        class_of_instance=class_of_instance,
    )


@dataclass
class SplitScores:
    overlap_p: float = 0.0
    overlap_r: float = 0.0
    overlap_f: float = 0.0
    boundary_p: float = 0.0
    boundary_r: float = 0.0
    boundary_f: float = 0.0
    n_gt: int = 0
    n_pred: int = 0

    def as_dict(self) -> dict:
        return {
            "overlap": {"P": self.overlap_p, "R": self.overlap_r, "F": self.overlap_f},
            "boundary": {"P": self.boundary_p, "R": self.boundary_r, "F": self.boundary_f},
            "n_gt": self.n_gt,
            "n_pred": self.n_pred,
        }


class _Sums:
    __slots__ = ("op_n", "op_d", "or_n", "or_d", "bp_n", "bp_d", "br_n", "br_d", "n_gt", "n_pred")

    def __init__(self):
        for s in self.__slots__:
            setattr(self, s, 0)

    def scores(self) -> SplitScores:
        op, orr, of = _prf(self.op_n, self.op_d, self.or_n, self.or_d)
        bp, br, bf = _prf(self.bp_n, self.bp_d, self.br_n, self.br_d)
        return SplitScores(op, orr, of, bp, br, bf, self.n_gt, self.n_pred)


@dataclass
class SegEvalReport:
    overall: SplitScores
    seen: Optional[SplitScores]
    unseen: Optional[SplitScores]
    hm: Optional[SplitScores]
    per_image: list
    boundary_radius: int
    aggregation: str = "pooled"

    def as_dict(self) -> dict:
        doc = {
            "aggregation": self.aggregation,
            "boundary_radius": self.boundary_radius,
            "all": self.overall.as_dict(),
            "per_image": self.per_image,
        }
        for name in ("seen", "unseen", "hm"):
            value = getattr(self, name)
            if value is not None:
                doc[name] = value.as_dict()
        return doc

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        header = (
            f"{'Set':<8}{'Overlap P':>11}{'R':>8}{'F':>8}   "
            f"{'Boundary P':>11}{'R':>8}{'F':>8}"
        )
        lines = [header, "-" * len(header)]

        def row(name, s: SplitScores):
            return (
                f"{name:<8}{s.overlap_p:>11.2f}{s.overlap_r:>8.2f}{s.overlap_f:>8.2f}   "
                f"{s.boundary_p:>11.2f}{s.boundary_r:>8.2f}{s.boundary_f:>8.2f}"
            )

        if self.hm is not None:
            lines.append(row("HM", self.hm))
        if self.seen is not None:
            lines.append(row("Seen", self.seen))
        if self.unseen is not None:
            lines.append(row("Unseen", self.unseen))
        lines.append(row("All", self.overall))
        return "\n".join(lines)

    def to_csv(self) -> str:
        cols = [
            "frame_id",
            "n_gt",
            "n_pred",
            "overlap_p",
            "overlap_r",
            "overlap_f",
            "boundary_p",
            "boundary_r",
            "boundary_f",
        ]
        lines = [",".join(cols)]
        for rec in self.per_image:
            lines.append(",".join(str(rec[c]) for c in cols))
        return "\n".join(lines) + "\n"


def _accumulate(sums: _Sums, fe: FrameEval, gt_in, pred_split_of):
    for o in fe.gt_objects:
        if not gt_in(o):
            continue
        sums.n_gt += 1
        sums.or_n += o.inter
        sums.or_d += o.size
        sums.br_n += o.boundary_inter
        sums.br_d += o.boundary_size
    for o in fe.pred_objects:
        if not pred_split_of(o):
            continue
        sums.n_pred += 1
        sums.op_n += o.inter
        sums.op_d += o.size
        sums.bp_n += o.boundary_inter
        sums.bp_d += o.boundary_size


def zero_shot_aggregate(
    frame_evals,
    seen_classes=None,
    unseen_classes=None,
    aggregation: str = "pooled",
) -> SegEvalReport:
    """Aggregate frame evaluations into a report.

    With seen/unseen class sets, sums are accumulated separately per split: a
    matched predicted object inherits its partner's split, an unmatched one
    goes to the split of its maximum-overlap gt object, and predictions with
    no gt overlap count against both splits' precision denominators. The HM
    block is the harmonic mean of the seen and unseen value of every metric.
    """
    frame_evals = list(frame_evals)
    split_of_class = {}
    do_splits = seen_classes is not None and unseen_classes is not None
    if do_splits:
        seen_classes = set(seen_classes)
        unseen_classes = set(unseen_classes)
        overlap = seen_classes & unseen_classes
        if overlap:
            raise ValueError(f"classes in both splits: {sorted(overlap)}")
        split_of_class.update({c: "seen" for c in seen_classes})
        split_of_class.update({c: "unseen" for c in unseen_classes})

    def gt_split(fe: FrameEval, o: ObjectRecord) -> str:
        if o.class_name not in split_of_class:
            raise ValueError(
                f"frame {fe.frame_id!r}: class {o.class_name!r} is in neither split"
            )
        return split_of_class[o.class_name]

    gt_class_by_frame = []
    for fe in frame_evals:
        gt_class_by_frame.append({o.object_id: o for o in fe.gt_objects})

    sums = {"all": _Sums()}
    if do_splits:
        sums["seen"] = _Sums()
        sums["unseen"] = _Sums()

    per_image = []
    for idx, fe in enumerate(frame_evals):
        _accumulate(sums["all"], fe, lambda o: True, lambda o: True)
        if do_splits:
            gt_lookup = gt_class_by_frame[idx]

            def pred_in(split):
                def check(o: ObjectRecord) -> bool:
                    if o.best_overlap_gt is None:
                        return True  # no gt overlap: both precision denominators
                    return gt_split(fe, gt_lookup[o.best_overlap_gt]) == split

                return check

            for split in ("seen", "unseen"):
                _accumulate(
                    sums[split],
                    fe,
                    lambda o, s=split: gt_split(fe, o) == s,
                    pred_in(split),
                )
        op, orr, of = fe.overlap_prf()
        bp, br, bf = fe.boundary_prf()
        per_image.append(
            {
                "frame_id": fe.frame_id,
                "n_gt": fe.n_gt,
                "n_pred": fe.n_pred,
                "overlap_p": round(op, 4),
                "overlap_r": round(orr, 4),
                "overlap_f": round(of, 4),
                "boundary_p": round(bp, 4),
                "boundary_r": round(br, 4),
                "boundary_f": round(bf, 4),
            }
        )

    if aggregation == "pooled":
        scores = {k: v.scores() for k, v in sums.items()}
    elif aggregation == "per_image":
        scores = {"all": _mean_per_image(per_image)}
        if do_splits:
            raise ValueError("per_image aggregation does not provide class splits")
    else:
        raise ValueError(f"unknown aggregation {aggregation!r}")

    hm = None
    if do_splits:
        s, u = scores["seen"], scores["unseen"]
        hm = SplitScores(
            harmonic_mean(s.overlap_p, u.overlap_p),
            harmonic_mean(s.overlap_r, u.overlap_r),
            harmonic_mean(s.overlap_f, u.overlap_f),
            harmonic_mean(s.boundary_p, u.boundary_p),
            harmonic_mean(s.boundary_r, u.boundary_r),
            harmonic_mean(s.boundary_f, u.boundary_f),
            s.n_gt + u.n_gt,
            s.n_pred + u.n_pred,
        )

    return SegEvalReport(
        overall=scores["all"],
        seen=scores.get("seen"),
        unseen=scores.get("unseen"),
        hm=hm,
        per_image=per_image,
        boundary_radius=frame_evals[0].boundary_radius if frame_evals else 0,
        aggregation=aggregation,
    )


def _mean_per_image(per_image) -> SplitScores:
    if not per_image:
        return SplitScores()
    arr = {
        k: float(np.mean([r[k] for r in per_image]))
        for k in ("overlap_p", "overlap_r", "overlap_f", "boundary_p", "boundary_r", "boundary_f")
    }
    return SplitScores(
        arr["overlap_p"],
        arr["overlap_r"],
        arr["overlap_f"],
        arr["boundary_p"],
        arr["boundary_r"],
        arr["boundary_f"],
        sum(r["n_gt"] for r in per_image),
        sum(r["n_pred"] for r in per_image),
    )
