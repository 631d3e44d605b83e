"""Detection metrics: capped AP, AP-Fixed, bucketed AP and AR.

Matching follows the usual COCO rule: within one (class, image) pair,
detections are visited from the highest score down and each takes the
unmatched ground truth with the highest IoU at or above the threshold.
Precision is made monotone and sampled at evenly spaced recall levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numba
import numpy as np

from .core import (
    BUCKETS,
    COMMON,
    FREQUENT,
    RARE,
    Box,
    ClassTable,
    DetectionTuple,
    Detections,
    GroundTruthSet,
    ValidationError,
)

FP = 0
TP = 1
IGNORED = 2

PER_IMAGE = "per_image"
PER_CLASS_FIXED = "per_class_fixed"

DEFAULT_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: Tuple[float, ...] = DEFAULT_IOU_THRESHOLDS
    cap_mode: str = PER_IMAGE
    max_dets: int = 300
    recall_points: int = 101

    def __post_init__(self):
        thr = tuple(float(t) for t in self.iou_thresholds)
        if not thr:
            raise ValidationError("at least one IoU threshold is required")
        if any(not 0 < t <= 1 for t in thr):
            raise ValidationError(f"IoU thresholds must lie in (0, 1], got {thr}")
        if any(b <= a for a, b in zip(thr, thr[1:])):
            raise ValidationError("IoU thresholds must be strictly increasing")
        if self.cap_mode not in (PER_IMAGE, PER_CLASS_FIXED):
            raise ValidationError(f"unknown cap mode: {self.cap_mode!r}")
        if self.max_dets < 1:
            raise ValidationError("cap must be >= 1")
        if self.recall_points < 2:
            raise ValidationError("recall_points must be >= 2")
        object.__setattr__(self, "iou_thresholds", thr)

    @classmethod
    def fixed(cls, per_class: int = 10000, **kw) -> "EvalConfig":
        """AP-Fixed: per-class cap over the whole dataset instead of per image."""
        return cls(cap_mode=PER_CLASS_FIXED, max_dets=per_class, **kw)


@dataclass(frozen=True)
class ClassMetrics:
    ap: Optional[float]
    ar: Optional[float]
    n_gt: int
    n_det: int


@dataclass(frozen=True)
class MetricsReport:
    """Aggregates are unweighted means over classes with ground truth.

    A value of ``None`` means undefined (no class with ground truth in the
    group).
    """

    ap_overall: Optional[float]
    ap_rare: Optional[float]
    ap_common: Optional[float]
    ap_frequent: Optional[float]
    ar_overall: Optional[float]
    ar_rare: Optional[float]
    ar_common: Optional[float]
    ar_frequent: Optional[float]
    per_class: Dict[int, ClassMetrics] = field(default_factory=dict)

    def summary(self) -> Dict[str, Optional[float]]:
        return {
            "ap": self.ap_overall, "ap_rare": self.ap_rare,
            "ap_common": self.ap_common, "ap_frequent": self.ap_frequent,
            "ar": self.ar_overall, "ar_rare": self.ar_rare,
            "ar_common": self.ar_common, "ar_frequent": self.ar_frequent,
        }


def box_iou(a: Box, b: Box) -> float:
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


@numba.njit(cache=True)
def _iou(b1, b2):
    iw = min(b1[0] + b1[2], b2[0] + b2[2]) - max(b1[0], b2[0])
    ih = min(b1[1] + b1[3], b2[1] + b2[3]) - max(b1[1], b2[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = b1[2] * b1[3] + b2[2] * b2[3] - inter
    if union > 0:
        return inter / union
    return 0.0


@numba.njit(cache=True)
def _greedy_kernel(det_boxes, gt_start, gt_end, gt_boxes, gt_ignore, thresholds):
    # dets must be visited in descending score order within each (class, image)
    n = det_boxes.shape[0]
    n_t = thresholds.shape[0]
    labels = np.zeros((n_t, n), dtype=np.int8)
    matched = np.zeros((n_t, gt_boxes.shape[0]), dtype=np.bool_)
    ious = np.empty(64, dtype=np.float64)
    for i in range(n):
        s, e = gt_start[i], gt_end[i]
        if e <= s:
            continue
        if e - s > ious.shape[0]:
            ious = np.empty(2 * (e - s), dtype=np.float64)
        for g in range(s, e):
            ious[g - s] = _iou(det_boxes[i], gt_boxes[g])
        for t in range(n_t):
            thr = thresholds[t]
            for want_ignored in (False, True):
                best = -1
                best_iou = -1.0
                for g in range(s, e):
                    if gt_ignore[g] != want_ignored or matched[t, g]:
                        continue
                    v = ious[g - s]
                    if v >= thr and v > best_iou:
                        best = g
                        best_iou = v
                if best >= 0:
                    matched[t, best] = True
                    labels[t, i] = IGNORED if want_ignored else TP
                    break
    return labels


def greedy_match(
    dets: Sequence[DetectionTuple], gts: Sequence, iou_thr: float
) -> List[int]:
    """Label each detection TP, FP or IGNORED against same-class, same-image GT.

    ``dets`` must be sorted by descending score. ``gts`` are ``Annotation``
    objects (anything with ``box`` and ``ignore``).
    """
    if not dets:
        return []
    det_boxes = np.array([d.box.as_list() for d in dets], dtype=np.float64)
    gt_boxes = np.array([g.box.as_list() for g in gts], dtype=np.float64).reshape(-1, 4)
    gt_ignore = np.array([bool(g.ignore) for g in gts], dtype=np.bool_)
    n = len(dets)
    labels = _greedy_kernel(
        det_boxes, np.zeros(n, np.int64), np.full(n, len(gts), np.int64),
        gt_boxes, gt_ignore, np.array([iou_thr], dtype=np.float64),
    )
    return [int(v) for v in labels[0]]


def ap_from_matches(
    matches: Sequence[int], n_gt: int, recall_points: int = 101
) -> Optional[float]:
    """Interpolated AP from score-ordered match labels.

    Returns ``None`` when ``n_gt`` is 0 (AP undefined).
    """
    if n_gt <= 0:
        return None
    m = np.asarray(matches, dtype=np.int64)
    m = m[m != IGNORED]
    if len(m) == 0:
        return 0.0
    tp = np.cumsum(m == TP)
    fp = np.cumsum(m == FP)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    levels = np.arange(recall_points) / (recall_points - 1)
    idx = np.searchsorted(recall, levels, side="left")
    q = np.zeros(recall_points)
    ok = idx < len(recall)
    q[ok] = envelope[idx[ok]]
    return math.fsum(q) / recall_points


def _rank_within(groups_sorted: np.ndarray) -> np.ndarray:
    n = len(groups_sorted)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    starts = np.flatnonzero(np.r_[True, groups_sorted[1:] != groups_sorted[:-1]])
    return np.arange(n) - np.repeat(starts, np.diff(np.r_[starts, n]))


def _tie_order(d: Detections) -> np.ndarray:
    """Permutation sorting by the tie-break key (image_id, proposal, class_id)."""
    img, prop, cls = d.image_ids, d.proposal_ids, d.class_ids
    if len(img) > 1:
        di, dp, dc = np.diff(img), np.diff(prop), np.diff(cls)
        if np.all((di > 0) | ((di == 0) & ((dp > 0) | ((dp == 0) & (dc >= 0))))):
            return np.arange(len(img))
    return np.lexsort((cls, prop, img))


def _grouped_score_order(d: Detections, group: np.ndarray) -> np.ndarray:
    """Order by group asc, score desc, then tie-break key asc."""
    order = _tie_order(d)
    order = order[np.argsort(-d.scores[order], kind="stable")]
    return order[np.argsort(group[order], kind="stable")]


def apply_cap(
    tuples: Union[Detections, Iterable[DetectionTuple]], cfg: EvalConfig
) -> Detections:
    """Keep the top-scoring tuples per image (or per class for AP-Fixed).

    Ties are broken by (image_id, proposal order, class_id) ascending. The
    survivors come back in their original relative order.
    """
    d = Detections.from_tuples(tuples)
    if len(d) == 0:
        return d
    group = d.image_ids if cfg.cap_mode == PER_IMAGE else d.class_ids
    if np.unique(group, return_counts=True)[1].max() <= cfg.max_dets:
        return d
    order = _grouped_score_order(d, group)
    keep = order[_rank_within(group[order]) < cfg.max_dets]
    if len(keep) == len(d):
        return d
    return d.select(np.sort(keep))


def _mean(values: List[float]) -> Optional[float]:
    return math.fsum(values) / len(values) if values else None


class Evaluator:
    """Evaluator bound to one ground-truth set; reusable across many result sets."""

    def __init__(self, gt: GroundTruthSet, table: ClassTable, cfg: Optional[EvalConfig] = None):
        self.cfg = cfg or EvalConfig()
        self.table = table
        self.class_ids = np.asarray(table.class_ids, dtype=np.int64)
        self.buckets = table.buckets()
        self.image_ids = np.array(sorted(im.image_id for im in gt.images), dtype=np.int64)

        anns = gt.annotations
        gt_cls = np.array([a.class_id for a in anns], dtype=np.int64)
        unknown = sorted(set(gt_cls.tolist()) - set(self.class_ids.tolist()))
        if unknown:
            raise ValidationError(
                "ground-truth classes absent from class table: " + ", ".join(map(str, unknown))
            )
        gt_img = np.array([a.image_id for a in anns], dtype=np.int64)
        gt_boxes = np.array([a.box.as_list() for a in anns], dtype=np.float64).reshape(-1, 4)
        gt_ignore = np.array([a.ignore for a in anns], dtype=np.bool_)
        cpos = np.searchsorted(self.class_ids, gt_cls)
        ipos = np.searchsorted(self.image_ids, gt_img)
        keys = cpos * len(self.image_ids) + ipos
        order = np.argsort(keys, kind="stable")
        self._gt_keys = keys[order]
        self._gt_boxes = gt_boxes[order]
        self._gt_ignore = gt_ignore[order]
        self.n_gt = np.bincount(cpos[~gt_ignore], minlength=len(self.class_ids))

    def _check(self, d: Detections) -> None:
        if len(d) == 0:
            return
        cls = np.unique(d.class_ids)
        pos = np.searchsorted(self.class_ids, cls).clip(max=len(self.class_ids) - 1)
        bad = cls[self.class_ids[pos] != cls]
        if len(bad):
            raise ValidationError(
                "detections reference classes absent from class table: "
                + ", ".join(map(str, bad.tolist()))
            )
        imgs = np.unique(d.image_ids)
        pos = np.searchsorted(self.image_ids, imgs).clip(max=max(len(self.image_ids) - 1, 0))
        bad = imgs if not len(self.image_ids) else imgs[self.image_ids[pos] != imgs]
        if len(bad):
            raise ValidationError(
                "detections reference images absent from ground truth: "
                + ", ".join(map(str, bad[:10].tolist()))
            )

    def match(self, d: Detections) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Greedy match capped detections.

        Returns (order, class positions in that order, labels (T, n)).
        """
        cpos = np.searchsorted(self.class_ids, d.class_ids)
        ipos = np.searchsorted(self.image_ids, d.image_ids)
        order = _grouped_score_order(d, cpos)
        keys = (cpos * len(self.image_ids) + ipos)[order]
        start = np.searchsorted(self._gt_keys, keys, side="left")
        end = np.searchsorted(self._gt_keys, keys, side="right")
        labels = _greedy_kernel(
            np.ascontiguousarray(d.boxes[order]), start, end, self._gt_boxes,
            self._gt_ignore, np.asarray(self.cfg.iou_thresholds, dtype=np.float64),
        )
        return order, cpos[order], labels

    def evaluate(self, tuples: Union[Detections, Iterable[DetectionTuple]]) -> MetricsReport:
        d = Detections.from_tuples(tuples)
        self._check(d)
        d = apply_cap(d, self.cfg)
        _, cpos, labels = self.match(d)
        n_cls = len(self.class_ids)
        bounds = np.searchsorted(cpos, np.arange(n_cls + 1))
        n_t = len(self.cfg.iou_thresholds)

        per_class: Dict[int, ClassMetrics] = {}
        groups: Dict[str, Tuple[List[float], List[float]]] = {b: ([], []) for b in BUCKETS}
        all_ap: List[float] = []
        all_ar: List[float] = []
        for k in range(n_cls):
            s, e = bounds[k], bounds[k + 1]
            n_gt = int(self.n_gt[k])
            cid = int(self.class_ids[k])
            if n_gt == 0:
                per_class[cid] = ClassMetrics(None, None, 0, int(e - s))
                continue
            aps = [ap_from_matches(labels[t, s:e], n_gt, self.cfg.recall_points)
                   for t in range(n_t)]
            ars = [np.count_nonzero(labels[t, s:e] == TP) / n_gt for t in range(n_t)]
            ap, ar = math.fsum(aps) / n_t, math.fsum(ars) / n_t
            per_class[cid] = ClassMetrics(ap, ar, n_gt, int(e - s))
            all_ap.append(ap)
            all_ar.append(ar)
            if self.buckets[k] in groups:
                groups[self.buckets[k]][0].append(ap)
                groups[self.buckets[k]][1].append(ar)

        return MetricsReport(
            _mean(all_ap), _mean(groups[RARE][0]), _mean(groups[COMMON][0]),
            _mean(groups[FREQUENT][0]), _mean(all_ar), _mean(groups[RARE][1]),
            _mean(groups[COMMON][1]), _mean(groups[FREQUENT][1]), per_class,
        )


def evaluate(
    tuples: Union[Detections, Iterable[DetectionTuple]],
    gt: GroundTruthSet,
    table: ClassTable,
    cfg: Optional[EvalConfig] = None,
) -> MetricsReport:
    return Evaluator(gt, table, cfg).evaluate(tuples)


def score_statistics(
    tuples: Union[Detections, Iterable[DetectionTuple]],
    table: ClassTable,
    top_k: int = 300,
) -> Dict[str, Dict[str, Optional[float]]]:
    """Per-bucket mean scores of the top-k tuples of each image.

    ``bucket_mean`` is normalized so the frequent bucket equals 1 (raw values
    in ``bucket_mean_raw``). ``rare_tuples`` looks at every retained
    rare-class tuple and reports its mean score next to the mean of the
    highest common- and frequent-class scores on the same proposal (0 when
    the proposal has no such tuple).
    """
    d = apply_cap(Detections.from_tuples(tuples), EvalConfig(max_dets=top_k))
    ids = np.asarray(table.class_ids, dtype=np.int64)
    if len(d):
        pos = np.searchsorted(ids, d.class_ids).clip(max=len(ids) - 1)
        if np.any(ids[pos] != d.class_ids):
            raise ValidationError("tuples reference classes absent from class table")
    else:
        pos = np.zeros(0, dtype=np.int64)
    bucket_arr = np.array(table.buckets() or [""], dtype=object)
    b = bucket_arr[pos] if len(d) else np.zeros(0, dtype=object)

    raw = {}
    for name in BUCKETS:
        sel = d.scores[b == name]
        raw[name] = float(sel.mean()) if len(sel) else None
    ref = raw[FREQUENT]
    norm = {k: (v / ref if v is not None and ref else None) for k, v in raw.items()}

    rare_idx = np.flatnonzero(b == RARE)
    rare_stats: Dict[str, Optional[float]] = {RARE: None, COMMON: None, FREQUENT: None}
    if len(rare_idx):
        best: Dict[Tuple[int, int, str], float] = {}
        for i in range(len(d)):
            key = (int(d.image_ids[i]), int(d.proposal_ids[i]), b[i])
            if d.scores[i] > best.get(key, -1.0):
                best[key] = float(d.scores[i])
        rare_stats[RARE] = float(d.scores[rare_idx].mean())
        for other in (COMMON, FREQUENT):
            vals = [best.get((int(d.image_ids[i]), int(d.proposal_ids[i]), other), 0.0)
                    for i in rare_idx]
            rare_stats[other] = float(np.mean(vals))
    return {"bucket_mean": norm, "bucket_mean_raw": raw, "rare_tuples": rare_stats}
