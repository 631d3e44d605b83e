"""Synthetic long-tailed detection scenarios and a brute-force evaluator.

The generator models a detector whose logits carry a prior proportional to
``head_bias * ln N_c``: each ground-truth object yields one proposal whose
true class gets a fixed margin over the rest, and pure-background proposals
get a raised background logit. Boxes live on an integer grid and true
proposals are jittered, so IoU matching sees a spread of overlaps.

``oracle_evaluate`` deliberately re-derives the metric from scratch with
plain Python loops and shares nothing with :mod:`norcal.evaluation`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import (
    SOFTMAX_BG,
    Annotation,
    Box,
    ClassTable,
    Image,
    GroundTruthSet,
    LogitDump,
    ValidationError,
)


@dataclass(frozen=True)
class SynthParams:
    n_classes: int = 100
    # "zipf": N_c = max(1, floor(max_count / rank**zipf_s)); "explicit": counts
    frequency_law: str = "zipf"
    zipf_s: float = 1.3
    max_count: int = 2000
    counts: Optional[Tuple[int, ...]] = None
    n_images: int = 200
    objects_per_image: float = 2.0
    head_bias: float = 1.0
    localization_noise: float = 4.0
    fg_bg_margin: float = 0.0
    seed: int = 0
    true_margin: float = 8.0
    logit_noise: float = 1.0
    background_proposals: int = 10
    image_size: Tuple[int, int] = (640, 480)

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValidationError("n_classes must be >= 2")
        if self.n_images < 1:
            raise ValidationError("n_images must be >= 1")
        if self.frequency_law not in ("zipf", "explicit"):
            raise ValidationError(f"unknown frequency law: {self.frequency_law!r}")
        for name in ("head_bias", "localization_noise", "fg_bg_margin", "logit_noise",
                     "objects_per_image", "zipf_s"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if self.background_proposals < 0:
            raise ValidationError("background_proposals must be >= 0")
        if self.frequency_law == "explicit":
            if self.counts is None or len(self.counts) != self.n_classes:
                raise ValidationError("explicit frequency law needs one count per class")
            object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))

    def class_counts(self) -> np.ndarray:
        if self.frequency_law == "explicit":
            counts = np.asarray(self.counts, dtype=np.int64)
        else:
            ranks = np.arange(1, self.n_classes + 1, dtype=np.float64)
            counts = np.maximum(1, np.floor(self.max_count / ranks ** self.zipf_s)).astype(np.int64)
        if np.any(counts < 0):
            raise ValidationError("class counts must be non-negative")
        if np.count_nonzero(counts) < 2:
            raise ValidationError("degenerate frequency law: all mass on one class")
        return counts


def gen_scenario(p: SynthParams) -> Tuple[GroundTruthSet, ClassTable, LogitDump]:
    """Sample one split of a synthetic long-tailed world.

    The returned class table holds the frequency law's counts, i.e. what the
    simulated detector was trained on; it does not depend on ``seed``, so
    splits drawn with different seeds share it. Object classes are sampled
    in proportion to those counts. Class ids are 1..n_classes.
    """
    counts = p.class_counts()
    class_ids = np.arange(1, p.n_classes + 1)
    table = ClassTable.from_counts(
        {int(c): int(n) for c, n in zip(class_ids, counts)},
        {int(c): f"class_{c}" for c in class_ids},
    )
    rng = np.random.default_rng(p.seed)
    W, H = p.image_size
    probs = counts / counts.sum()
    prior = p.head_bias * np.log(np.maximum(counts, 1))

    n_obj = np.maximum(1, rng.poisson(p.objects_per_image, size=p.n_images))
    image_ids = np.arange(1, p.n_images + 1)
    obj_img = np.repeat(image_ids, n_obj)
    m = len(obj_img)
    obj_cls = rng.choice(p.n_classes, size=m, p=probs)

    def random_boxes(k):
        w = rng.integers(24, W // 3, size=k)
        h = rng.integers(24, H // 3, size=k)
        x = rng.integers(0, W - w + 1)
        y = rng.integers(0, H - h + 1)
        return np.stack([x, y, w, h], axis=1).astype(np.float64)

    gt_boxes = random_boxes(m)
    # jittered integer-grid proposals around each object
    jit = np.rint(rng.normal(0.0, p.localization_noise, size=(m, 4)))
    prop_boxes = gt_boxes + jit
    prop_boxes[:, 2:] = np.maximum(prop_boxes[:, 2:], 1.0)

    C = p.n_classes
    fg_logits = prior + p.logit_noise * rng.standard_normal((m, C))
    fg_logits[np.arange(m), obj_cls] += p.true_margin
    fg_bg = p.logit_noise * rng.standard_normal((m, 1))

    nb = p.n_images * p.background_proposals
    bg_img = np.repeat(image_ids, p.background_proposals)
    bg_boxes = random_boxes(nb)
    bg_fg = prior + p.logit_noise * rng.standard_normal((nb, C))
    # background beats an unbiased true-class logit by fg_bg_margin
    bg_level = p.true_margin + p.fg_bg_margin
    bg_bg = bg_level + p.logit_noise * rng.standard_normal((nb, 1))

    logits = np.concatenate([
        np.concatenate([fg_logits, fg_bg], axis=1),
        np.concatenate([bg_fg, bg_bg], axis=1),
    ])
    all_img = np.concatenate([obj_img, bg_img])
    all_boxes = np.concatenate([prop_boxes, bg_boxes])
    order = np.argsort(all_img, kind="stable")
    all_img, all_boxes, logits = all_img[order], all_boxes[order], logits[order]
    starts = np.flatnonzero(np.r_[True, all_img[1:] != all_img[:-1]])
    prop_ids = np.arange(len(all_img)) - np.repeat(starts, np.diff(np.r_[starts, len(all_img)]))

    images = tuple(Image(int(i), float(W), float(H)) for i in image_ids)
    anns = tuple(
        Annotation(k + 1, int(obj_img[k]), int(class_ids[obj_cls[k]]), Box(*gt_boxes[k].tolist()))
        for k in range(m)
    )
    cats = tuple((int(c), f"class_{c}") for c in class_ids)
    gt = GroundTruthSet(images, anns, cats)
    dump = LogitDump(SOFTMAX_BG, all_img, prop_ids, all_boxes, logits)
    return gt, table, dump


# ---------------------------------------------------------------------------
# brute-force oracle

ORACLE_MAX_IMAGES = 10
ORACLE_MAX_TUPLES = 50


def _overlap(p, q):
    # p, q are (x, y, w, h); corners computed explicitly
    left, right = max(p[0], q[0]), min(p[0] + p[2], q[0] + q[2])
    top, bottom = max(p[1], q[1]), min(p[1] + p[3], q[1] + q[3])
    inter = 0.0
    if right > left and bottom > top:
        inter = (right - left) * (bottom - top)
    area_p = p[2] * p[3]
    area_q = q[2] * q[3]
    union = area_p + area_q - inter
    if union <= 0:
        return 0.0
    return inter / union


def oracle_evaluate(tuples, gt: GroundTruthSet, table: ClassTable, cfg):
    """Reference metric for tiny instances; quadratic and unoptimized on purpose."""
    from .evaluation import ClassMetrics, MetricsReport, PER_IMAGE  # result types only

    dets = [
        (t.image_id, t.class_id, tuple(t.box.as_list()), t.score,
         i if t.proposal_id is None else t.proposal_id)
        for i, t in enumerate(tuples)
    ]
    if len(gt.images) > ORACLE_MAX_IMAGES or len(dets) > ORACLE_MAX_TUPLES:
        raise ValidationError("instance too large for the oracle")

    # cap
    kept = []
    if cfg.cap_mode == PER_IMAGE:
        for img in sorted({d[0] for d in dets}):
            mine = [d for d in dets if d[0] == img]
            mine.sort(key=lambda d: (-d[3], d[4], d[1]))
            kept.extend(mine[:cfg.max_dets])
    else:
        for c in sorted({d[1] for d in dets}):
            mine = [d for d in dets if d[1] == c]
            mine.sort(key=lambda d: (-d[3], d[0], d[4]))
            kept.extend(mine[:cfg.max_dets])

    R = cfg.recall_points
    per_class = {}
    for entry in table.entries:
        c = entry.class_id
        gts = [a for a in gt.annotations if a.class_id == c]
        n_gt = sum(1 for a in gts if not a.ignore)
        mine = sorted((d for d in kept if d[1] == c), key=lambda d: (-d[3], d[0], d[4]))
        if n_gt == 0:
            per_class[c] = ClassMetrics(None, None, 0, len(mine))
            continue
        aps, ars = [], []
        for thr in cfg.iou_thresholds:
            used = set()
            outcome = []
            for d in mine:
                candidates = [a for a in gts if a.image_id == d[0] and a.ann_id not in used]
                hit = None
                for ignored in (False, True):
                    best_v = None
                    for a in candidates:
                        if a.ignore != ignored:
                            continue
                        v = _overlap(d[2], a.box.as_list())
                        if v >= thr and (best_v is None or v > best_v):
                            best_v, hit = v, a
                    if hit is not None:
                        break
                if hit is None:
                    outcome.append("fp")
                else:
                    used.add(hit.ann_id)
                    outcome.append("ign" if hit.ignore else "tp")
            outcome = [o for o in outcome if o != "ign"]
            points = []
            tp = fp = 0
            for o in outcome:
                if o == "tp":
                    tp += 1
                else:
                    fp += 1
                points.append((tp / n_gt, tp / (tp + fp)))
            total = []
            for i in range(R):
                r = i / (R - 1)
                best = 0.0
                for rec, prec in points:
                    if rec >= r and prec > best:
                        best = prec
                total.append(best)
            aps.append(math.fsum(total) / R)
            ars.append(tp / n_gt)
        per_class[c] = ClassMetrics(math.fsum(aps) / len(aps), math.fsum(ars) / len(ars),
                                    n_gt, len(mine))

    def avg(bucket, idx):
        vals = [
            (m.ap, m.ar)[idx] for c, m in per_class.items()
            if m.n_gt > 0 and (bucket is None or table.bucket_for_count(table.entry(c).n_images) == bucket)
        ]
        return math.fsum(vals) / len(vals) if vals else None

    return MetricsReport(
        avg(None, 0), avg("rare", 0), avg("common", 0), avg("frequent", 0),
        avg(None, 1), avg("rare", 1), avg("common", 1), avg("frequent", 1), per_class,
    )
