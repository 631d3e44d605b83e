"""Domain types shared across the package and class-frequency bookkeeping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

RARE = "rare"
COMMON = "common"
FREQUENT = "frequent"
UNSEEN = "unseen"
BUCKETS = (RARE, COMMON, FREQUENT)

SOFTMAX_BG = "softmax_bg"
MULTI_BINARY = "multi_binary"
CLASSIFIER_KINDS = (SOFTMAX_BG, MULTI_BINARY)


class NorcalError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(NorcalError, ValueError):
    """Input data or configuration violates a documented contract."""


class InvariantError(NorcalError, AssertionError):
    """An internal invariant was violated; indicates a bug, not bad input."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, top-left corner plus size, in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError(f"box has non-finite coordinates: {vals}")
        if self.w < 0 or self.h < 0:
            raise ValidationError(f"box has negative size: {vals}")

    def as_list(self) -> List[float]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class ClassEntry:
    class_id: int
    name: str
    n_images: int


@dataclass(frozen=True)
class ClassTable:
    """Per-class training image counts with frequency buckets.

    Entries are kept sorted by ``class_id``; that order is the position map
    used to index logit vectors.
    """

    entries: Tuple[ClassEntry, ...]
    rare_max: int = 10
    common_max: int = 100
    _pos: Dict[int, int] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        entries = tuple(sorted(self.entries, key=lambda e: e.class_id))
        ids = [e.class_id for e in entries]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ValidationError(f"duplicate class ids in class table: {dup}")
        if not 0 <= self.rare_max < self.common_max:
            raise ValidationError(
                f"bucket thresholds must satisfy 0 <= rare_max < common_max, "
                f"got {self.rare_max}/{self.common_max}"
            )
        for e in entries:
            if e.n_images < 0:
                raise ValidationError(f"class {e.class_id} has negative n_images")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "_pos", {cid: i for i, cid in enumerate(ids)})

    @classmethod
    def from_counts(
        cls,
        counts: Mapping[int, int],
        names: Optional[Mapping[int, str]] = None,
        rare_max: int = 10,
        common_max: int = 100,
    ) -> "ClassTable":
        names = names or {}
        entries = [
            ClassEntry(int(cid), names.get(cid, str(cid)), int(n)) for cid, n in counts.items()
        ]
        return cls(tuple(entries), rare_max, common_max)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, class_id) -> bool:
        return class_id in self._pos

    @property
    def class_ids(self) -> List[int]:
        return [e.class_id for e in self.entries]

    @property
    def counts(self) -> np.ndarray:
        """N_c as an int array in position order."""
        return np.array([e.n_images for e in self.entries], dtype=np.int64)

    def position(self, class_id: int) -> int:
        try:
            return self._pos[class_id]
        except KeyError:
            raise ValidationError(f"unknown class_id: {class_id}") from None

    def entry(self, class_id: int) -> ClassEntry:
        return self.entries[self.position(class_id)]

    def bucket_for_count(self, n: int) -> str:
        if n <= 0:
            return UNSEEN
        if n <= self.rare_max:
            return RARE
        if n <= self.common_max:
            return COMMON
        return FREQUENT

    def buckets(self) -> List[str]:
        """Bucket name per class, in position order."""
        return [self.bucket_for_count(e.n_images) for e in self.entries]


@dataclass(frozen=True)
class ProposalLogits:
    image_id: int
    proposal_id: int
    box: Box
    logits: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.logits, dtype=np.float64)
        if arr.ndim != 1:
            raise ValidationError(f"proposal {self.proposal_id}: logits must be a vector")
        if not np.all(np.isfinite(arr)):
            raise ValidationError(
                f"proposal {self.proposal_id} (image {self.image_id}): non-finite logits"
            )
        object.__setattr__(self, "logits", arr)


@dataclass(frozen=True)
class DetectionTuple:
    image_id: int
    class_id: int
    box: Box
    score: float
    # position of the source proposal; used for tie-breaking and per-proposal stats
    proposal_id: Optional[int] = None

    def __post_init__(self):
        if not (math.isfinite(self.score) and self.score >= 0):
            raise ValidationError(f"detection score must be finite and >= 0, got {self.score}")


@dataclass(frozen=True)
class Image:
    image_id: int
    width: float
    height: float


@dataclass(frozen=True)
class Annotation:
    ann_id: int
    image_id: int
    class_id: int
    box: Box
    ignore: bool = False


@dataclass(frozen=True)
class GroundTruthSet:
    images: Tuple[Image, ...]
    annotations: Tuple[Annotation, ...]
    categories: Tuple[Tuple[int, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "annotations", tuple(self.annotations))
        object.__setattr__(self, "categories", tuple((int(c), str(n)) for c, n in self.categories))
        image_ids = {im.image_id for im in self.images}
        if len(image_ids) != len(self.images):
            raise ValidationError("duplicate image ids in ground truth")
        ann_ids = set()
        dangling = []
        for a in self.annotations:
            if a.ann_id in ann_ids:
                raise ValidationError(f"duplicate ann_id: {a.ann_id}")
            ann_ids.add(a.ann_id)
            if a.image_id not in image_ids:
                dangling.append(a.image_id)
        if dangling:
            raise ValidationError(
                "dangling image_id: " + ", ".join(str(i) for i in sorted(set(dangling)))
            )
        if self.categories:
            cat_ids = {c for c, _ in self.categories}
            bad = sorted({a.class_id for a in self.annotations} - cat_ids)
            if bad:
                raise ValidationError(
                    "dangling category_id: " + ", ".join(str(i) for i in bad)
                )

    def subset(self, image_ids: Iterable[int]) -> "GroundTruthSet":
        keep = set(image_ids)
        return GroundTruthSet(
            tuple(im for im in self.images if im.image_id in keep),
            tuple(a for a in self.annotations if a.image_id in keep),
            self.categories,
        )


@dataclass(frozen=True)
class LogitDump:
    """Column-oriented batch of proposals; the bulk form of ``ProposalLogits``."""

    kind: str
    image_ids: np.ndarray
    proposal_ids: np.ndarray
    boxes: np.ndarray  # (n, 4) xywh
    logits: np.ndarray  # (n, C+1) or (n, C)

    def __post_init__(self):
        if self.kind not in CLASSIFIER_KINDS:
            raise ValidationError(f"unknown classifier kind: {self.kind!r}")
        image_ids = np.asarray(self.image_ids, dtype=np.int64).reshape(-1)
        proposal_ids = np.asarray(self.proposal_ids, dtype=np.int64).reshape(-1)
        boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        logits = np.asarray(self.logits, dtype=np.float64)
        if logits.ndim != 2:
            logits = logits.reshape(len(image_ids), -1)
        n = len(image_ids)
        if not (len(proposal_ids) == len(boxes) == logits.shape[0] == n):
            raise ValidationError("logit dump columns have mismatched lengths")
        for name, arr in (("image_ids", image_ids), ("proposal_ids", proposal_ids),
                          ("boxes", boxes), ("logits", logits)):
            object.__setattr__(self, name, arr)

    @classmethod
    def from_proposals(cls, kind: str, proposals: Iterable[ProposalLogits]) -> "LogitDump":
        props = list(proposals)
        if not props:
            return cls(kind, np.zeros(0), np.zeros(0), np.zeros((0, 4)), np.zeros((0, 0)))
        widths = {len(p.logits) for p in props}
        if len(widths) != 1:
            first = len(props[0].logits)
            bad = next(p for p in props if len(p.logits) != first)
            raise ValidationError(
                f"inconsistent logit width at proposal {bad.proposal_id} "
                f"(image {bad.image_id}): {len(bad.logits)} != {first}"
            )
        return cls(
            kind,
            np.array([p.image_id for p in props]),
            np.array([p.proposal_id for p in props]),
            np.array([p.box.as_list() for p in props]),
            np.stack([p.logits for p in props]),
        )

    def __len__(self) -> int:
        return len(self.image_ids)

    @property
    def width(self) -> int:
        return self.logits.shape[1]

    def __iter__(self) -> Iterator[ProposalLogits]:
        for i in range(len(self)):
            yield ProposalLogits(
                int(self.image_ids[i]), int(self.proposal_ids[i]),
                Box(*map(float, self.boxes[i])), self.logits[i],
            )

    def select(self, mask: np.ndarray) -> "LogitDump":
        return LogitDump(self.kind, self.image_ids[mask], self.proposal_ids[mask],
                         self.boxes[mask], self.logits[mask])


@dataclass(frozen=True)
class Detections:
    """Column-oriented list of detection tuples.

    Iterating yields ``DetectionTuple`` objects; the arrays are what the
    evaluator actually consumes.
    """

    image_ids: np.ndarray
    class_ids: np.ndarray
    boxes: np.ndarray
    scores: np.ndarray
    proposal_ids: np.ndarray

    def __post_init__(self):
        image_ids = np.asarray(self.image_ids, dtype=np.int64).reshape(-1)
        n = len(image_ids)
        class_ids = np.asarray(self.class_ids, dtype=np.int64).reshape(-1)
        boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        proposal_ids = np.asarray(self.proposal_ids, dtype=np.int64).reshape(-1)
        if not (len(class_ids) == len(boxes) == len(scores) == len(proposal_ids) == n):
            raise ValidationError("detection columns have mismatched lengths")
        if n and not (np.all(np.isfinite(scores)) and scores.min() >= 0):
            raise ValidationError("detection scores must be finite and >= 0")
        for name, arr in (("image_ids", image_ids), ("class_ids", class_ids), ("boxes", boxes),
                          ("scores", scores), ("proposal_ids", proposal_ids)):
            object.__setattr__(self, name, arr)

    @classmethod
    def empty(cls) -> "Detections":
        return cls(np.zeros(0), np.zeros(0), np.zeros((0, 4)), np.zeros(0), np.zeros(0))

    @classmethod
    def from_tuples(cls, tuples: Iterable[DetectionTuple]) -> "Detections":
        if isinstance(tuples, Detections):
            return tuples
        tuples = list(tuples)
        if not tuples:
            return cls.empty()
        # missing proposal ids fall back to input order
        return cls(
            np.array([t.image_id for t in tuples]),
            np.array([t.class_id for t in tuples]),
            np.array([t.box.as_list() for t in tuples]),
            np.array([t.score for t in tuples]),
            np.array([i if t.proposal_id is None else t.proposal_id
                      for i, t in enumerate(tuples)]),
        )

    @classmethod
    def concat(cls, parts: Sequence["Detections"]) -> "Detections":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                     ("image_ids", "class_ids", "boxes", "scores", "proposal_ids")))

    def __len__(self) -> int:
        return len(self.scores)

    def __iter__(self) -> Iterator[DetectionTuple]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> DetectionTuple:
        return DetectionTuple(
            int(self.image_ids[i]), int(self.class_ids[i]),
            Box(*map(float, self.boxes[i])), float(self.scores[i]), int(self.proposal_ids[i]),
        )

    def select(self, idx) -> "Detections":
        return Detections(self.image_ids[idx], self.class_ids[idx], self.boxes[idx],
                          self.scores[idx], self.proposal_ids[idx])

    def with_scores(self, scores: np.ndarray) -> "Detections":
        return Detections(self.image_ids, self.class_ids, self.boxes, scores, self.proposal_ids)


def build_class_table(
    gt: GroundTruthSet, rare_max: int = 10, common_max: int = 100
) -> ClassTable:
    """Count, per class, the distinct images holding a non-ignored instance.

    Every category listed in ``gt`` gets an entry, so classes never annotated
    come out with ``n_images == 0`` (bucket ``unseen``).
    """
    if not gt.annotations:
        raise ValidationError("no annotations")
    seen: Dict[int, set] = {}
    for a in gt.annotations:
        bucket = seen.setdefault(a.class_id, set())
        if not a.ignore:
            bucket.add(a.image_id)
    names = dict(gt.categories)
    counts = {cid: 0 for cid in names}
    counts.update({cid: len(imgs) for cid, imgs in seen.items()})
    return ClassTable.from_counts(counts, names, rare_max, common_max)


def bucket_of(class_id: int, table: ClassTable) -> str:
    return table.bucket_for_count(table.entry(class_id).n_images)
