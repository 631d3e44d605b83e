"""Score calibration for long-tailed detectors.

Foreground class scores are divided by per-class factors that grow with the
training frequency of the class, while the background term is left alone
(or multiplied by ``beta`` for ablations). Everything runs in the log domain
with max-subtraction, so logits of any magnitude are safe.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Optional, Tuple, Union

import numpy as np
from scipy.special import expit, logsumexp

from .core import (
    MULTI_BINARY,
    SOFTMAX_BG,
    ClassTable,
    Detections,
    LogitDump,
    ProposalLogits,
    ValidationError,
)

log = logging.getLogger(__name__)

DIVIDE_EXPONENTIAL = "divide_exponential"
DIVIDE_PROBABILITY = "divide_probability"
SCALE_LOGIT = "scale_logit"
MECHANISMS = (DIVIDE_EXPONENTIAL, DIVIDE_PROBABILITY, SCALE_LOGIT)

CDT = "cdt"
ENS = "ens"
CUSTOM = "custom"
NONE = "none"
FACTOR_KINDS = (CDT, ENS, CUSTOM, NONE)

DEFAULT_SCORE_THRESHOLD = 1e-4

# proposals per chunk in calibrate_dataset is this many cells / width
_CHUNK_CELLS = 1 << 22


@dataclass(frozen=True)
class CalibrationConfig:
    classifier_kind: str = SOFTMAX_BG
    mechanism: str = DIVIDE_EXPONENTIAL
    factor: str = CDT
    gamma: float = 0.0
    factor_path: Optional[str] = None
    normalize: bool = True
    beta: float = 1.0
    score_threshold: float = DEFAULT_SCORE_THRESHOLD

    def __post_init__(self):
        if self.classifier_kind not in (SOFTMAX_BG, MULTI_BINARY):
            raise ValidationError(f"unknown classifier kind: {self.classifier_kind!r}")
        if self.mechanism not in MECHANISMS:
            raise ValidationError(f"unknown mechanism: {self.mechanism!r}")
        if self.factor not in FACTOR_KINDS:
            raise ValidationError(f"unknown factor family: {self.factor!r}")
        check_gamma(self.factor, self.gamma)
        if self.factor == CUSTOM and not self.factor_path:
            raise ValidationError("custom factor requires a factor table path")
        if not (math.isfinite(self.beta) and self.beta >= 0):
            raise ValidationError(f"beta must be >= 0, got {self.beta}")
        if not math.isfinite(self.score_threshold):
            raise ValidationError("score_threshold must be finite")
        if self.normalize and self.classifier_kind == MULTI_BINARY:
            warnings.warn(
                "normalizing sigmoid scores across classes has no background anchor "
                "and tends to turn background patches into detections",
                stacklevel=2,
            )


def check_gamma(factor: str, gamma: float) -> None:
    if not math.isfinite(gamma):
        raise ValidationError(f"gamma must be finite, got {gamma}")
    if factor == CDT and gamma < 0:
        raise ValidationError(f"cdt requires gamma >= 0, got {gamma}")
    if factor == ENS and not 0 <= gamma < 1:
        raise ValidationError(f"ens requires 0 <= gamma < 1, got {gamma}")


@dataclass(frozen=True)
class FactorTable:
    """Positive per-class divisors, one per foreground class.

    ``log_a`` holds ln(a_c) in class-table position order; calibration only
    ever needs the log form.
    """

    class_ids: Tuple[int, ...]
    log_a: np.ndarray

    def __post_init__(self):
        log_a = np.asarray(self.log_a, dtype=np.float64).reshape(-1)
        if len(log_a) != len(self.class_ids):
            raise ValidationError("factor table length does not match class ids")
        if not np.all(np.isfinite(log_a)):
            raise ValidationError("factors must be positive and finite")
        object.__setattr__(self, "class_ids", tuple(int(c) for c in self.class_ids))
        object.__setattr__(self, "log_a", log_a)

    @classmethod
    def from_mapping(cls, a: Mapping[int, float], table: ClassTable) -> "FactorTable":
        missing = [cid for cid in table.class_ids if cid not in a]
        if missing:
            raise ValidationError("missing factor for class ids: " + ", ".join(map(str, missing)))
        vals = np.array([float(a[cid]) for cid in table.class_ids])
        bad = [cid for cid, v in zip(table.class_ids, vals) if not (v > 0 and math.isfinite(v))]
        if bad:
            raise ValidationError("non-positive factor for class ids: " + ", ".join(map(str, bad)))
        return cls(tuple(table.class_ids), np.log(vals))

    @classmethod
    def ones(cls, table: ClassTable) -> "FactorTable":
        return cls(tuple(table.class_ids), np.zeros(len(table)))

    @property
    def a(self) -> Dict[int, float]:
        return {cid: float(math.exp(v)) for cid, v in zip(self.class_ids, self.log_a)}


@dataclass(frozen=True)
class ScoreVector:
    foreground: np.ndarray
    background: Optional[float] = None


def _warn_unseen(table: ClassTable) -> None:
    unseen = [e.class_id for e in table.entries if e.n_images == 0]
    if unseen:
        warnings.warn(
            f"{len(unseen)} class(es) have no training images; using factor 1 for them",
            stacklevel=3,
        )


def factor_cdt(table: ClassTable, gamma: float) -> FactorTable:
    """a_c = N_c ** gamma, computed as gamma * ln N_c."""
    check_gamma(CDT, gamma)
    counts = table.counts
    _warn_unseen(table)
    log_a = np.zeros(len(counts))
    seen = counts > 0
    log_a[seen] = gamma * np.log(counts[seen])
    return FactorTable(tuple(table.class_ids), log_a)


def factor_ens(table: ClassTable, gamma: float) -> FactorTable:
    """Effective-number factor a_c = (1 - gamma**N_c) / (1 - gamma)."""
    check_gamma(ENS, gamma)
    counts = table.counts
    _warn_unseen(table)
    log_a = np.zeros(len(counts))
    seen = counts > 0
    if gamma > 0:
        n = counts[seen].astype(np.float64)
        # log1p(-g**N) - log1p(-g); g**N underflows harmlessly to 0 for large N
        log_a[seen] = np.log1p(-np.power(gamma, n)) - math.log1p(-gamma)
    return FactorTable(tuple(table.class_ids), log_a)


def factors_for(cfg: CalibrationConfig, table: ClassTable) -> FactorTable:
    if cfg.factor == CDT:
        return factor_cdt(table, cfg.gamma)
    if cfg.factor == ENS:
        return factor_ens(table, cfg.gamma)
    if cfg.factor == CUSTOM:
        from .io import load_factor_table

        return load_factor_table(cfg.factor_path, table)
    return FactorTable.ones(table)


def _log_beta(beta: float) -> float:
    if beta < 0:
        raise ValidationError(f"beta must be >= 0, got {beta}")
    return -math.inf if beta == 0 else math.log(beta)


def _softmax_rows(u: np.ndarray) -> np.ndarray:
    e = u - u.max(axis=1, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=1, keepdims=True)
    return e


def calibrate_softmax_logits(
    logits: np.ndarray,
    log_a: np.ndarray,
    mechanism: str = DIVIDE_EXPONENTIAL,
    normalize: bool = True,
    beta: float = 1.0,
) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized calibration of softmax-with-background logits.

    ``logits`` is (n, C+1) with the background in the last column. Returns
    (foreground scores (n, C), background term (n,)). Without normalization
    the foreground values are the raw calibrated numerators (for
    ``divide_probability`` these are probabilities over the original
    partition function) and the background term is its original probability.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] != len(log_a) + 1:
        raise ValidationError(
            f"expected logits of width {len(log_a) + 1}, got shape {logits.shape}"
        )
    if not np.all(np.isfinite(logits)):
        raise ValidationError("non-finite logits")
    lb = _log_beta(beta)
    fg, bg = logits[:, :-1], logits[:, -1:]

    if mechanism == DIVIDE_EXPONENTIAL:
        u_fg = fg - log_a
        u_bg = bg + lb
    elif mechanism == DIVIDE_PROBABILITY:
        log_z = logsumexp(logits, axis=1, keepdims=True)
        u_fg = fg - log_z - log_a
        u_bg = bg - log_z + lb
    elif mechanism == SCALE_LOGIT:
        u_fg = fg / np.exp(log_a)
        u_bg = bg + lb
    else:
        raise ValidationError(f"unknown mechanism: {mechanism!r}")

    if normalize:
        u = np.concatenate([u_fg, u_bg], axis=1)
        s = _softmax_rows(u)
        return s[:, :-1], s[:, -1]

    with np.errstate(over="raise"):
        try:
            scores = np.exp(u_fg)
        except FloatingPointError:
            raise ValidationError(
                "unnormalized calibrated score overflows; enable normalization"
            ) from None
    if mechanism == DIVIDE_PROBABILITY and np.any(scores > 1):
        warnings.warn("factors below 1 pushed probabilities above 1; clamping", stacklevel=2)
        np.minimum(scores, 1.0, out=scores)
    bg_prob = np.exp(bg[:, 0] - logsumexp(logits, axis=1))
    return scores, bg_prob


def calibrate_sigmoid_logits(
    logits: np.ndarray,
    log_a: np.ndarray,
    mechanism: str = DIVIDE_EXPONENTIAL,
    normalize: bool = False,
) -> np.ndarray:
    """Vectorized calibration of independent per-class sigmoid logits (n, C)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] != len(log_a):
        raise ValidationError(f"expected logits of width {len(log_a)}, got shape {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise ValidationError("non-finite logits")
    if mechanism == DIVIDE_EXPONENTIAL:
        s = expit(logits - log_a)
    elif mechanism == DIVIDE_PROBABILITY:
        s = np.clip(expit(logits) / np.exp(log_a), 0.0, None)
        if np.any(s > 1):
            warnings.warn("factors below 1 pushed probabilities above 1; clamping", stacklevel=2)
            np.minimum(s, 1.0, out=s)
    elif mechanism == SCALE_LOGIT:
        s = expit(logits / np.exp(log_a))
    else:
        raise ValidationError(f"unknown mechanism: {mechanism!r}")
    if normalize:
        total = s.sum(axis=1, keepdims=True)
        s = np.divide(s, total, out=np.zeros_like(s), where=total > 0)
    return s


def calibrate_probabilities(
    probs: np.ndarray, a: np.ndarray, beta: float = 1.0, normalize: bool = True
) -> np.ndarray:
    """Divide foreground probabilities by ``a`` and optionally renormalize.

    Works directly on probability vectors (background last), so exact zeros
    are allowed. Returns the full (…, C+1) vector including background.
    """
    probs = np.asarray(probs, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if probs.shape[-1] != a.shape[-1] + 1:
        raise ValidationError("probability vector must have one more entry than factors")
    if np.any(a <= 0):
        raise ValidationError("factors must be positive")
    if beta < 0:
        raise ValidationError(f"beta must be >= 0, got {beta}")
    out = np.concatenate([probs[..., :-1] / a, probs[..., -1:] * beta], axis=-1)
    if normalize:
        out = out / out.sum(axis=-1, keepdims=True)
    return out


def _check_kind(p: ProposalLogits, kind: str, n_classes: int) -> None:
    want = n_classes + 1 if kind == SOFTMAX_BG else n_classes
    if len(p.logits) != want:
        raise ValidationError(
            f"proposal {p.proposal_id} (image {p.image_id}): expected {want} logits "
            f"for {kind}, got {len(p.logits)}"
        )


def softmax_scores(p: ProposalLogits) -> ScoreVector:
    z = np.asarray(p.logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValidationError("non-finite logits")
    s = np.exp(z - logsumexp(z))
    return ScoreVector(s[:-1], float(s[-1]))


def decompose_foreground(p: ProposalLogits) -> Tuple[float, np.ndarray]:
    """Split softmax scores into P(foreground) and P(class | foreground)."""
    z = np.asarray(p.logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValidationError("non-finite logits")
    fg = z[:-1]
    lse_fg = logsumexp(fg)
    p_fg = float(np.exp(lse_fg - np.logaddexp(lse_fg, z[-1])))
    cond = np.exp(fg - lse_fg)
    return p_fg, cond


def calibrate_softmax(
    p: ProposalLogits, f: FactorTable, cfg: CalibrationConfig
) -> ScoreVector:
    _check_kind(p, SOFTMAX_BG, len(f.log_a))
    fg, bg = calibrate_softmax_logits(
        p.logits[None, :], f.log_a, cfg.mechanism, cfg.normalize, cfg.beta
    )
    return ScoreVector(fg[0], float(bg[0]))


def calibrate_sigmoid(
    p: ProposalLogits, f: FactorTable, cfg: CalibrationConfig
) -> ScoreVector:
    _check_kind(p, MULTI_BINARY, len(f.log_a))
    s = calibrate_sigmoid_logits(p.logits[None, :], f.log_a, cfg.mechanism, cfg.normalize)
    return ScoreVector(s[0])


def calibrated_matrix(
    logits: np.ndarray, f: FactorTable, cfg: CalibrationConfig
) -> np.ndarray:
    """Calibrated foreground scores for a (n, width) block of logits."""
    if cfg.classifier_kind == SOFTMAX_BG:
        return calibrate_softmax_logits(logits, f.log_a, cfg.mechanism, cfg.normalize, cfg.beta)[0]
    return calibrate_sigmoid_logits(logits, f.log_a, cfg.mechanism, cfg.normalize)


def _kth_score_per_image(s: np.ndarray, img: np.ndarray, k: int) -> np.ndarray:
    """Per-row lower bound on the k-th best score of the row's image.

    ``img`` is sorted. Rows are scattered into an (images, slots * C) block
    padded with -1 and partitioned once.
    """
    starts = np.flatnonzero(np.r_[True, img[1:] != img[:-1]])
    sizes = np.diff(np.r_[starts, len(img)])
    which = np.repeat(np.arange(len(starts)), sizes)
    slot = np.arange(len(img)) - starts[which]
    C = s.shape[1]
    width = sizes.max() * C
    if width <= k:
        return np.full(len(img), -np.inf)
    block = np.full((len(starts), sizes.max(), C), -1.0)
    block[which, slot] = s
    block = block.reshape(len(starts), width)
    kth = np.partition(block, width - k, axis=1)[:, width - k]
    return kth[which]


def _top_k_per_image(image_ids: np.ndarray, scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k best tuples per image.

    Input must already be in (image, proposal, class) order; two stable sorts
    give (image asc, score desc, input order asc).
    """
    order = np.argsort(-scores, kind="stable")
    order = order[np.argsort(image_ids[order], kind="stable")]
    img_sorted = image_ids[order]
    starts = np.flatnonzero(np.r_[True, img_sorted[1:] != img_sorted[:-1]])
    rank = np.arange(len(order)) - np.repeat(starts, np.diff(np.r_[starts, len(order)]))
    return np.sort(order[rank < k])


def calibrate_dataset(
    dump: Union[LogitDump, Iterable[ProposalLogits]],
    table: ClassTable,
    cfg: CalibrationConfig,
    factors: Optional[FactorTable] = None,
    max_per_image: Optional[int] = None,
) -> Detections:
    """Fan calibrated proposals out into detection tuples.

    Each proposal emits one tuple per foreground class whose calibrated score
    exceeds ``cfg.score_threshold``. Output is ordered by (image_id,
    proposal_id, class_id). ``max_per_image`` optionally keeps only the top
    tuples of each image, which is equivalent to evaluating with the same
    per-image cap and much cheaper.
    """
    if not isinstance(dump, LogitDump):
        dump = LogitDump.from_proposals(cfg.classifier_kind, dump)
    if len(dump) == 0:
        return Detections.empty()
    if dump.kind != cfg.classifier_kind:
        raise ValidationError(
            f"dump kind {dump.kind!r} does not match configured {cfg.classifier_kind!r}"
        )
    want = len(table) + 1 if cfg.classifier_kind == SOFTMAX_BG else len(table)
    if dump.width != want:
        raise ValidationError(
            f"proposal {int(dump.proposal_ids[0])} (image {int(dump.image_ids[0])}): "
            f"expected {want} logits, got {dump.width}"
        )
    bad = ~np.all(np.isfinite(dump.logits), axis=1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValidationError(
            f"proposal {int(dump.proposal_ids[i])} (image {int(dump.image_ids[i])}): "
            "non-finite logits"
        )
    if factors is None:
        factors = factors_for(cfg, table)
    if factors.class_ids != tuple(table.class_ids):
        raise ValidationError("factor table does not cover the class table")

    order = np.lexsort((dump.proposal_ids, dump.image_ids))
    class_ids = np.asarray(table.class_ids, dtype=np.int64)
    sorted_imgs = dump.image_ids[order]
    image_starts = np.flatnonzero(np.r_[True, sorted_imgs[1:] != sorted_imgs[:-1]])
    chunk = max(1, _CHUNK_CELLS // max(1, dump.width))
    parts = []
    start = 0
    while start < len(order):
        # chunks end on an image boundary so the per-image cap stays exact
        stop = start + chunk
        nxt = np.searchsorted(image_starts, stop, side="left")
        stop = int(image_starts[nxt]) if nxt < len(image_starts) else len(order)
        idx = order[start:stop]
        s = calibrated_matrix(dump.logits[idx], factors, cfg)
        passing = s > cfg.score_threshold
        if max_per_image is not None and len(idx):
            # anything below the k-th best of its image cannot survive the cap
            passing &= s >= _kth_score_per_image(s, dump.image_ids[idx], max_per_image)[:, None]
        rows, cols = np.nonzero(passing)
        vals = s[rows, cols]
        if max_per_image is not None and len(rows):
            keep = _top_k_per_image(dump.image_ids[idx[rows]], vals, max_per_image)
            rows, cols, vals = rows[keep], cols[keep], vals[keep]
        src = idx[rows]
        parts.append(Detections(dump.image_ids[src], class_ids[cols], dump.boxes[src],
                                vals, dump.proposal_ids[src]))
        start = stop
    return Detections.concat(parts)
