"""Grid search of the calibration strength on training-split detections."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .calib import CDT, ENS, CalibrationConfig, calibrate_dataset, check_gamma
from .core import ClassTable, GroundTruthSet, LogitDump, ValidationError
from .evaluation import PER_IMAGE, EvalConfig, Evaluator, MetricsReport

OBJECTIVES = ("ap_overall", "ap_rare")

Objective = Union[str, Mapping[str, float], Callable[[MetricsReport], float]]


@dataclass(frozen=True)
class SweepResult:
    grid: Tuple[float, ...]
    metric_curve: Dict[float, MetricsReport]
    best_gamma: float
    objective: str

    def values(self) -> Dict[float, float]:
        return {g: objective_value(self.metric_curve[g], self.objective) for g in self.grid}


def default_grid(factor: str) -> Tuple[float, ...]:
    stop = 1.5 if factor == CDT else 0.95
    n = int(round(stop / 0.05)) + 1
    return tuple(round(0.05 * i, 2) for i in range(n))


def parse_grid(spec: str) -> Tuple[float, ...]:
    """``start:step:stop`` (inclusive) or a comma-separated list."""
    try:
        if ":" in spec:
            start, step, stop = (float(v) for v in spec.split(":"))
            if step <= 0:
                raise ValueError
            n = int(np.floor((stop - start) / step + 1e-9)) + 1
            return tuple(round(start + i * step, 10) for i in range(n))
        return tuple(float(v) for v in spec.split(",") if v.strip())
    except ValueError:
        raise ValidationError(f"bad grid spec: {spec!r}") from None


def objective_value(report: MetricsReport, objective: Objective) -> float:
    if callable(objective):
        return float(objective(report))
    if isinstance(objective, Mapping):
        summary = report.summary()
        return sum(w * (summary[k] or 0.0) for k, w in objective.items())
    if objective == "ap_overall":
        return report.ap_overall or 0.0
    if objective == "ap_rare":
        return report.ap_rare or 0.0
    raise ValidationError(f"unknown objective: {objective!r}")


def _objective_name(objective: Objective) -> str:
    if isinstance(objective, str):
        return objective
    if isinstance(objective, Mapping):
        return "+".join(f"{w:g}*{k}" for k, w in objective.items())
    return "custom"


def subsample(
    dump: LogitDump, gt: GroundTruthSet, size: Optional[int], seed: int
) -> Tuple[LogitDump, GroundTruthSet]:
    """Seeded uniform sample of ``size`` images from the ground truth."""
    if size is None or size >= len(gt.images):
        return dump, gt
    if size < 1:
        raise ValidationError("subset size must be >= 1")
    ids = np.array(sorted(im.image_id for im in gt.images))
    chosen = np.sort(np.random.default_rng(seed).choice(ids, size=size, replace=False))
    return dump.select(np.isin(dump.image_ids, chosen)), gt.subset(chosen.tolist())


def _sweep(dump, gt, table, base_cfg, values, field, eval_cfg, objective, subset_size, seed):
    eval_cfg = eval_cfg or EvalConfig()
    dump, gt = subsample(dump, gt, subset_size, seed)
    evaluator = Evaluator(gt, table, eval_cfg)
    pre_cap = eval_cfg.max_dets if eval_cfg.cap_mode == PER_IMAGE else None
    curve: Dict[float, MetricsReport] = {}
    for v in values:
        cfg = dataclasses.replace(base_cfg, **{field: v})
        dets = calibrate_dataset(dump, table, cfg, max_per_image=pre_cap)
        curve[v] = evaluator.evaluate(dets)
    scores = [objective_value(curve[v], objective) for v in values]
    # values are sorted, so the first maximum is the smallest one
    best = values[int(np.argmax(scores))]
    return curve, best


def sweep_gamma(
    dump: LogitDump,
    gt_train: GroundTruthSet,
    table: ClassTable,
    base_cfg: CalibrationConfig,
    grid: Optional[Sequence[float]] = None,
    eval_cfg: Optional[EvalConfig] = None,
    subset_size: Optional[int] = None,
    seed: int = 0,
    objective: Objective = "ap_overall",
) -> SweepResult:
    """Evaluate every gamma in ``grid`` and keep the best (ties go to the smallest).

    Zero is always added to the grid, so the winner is never worse than the
    uncalibrated detector on the tuning split.
    """
    if base_cfg.factor not in (CDT, ENS):
        raise ValidationError("gamma sweeps need a cdt or ens factor")
    grid = default_grid(base_cfg.factor) if grid is None else tuple(grid)
    if not grid:
        raise ValidationError("empty gamma grid")
    for g in grid:
        try:
            check_gamma(base_cfg.factor, g)
        except ValidationError as e:
            raise ValidationError(f"invalid grid point {g}: {e}") from None
    values = tuple(sorted(set(float(g) for g in grid) | {0.0}))
    curve, best = _sweep(dump, gt_train, table, base_cfg, values, "gamma", eval_cfg,
                         objective, subset_size, seed)
    return SweepResult(values, curve, best, _objective_name(objective))


def sweep_beta(
    dump: LogitDump,
    gt_train: GroundTruthSet,
    table: ClassTable,
    base_cfg: CalibrationConfig,
    betas: Sequence[float],
    eval_cfg: Optional[EvalConfig] = None,
    subset_size: Optional[int] = None,
    seed: int = 0,
    objective: Objective = "ap_overall",
) -> SweepResult:
    """Background-multiplier sweep at the fixed gamma of ``base_cfg``.

    The result reuses ``SweepResult``; ``grid``/``best_gamma`` hold beta values.
    """
    values = tuple(sorted(set(float(b) for b in betas)))
    if not values or values[0] < 0:
        raise ValidationError("betas must be a non-empty list of values >= 0")
    curve, best = _sweep(dump, gt_train, table, base_cfg, values, "beta", eval_cfg,
                         objective, subset_size, seed)
    return SweepResult(values, curve, best, _objective_name(objective))
