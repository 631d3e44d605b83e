"""Post-hoc normalized calibration of long-tailed detector scores, with evaluation tooling."""

from .core import (
    Box,
    ClassTable,
    DetectionTuple,
    Detections,
    GroundTruthSet,
    LogitDump,
    ProposalLogits,
    ValidationError,
    bucket_of,
    build_class_table,
)
from .calib import CalibrationConfig, FactorTable, calibrate_dataset, factor_cdt, factor_ens
from .evaluation import EvalConfig, MetricsReport, evaluate
from .tune import SweepResult, sweep_gamma

__version__ = "0.1.0"
