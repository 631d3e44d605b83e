"""Command-line entry point: ``norcal <subcommand> [flags]``.

Exit codes: 0 success, 1 invalid flags, 2 input validation failure,
3 internal invariant violation. Errors are reported on stderr as one JSON
object ``{"error": ..., "message": ..., "exit_code": ...}``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import warnings
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

from . import __version__
from . import io as nio
from .calib import (
    CDT,
    CUSTOM,
    ENS,
    MECHANISMS,
    NONE,
    DIVIDE_EXPONENTIAL,
    CalibrationConfig,
    calibrate_dataset,
)
from .core import (
    BUCKETS,
    SOFTMAX_BG,
    InvariantError,
    NorcalError,
    ValidationError,
    build_class_table,
)
from .evaluation import PER_CLASS_FIXED, PER_IMAGE, EvalConfig, Evaluator, score_statistics
from .synth import SynthParams, gen_scenario
from .tune import OBJECTIVES, parse_grid, sweep_gamma

EXIT_OK, EXIT_FLAGS, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2, 3

CAP_CURVE = (10, 50, 100, 300)


class FlagError(Exception):
    """Bad command-line usage (exit 1)."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on usage errors; we reserve 2 for bad inputs
    def error(self, message):
        raise FlagError(f"{self.prog}: {message}")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _flag(fn, *args, **kw):
    """Build a config object; a ValidationError here means a bad flag value."""
    try:
        return fn(*args, **kw)
    except ValidationError as e:
        raise FlagError(str(e)) from None


def _parse_factor(text: str):
    if text.startswith(CUSTOM + ":"):
        path = text[len(CUSTOM) + 1:]
        if not path:
            raise FlagError("--factor custom:PATH needs a path")
        return CUSTOM, path
    if text in (CDT, ENS, NONE):
        return text, None
    raise FlagError(f"--factor must be cdt, ens, none or custom:PATH, got {text!r}")


def _parse_cap(text: str) -> EvalConfig:
    mode, _, k = text.partition(":")
    try:
        k = int(k)
    except ValueError:
        raise FlagError(f"--cap must look like image:K or class:M, got {text!r}") from None
    if mode == "image":
        return _flag(EvalConfig, cap_mode=PER_IMAGE, max_dets=k)
    if mode == "class":
        return _flag(EvalConfig, cap_mode=PER_CLASS_FIXED, max_dets=k)
    raise FlagError(f"--cap must look like image:K or class:M, got {text!r}")


def _iou_thresholds(lo: float, hi: float, step: float):
    if step <= 0 or hi < lo:
        raise FlagError("need --iou-min <= --iou-max and --iou-step > 0")
    n = int(round((hi - lo) / step)) + 1
    return tuple(round(lo + i * step, 10) for i in range(n))


def _format_for(path: str) -> str:
    return "csv" if path.lower().endswith(".csv") else "structured"


def _header(args: argparse.Namespace) -> Dict[str, Any]:
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")}
    return {"tool": "norcal", "version": __version__, "command": args.command, "flags": flags}


def _write_meta(path: str, header: Dict[str, Any]) -> None:
    Path(path + ".meta.json").write_text(json.dumps(header, indent=1) + "\n")


# -- subcommands ----------------------------------------------------------------

def cmd_class_table(args) -> None:
    if args.rare_max < 1 or args.common_max <= args.rare_max:
        raise FlagError("need 1 <= --rare-max < --common-max")
    gt = nio.load_ground_truth(args.train_annotations)
    table = build_class_table(gt, args.rare_max, args.common_max)
    nio.save_class_table(table, args.out)


def cmd_calibrate(args) -> None:
    factor, factor_path = _parse_factor(args.factor)
    # the classifier kind is only known once the dump header is read, so
    # validate everything else against the softmax kind first
    _flag(CalibrationConfig, mechanism=args.mechanism, factor=factor, gamma=args.gamma,
          factor_path=factor_path, beta=args.beta, score_threshold=args.threshold)
    table = nio.load_class_table(args.class_table)
    kind, dump = nio.load_logit_dump(args.dump, table)
    normalize = (kind == SOFTMAX_BG) if args.normalize is None else args.normalize
    with warnings.catch_warnings():
        warnings.simplefilter("ignore" if args.normalize is None else "default")
        cfg = CalibrationConfig(kind, args.mechanism, factor, args.gamma, factor_path,
                                normalize, args.beta, args.threshold)
    dets = calibrate_dataset(dump, table, cfg)
    nio.write_results(dets, args.out)
    header = _header(args)
    header["resolved"] = {"classifier_kind": kind, "normalize": normalize}
    _write_meta(args.out, header)


def cmd_evaluate(args) -> None:
    cfg = _parse_cap(args.cap)
    cfg = _flag(dataclasses.replace, cfg,
                iou_thresholds=_iou_thresholds(args.iou_min, args.iou_max, args.iou_step))
    table = nio.load_class_table(args.class_table)
    gt = nio.load_ground_truth(args.annotations)
    dets = nio.load_results(args.results)
    report = Evaluator(gt, table, cfg).evaluate(dets)
    nio.write_report(report, args.out, _format_for(args.out), _header(args), table)


def cmd_sweep(args) -> None:
    grid = _flag(parse_grid, args.grid) if args.grid else None
    base = _flag(CalibrationConfig, factor=args.factor)
    if args.subset is not None and args.subset < 1:
        raise FlagError("--subset must be >= 1")
    table = nio.load_class_table(args.class_table)
    gt = nio.load_ground_truth(args.train_annotations)
    kind, dump = nio.load_logit_dump(args.dump, table)
    base = dataclasses.replace(base, classifier_kind=kind, normalize=kind == SOFTMAX_BG)
    result = sweep_gamma(dump, gt, table, base, grid, subset_size=args.subset,
                         seed=args.seed, objective=args.objective)
    nio.write_report(result, args.out, _format_for(args.out), _header(args))


def cmd_analyze(args) -> None:
    if args.top_k < 1:
        raise FlagError("--top-k must be >= 1")
    table = nio.load_class_table(args.class_table)
    dets = nio.load_results(args.results)
    stats = score_statistics(dets, table, args.top_k)
    doc: Dict[str, Any] = {"header": _header(args), "score_statistics": stats}
    out = Path(args.out)
    stem = out.with_suffix("")

    rows = [[b, stats["bucket_mean"][b], stats["bucket_mean_raw"][b], stats["rare_tuples"][b]]
            for b in BUCKETS]
    nio.write_csv(rows, f"{stem}_scores.csv",
                  ["bucket", "mean_score_rel", "mean_score", "score_on_rare_proposals"])

    if args.annotations:
        gt = nio.load_ground_truth(args.annotations)
        caps = sorted(set(CAP_CURVE) | {args.top_k})
        curve = []
        for k in caps:
            s = Evaluator(gt, table, EvalConfig(max_dets=k)).evaluate(dets).summary()
            curve.append(dict(cap=k, **s))
        at_k = next(c for c in curve if c["cap"] == args.top_k)
        doc["ar"] = {k: v for k, v in at_k.items() if k.startswith("ar")}
        doc["cap_curve"] = curve
        keys = ["ap", "ap_rare", "ap_common", "ap_frequent", "ar", "ar_rare", "ar_common",
                "ar_frequent"]
        nio.write_csv([[c["cap"]] + [c[k] for k in keys] for c in curve],
                      f"{stem}_cap_curve.csv", ["cap"] + keys)
        nio.write_csv([["overall", at_k["ar"]]] + [[b, at_k[f"ar_{b}"]] for b in BUCKETS],
                      f"{stem}_ar.csv", ["scope", "ar"])

    out.write_text(json.dumps(doc, indent=1) + "\n")


def cmd_synth(args) -> None:
    try:
        raw = json.loads(Path(args.params).read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"{args.params}: invalid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ValidationError(f"{args.params}: expected a JSON object")
    known = {f.name for f in dataclasses.fields(SynthParams)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValidationError(f"{args.params}: unknown parameters {unknown}")
    for key in ("counts", "image_size"):
        if raw.get(key) is not None:
            raw[key] = tuple(raw[key])
    try:
        params = SynthParams(**raw)
    except TypeError as e:
        raise ValidationError(f"{args.params}: {e}") from None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    # the validation split uses the next seed and shares the frequency law
    for split, seed in (("train", params.seed), ("val", params.seed + 1)):
        gt, table, dump = gen_scenario(dataclasses.replace(params, seed=seed))
        nio.save_ground_truth(gt, out / f"{split}_annotations.json")
        nio.save_logit_dump(dump, out / f"{split}_dump.jsonl", table.class_ids)
    nio.save_class_table(table, out / "law_class_table.json")
    (out / "params.json").write_text(json.dumps(dataclasses.asdict(params), indent=1) + "\n")


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="norcal", description="Post-hoc calibration for long-tailed detection.")
    p.add_argument("--version", action="version", version=f"norcal {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("class-table", help="count training images per class")
    s.add_argument("--train-annotations", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--rare-max", type=int, default=10)
    s.add_argument("--common-max", type=int, default=100)
    s.set_defaults(func=cmd_class_table)

    s = sub.add_parser("calibrate", help="turn a logit dump into calibrated detections")
    s.add_argument("--dump", required=True)
    s.add_argument("--class-table", required=True)
    s.add_argument("--factor", default=CDT, help="cdt | ens | none | custom:PATH")
    s.add_argument("--gamma", type=float, default=0.0)
    s.add_argument("--beta", type=float, default=1.0)
    s.add_argument("--mechanism", choices=MECHANISMS, default=DIVIDE_EXPONENTIAL)
    s.add_argument("--normalize", type=_bool, default=None,
                   help="default: true for softmax dumps, false for sigmoid dumps")
    s.add_argument("--threshold", type=float, default=1e-4)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("evaluate", help="AP / AR of a results file")
    s.add_argument("--results", required=True)
    s.add_argument("--annotations", required=True)
    s.add_argument("--class-table", required=True)
    s.add_argument("--cap", default="image:300", help="image:K (per image) or class:M (AP-Fixed)")
    s.add_argument("--iou-min", type=float, default=0.5)
    s.add_argument("--iou-max", type=float, default=0.95)
    s.add_argument("--iou-step", type=float, default=0.05)
    s.add_argument("--out", required=True, help="report path; a .csv suffix selects CSV")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="grid-search gamma on training detections")
    s.add_argument("--dump", required=True)
    s.add_argument("--train-annotations", required=True)
    s.add_argument("--class-table", required=True)
    s.add_argument("--factor", choices=(CDT, ENS), default=CDT)
    s.add_argument("--grid", help="start:step:stop or comma list (default depends on --factor)")
    s.add_argument("--subset", type=int, help="number of training images to sample")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--objective", choices=OBJECTIVES, default="ap_overall")
    s.add_argument("--out", required=True, help="report path; a .csv suffix selects CSV")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("analyze", help="per-bucket score statistics and cap curves")
    s.add_argument("--results", required=True)
    s.add_argument("--class-table", required=True)
    s.add_argument("--top-k", type=int, default=300)
    s.add_argument("--annotations", help="enables the AR table and the cap-vs-AP curve")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("synth", help="write a synthetic train/val scenario")
    s.add_argument("--params", required=True, help="JSON object of generator parameters")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)
    return p


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except FlagError as e:
        return _fail("invalid_flags", str(e), EXIT_FLAGS)
    except InvariantError as e:
        return _fail("invariant_violation", str(e), EXIT_INTERNAL)
    except (NorcalError, OSError, ValueError) as e:
        return _fail("invalid_input", str(e), EXIT_INPUT)
    except Exception as e:  # noqa: BLE001 - anything else is our bug
        return _fail("internal_error", f"{type(e).__name__}: {e}", EXIT_INTERNAL)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
