"""Readers and writers for annotations, logit dumps, factor tables, results and reports.

Annotation files are a subset of the COCO schema (``bbox`` is always
``[x, y, w, h]`` from the top-left corner). Logit dumps are JSON lines: a
header record ``{"kind": ..., "n_classes": ...}`` followed by one record per
proposal. Factor tables are ``class_id,factor`` text lines.
"""

from __future__ import annotations

import csv
import io as _io
import json
import math
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import (
    CLASSIFIER_KINDS,
    SOFTMAX_BG,
    Annotation,
    Box,
    ClassEntry,
    ClassTable,
    Detections,
    GroundTruthSet,
    Image,
    LogitDump,
    ValidationError,
)

PathLike = Union[str, Path]


def _sig6(x: Optional[float]) -> Optional[float]:
    if x is None:
        return None
    return float(f"{x:.6g}")


def _read_json(path: PathLike) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from None


def _write_text(path: PathLike, text: str) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as e:
        raise ValidationError(f"cannot write {path}: {e.strerror}") from None


def _dumps(obj: Any) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def _field(obj: Dict, key: str, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise ValidationError(f"missing required field: {where}.{key}")
    return obj[key]


def _parse_box(raw, where: str) -> Box:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise ValidationError(f"{where}: bbox must be [x, y, w, h]")
    try:
        return Box(*(float(v) for v in raw))
    except (TypeError, ValueError) as e:
        raise ValidationError(f"{where}: {e}") from None


# -- ground truth -------------------------------------------------------------

def load_ground_truth(path: PathLike) -> GroundTruthSet:
    doc = _read_json(path)
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: top level must be an object")
    images, anns, cats = [], [], []
    for i, im in enumerate(_field(doc, "images", "$")):
        where = f"$.images[{i}]"
        images.append(Image(int(_field(im, "id", where)), float(im.get("width", 0)),
                            float(im.get("height", 0))))
    for i, c in enumerate(_field(doc, "categories", "$")):
        where = f"$.categories[{i}]"
        cid = int(_field(c, "id", where))
        cats.append((cid, str(c.get("name", cid))))
    image_ids = {im.image_id for im in images}
    dangling = []
    for i, a in enumerate(_field(doc, "annotations", "$")):
        where = f"$.annotations[{i}]"
        ann_id = int(_field(a, "id", where))
        try:
            box = _parse_box(_field(a, "bbox", where), f"annotation {ann_id}")
        except ValidationError as e:
            raise ValidationError(f"{where}: {e}") from None
        img = int(_field(a, "image_id", where))
        if img not in image_ids:
            dangling.append(img)
        ignore = bool(a.get("ignore", False)) or bool(a.get("iscrowd", 0))
        anns.append(Annotation(ann_id, img, int(_field(a, "category_id", where)), box, ignore))
    if dangling:
        raise ValidationError(
            "dangling image_id: " + ", ".join(str(i) for i in sorted(set(dangling)))
        )
    return GroundTruthSet(tuple(images), tuple(anns), tuple(cats))


def save_ground_truth(gt: GroundTruthSet, path: PathLike) -> None:
    doc = {
        "images": [{"id": im.image_id, "width": im.width, "height": im.height}
                   for im in gt.images],
        "annotations": [
            {"id": a.ann_id, "image_id": a.image_id, "category_id": a.class_id,
             "bbox": a.box.as_list(), "ignore": a.ignore}
            for a in gt.annotations
        ],
        "categories": [{"id": c, "name": n} for c, n in gt.categories],
    }
    _write_text(path, _dumps(doc) + "\n")


# -- class table --------------------------------------------------------------

def save_class_table(table: ClassTable, path: PathLike) -> None:
    doc = {
        "thresholds": {"rare_max": table.rare_max, "common_max": table.common_max},
        "classes": [
            {"id": e.class_id, "name": e.name, "n_images": e.n_images, "bucket": b}
            for e, b in zip(table.entries, table.buckets())
        ],
    }
    _write_text(path, json.dumps(doc, indent=1) + "\n")


def load_class_table(path: PathLike) -> ClassTable:
    doc = _read_json(path)
    thr = doc.get("thresholds", {}) if isinstance(doc, dict) else {}
    entries = []
    for i, c in enumerate(_field(doc, "classes", "$")):
        where = f"$.classes[{i}]"
        cid = int(_field(c, "id", where))
        entries.append(ClassEntry(cid, str(c.get("name", cid)), int(_field(c, "n_images", where))))
    return ClassTable(tuple(entries), int(thr.get("rare_max", 10)), int(thr.get("common_max", 100)))


# -- logit dumps --------------------------------------------------------------

def _dump_header(fh, path) -> Tuple[str, int, Optional[List[int]]]:
    line = fh.readline()
    if not line.strip():
        raise ValidationError(f"{path}:1: missing header record")
    try:
        head = json.loads(line)
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}:1: invalid header: {e.msg}") from None
    kind = head.get("kind") if isinstance(head, dict) else None
    if kind not in CLASSIFIER_KINDS:
        raise ValidationError(f"{path}:1: header kind must be one of {CLASSIFIER_KINDS}")
    n = head.get("n_classes")
    if not isinstance(n, int) or n < 1:
        raise ValidationError(f"{path}:1: header n_classes must be a positive integer")
    return kind, n, head.get("class_ids")


def iter_logit_dump(path: PathLike) -> Iterator[Tuple[str, int, int, List[float], List[float]]]:
    """Stream (kind, image_id, proposal_id, bbox, logits) without loading the file."""
    with open(path, "r", encoding="utf-8") as fh:
        kind, n, _ = _dump_header(fh, path)
        width = n + 1 if kind == SOFTMAX_BG else n
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                img, pid = int(rec["image_id"]), int(rec["proposal_id"])
                box, logits = rec["bbox"], rec["logits"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ValidationError(f"{path}:{lineno}: malformed record ({e})") from None
            if not isinstance(box, list) or len(box) != 4:
                raise ValidationError(f"{path}:{lineno}: bbox must be [x, y, w, h]")
            if not isinstance(logits, list) or len(logits) != width:
                got = len(logits) if isinstance(logits, list) else "non-list"
                raise ValidationError(
                    f"{path}:{lineno}: expected {width} logits for {kind}, got {got}"
                )
            try:
                vals = [float(v) for v in logits]
            except (TypeError, ValueError):
                raise ValidationError(f"{path}:{lineno}: non-numeric logit") from None
            if not all(math.isfinite(v) for v in vals):
                raise ValidationError(f"{path}:{lineno}: non-finite logit")
            yield kind, img, pid, [float(v) for v in box], vals


def load_logit_dump(path: PathLike, table: Optional[ClassTable] = None) -> Tuple[str, LogitDump]:
    with open(path, "r", encoding="utf-8") as fh:
        kind, n, class_ids = _dump_header(fh, path)
    if table is not None:
        if n != len(table):
            raise ValidationError(
                f"{path}:1: header declares {n} classes, class table has {len(table)}"
            )
        if class_ids is not None and list(class_ids) != table.class_ids:
            raise ValidationError(f"{path}:1: header class_ids do not match the class table order")
    imgs, pids, boxes, logits = [], [], [], []
    for _, img, pid, box, vals in iter_logit_dump(path):
        imgs.append(img)
        pids.append(pid)
        boxes.append(box)
        logits.append(vals)
    width = n + 1 if kind == SOFTMAX_BG else n
    arr = np.array(logits, dtype=np.float64).reshape(-1, width)
    return kind, LogitDump(kind, np.array(imgs), np.array(pids), np.array(boxes), arr)


def save_logit_dump(dump: LogitDump, path: PathLike, class_ids: Optional[Sequence[int]] = None) -> None:
    n = dump.width - 1 if dump.kind == SOFTMAX_BG else dump.width
    head: Dict[str, Any] = {"kind": dump.kind, "n_classes": n}
    if class_ids is not None:
        head["class_ids"] = [int(c) for c in class_ids]
    lines = [_dumps(head)]
    for i in range(len(dump)):
        lines.append(_dumps({
            "image_id": int(dump.image_ids[i]), "proposal_id": int(dump.proposal_ids[i]),
            "bbox": dump.boxes[i].tolist(), "logits": dump.logits[i].tolist(),
        }))
    _write_text(path, "\n".join(lines) + "\n")


# -- factor tables ------------------------------------------------------------

def load_factor_table(path: PathLike, table: ClassTable):
    """Read ``class_id,factor`` lines; blank lines and ``#`` comments are skipped."""
    from .calib import FactorTable

    factors: Dict[int, float] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.replace("\t", ",").split(",")]
            if lineno == 1 and parts[0].lower() in ("class_id", "id"):
                continue
            try:
                cid, val = int(parts[0]), float(parts[1])
            except (IndexError, ValueError):
                raise ValidationError(f"{path}:{lineno}: expected 'class_id,factor'") from None
            if not (val > 0 and math.isfinite(val)):
                raise ValidationError(f"{path}:{lineno}: non-positive factor for class {cid}")
            factors[cid] = val
    return FactorTable.from_mapping(factors, table)


def save_factor_table(a: Dict[int, float], path: PathLike) -> None:
    lines = ["class_id,factor"] + [f"{cid},{repr(float(v))}" for cid, v in sorted(a.items())]
    _write_text(path, "\n".join(lines) + "\n")


# -- results ------------------------------------------------------------------

def write_results(tuples, path: PathLike) -> None:
    """Detection results as a COCO-style JSON array (scores round-trip exactly)."""
    d = Detections.from_tuples(tuples)
    if not np.all(np.isfinite(d.boxes)) or not np.all(np.isfinite(d.scores)):
        raise ValidationError("results contain non-finite values")
    # float repr is what json.dumps emits; formatting directly is much faster
    rows = [
        f'{{"image_id":{i},"category_id":{c},"bbox":[{b[0]!r},{b[1]!r},{b[2]!r},{b[3]!r}],'
        f'"score":{s!r},"proposal_id":{p}}}'
        for i, c, b, s, p in zip(d.image_ids.tolist(), d.class_ids.tolist(), d.boxes.tolist(),
                                 d.scores.tolist(), d.proposal_ids.tolist())
    ]
    _write_text(path, "[" + ",\n".join(rows) + "]\n")


def load_results(path: PathLike) -> Detections:
    doc = _read_json(path)
    if not isinstance(doc, list):
        raise ValidationError(f"{path}: results must be a JSON array")
    if not doc:
        return Detections.empty()
    imgs, cls, boxes, scores, pids = [], [], [], [], []
    try:
        for i, r in enumerate(doc):
            imgs.append(int(r["image_id"]))
            cls.append(int(r["category_id"]))
            boxes.append(r["bbox"])
            scores.append(float(r["score"]))
            pids.append(int(r.get("proposal_id", i)))
    except (KeyError, TypeError, ValueError) as e:
        r = doc[len(pids)]
        for key in ("image_id", "category_id", "bbox", "score"):
            _field(r, key, f"$[{len(pids)}]")
        raise ValidationError(f"$[{len(pids)}]: {e}") from None
    try:
        box_arr = np.array(boxes, dtype=np.float64).reshape(len(boxes), 4)
    except (TypeError, ValueError):
        bad = next(i for i, b in enumerate(boxes) if not isinstance(b, list) or len(b) != 4)
        raise ValidationError(f"$[{bad}]: bbox must be [x, y, w, h]") from None
    score_arr = np.array(scores, dtype=np.float64)
    bad = np.flatnonzero(~(np.isfinite(score_arr) & (score_arr >= 0)))
    if len(bad):
        raise ValidationError(f"$[{bad[0]}].score: must be finite and >= 0")
    bad = np.flatnonzero(~np.all(np.isfinite(box_arr), axis=1) | np.any(box_arr[:, 2:] < 0, axis=1))
    if len(bad):
        raise ValidationError(f"$[{bad[0]}].bbox: must be finite with w, h >= 0")
    return Detections(np.array(imgs), np.array(cls), box_arr, score_arr, np.array(pids))


# -- reports ------------------------------------------------------------------

def _report_doc(report) -> Dict[str, Any]:
    from .evaluation import MetricsReport
    from .tune import SweepResult

    if isinstance(report, MetricsReport):
        return {
            "summary": {k: _sig6(v) for k, v in report.summary().items()},
            "per_class": [
                {"class_id": cid, "ap": _sig6(m.ap), "ar": _sig6(m.ar),
                 "n_gt": m.n_gt, "n_det": m.n_det}
                for cid, m in sorted(report.per_class.items())
            ],
        }
    if isinstance(report, SweepResult):
        return {
            "objective": report.objective,
            "best_gamma": report.best_gamma,
            "grid": list(report.grid),
            "curve": [
                dict(gamma=g, **{k: _sig6(v) for k, v in report.metric_curve[g].summary().items()})
                for g in report.grid
            ],
        }
    raise TypeError(f"cannot serialize {type(report).__name__}")


def write_report(
    report,
    path: PathLike,
    format: str = "structured",
    header: Optional[Dict[str, Any]] = None,
    table: Optional[ClassTable] = None,
) -> None:
    """Write a MetricsReport or SweepResult as JSON ("structured") or CSV.

    ``header`` (e.g. the invoking flags) is embedded so the file describes
    how it was produced. CSV metric reports have one row per class followed
    by overall and per-bucket summary rows.
    """
    from .evaluation import MetricsReport

    doc = _report_doc(report)
    if format == "structured":
        out = dict(header=header or {}, **doc)
        _write_text(path, json.dumps(out, indent=1, allow_nan=False) + "\n")
        return
    if format != "csv":
        raise ValidationError(f"unknown report format: {format!r}")

    buf = _io.StringIO()
    for k, v in (header or {}).items():
        buf.write(f"# {k}: {v}\n")
    w = csv.writer(buf, lineterminator="\n")

    def cell(v):
        return "" if v is None else f"{v:.6g}" if isinstance(v, float) else v

    if isinstance(report, MetricsReport):
        buckets = dict(zip(table.class_ids, table.buckets())) if table is not None else {}
        w.writerow(["scope", "class_id", "bucket", "ap", "ar", "n_gt", "n_det"])
        for row in doc["per_class"]:
            cid = row["class_id"]
            w.writerow(["class", cid, buckets.get(cid, ""), cell(row["ap"]), cell(row["ar"]),
                        row["n_gt"], row["n_det"]])
        s = doc["summary"]
        w.writerow(["overall", "", "", cell(s["ap"]), cell(s["ar"]), "", ""])
        for b in ("rare", "common", "frequent"):
            w.writerow([b, "", b, cell(s[f"ap_{b}"]), cell(s[f"ar_{b}"]), "", ""])
    else:
        keys = ["ap", "ap_rare", "ap_common", "ap_frequent", "ar", "ar_rare", "ar_common",
                "ar_frequent"]
        w.writerow(["gamma"] + keys + ["best"])
        for row in doc["curve"]:
            w.writerow([cell(float(row["gamma"]))] + [cell(row[k]) for k in keys]
                       + [int(row["gamma"] == doc["best_gamma"])])
    _write_text(path, buf.getvalue())


def write_csv(rows: Sequence[Sequence[Any]], path: PathLike, header: Sequence[str]) -> None:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if v is None else f"{v:.6g}" if isinstance(v, float) else v for v in r])
    _write_text(path, buf.getvalue())


def load_report(path: PathLike):
    """Read back a structured MetricsReport written by ``write_report``."""
    from .evaluation import ClassMetrics, MetricsReport

    doc = _read_json(path)
    s = _field(doc, "summary", "$")
    per_class = {
        int(r["class_id"]): ClassMetrics(r["ap"], r["ar"], int(r["n_gt"]), int(r["n_det"]))
        for r in _field(doc, "per_class", "$")
    }
    return MetricsReport(
        s["ap"], s["ap_rare"], s["ap_common"], s["ap_frequent"],
        s["ar"], s["ar_rare"], s["ar_common"], s["ar_frequent"], per_class,
    )
