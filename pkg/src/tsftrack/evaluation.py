"""One-pass evaluation: overlap / center error per frame, success and
precision curves, AUC, precision@20, attribute slices and comparison tables.

Conventions: success is ``#{OS > t} / n`` on 21 thresholds 0, 0.05, ..., 1
and AUC is the mean of those values; precision is ``#{PE < t} / n`` on
thresholds 0..50 px. Frames without a valid ground-truth box are dropped
from numerator and denominator. Curves pool all frames by default.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, center_error, iou

REPORT_SCHEMA = "tsftrack-report/1"
SUCCESS_THRESHOLDS = np.arange(21) / 20.0
PRECISION_THRESHOLDS = np.arange(51, dtype=np.float64)

__all__ = [
    "MetricCurve",
    "SequenceResult",
    "per_frame_metrics",
    "success_curve",
    "precision_curve",
    "build_report",
    "ope_run",
    "evaluate_result_files",
    "compare_report",
    "table_to_csv",
    "table_from_csv",
    "format_table",
]


@dataclass
class MetricCurve:
    thresholds: list
    values: list
    auc: float

    def at(self, threshold: float) -> float:
        idx = int(np.argmin(np.abs(np.asarray(self.thresholds) - threshold)))
        return float(self.values[idx])

    def to_dict(self) -> dict:
        return {"thresholds": [float(t) for t in self.thresholds],
                "values": [float(v) for v in self.values], "auc": float(self.auc)}


@dataclass
class SequenceResult:
    id: str
    os: list
    pe: list
    attributes: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if len(self.os) != len(self.pe):
            raise ValueError("OS and PE lists differ in length")


def per_frame_metrics(pred, gt, seq_id: str = "", attributes=()) -> SequenceResult:
    """OS/PE for every frame that has a ground-truth box.

    A missing prediction (``None``) counts as OS 0 and infinite PE.
    """
    if len(pred) != len(gt):
        raise ValueError(f"{seq_id}: {len(pred)} predictions for {len(gt)} ground-truth frames")
    os_, pe = [], []
    for p, g in zip(pred, gt):
        if g is None:
            continue
        if p is None:
            os_.append(0.0)
            pe.append(math.inf)
        else:
            os_.append(iou(p, g))
            pe.append(center_error(p, g))
    return SequenceResult(seq_id, os_, pe, frozenset(attributes))


def _as_results(results) -> list[SequenceResult]:
    if isinstance(results, SequenceResult):
        return [results]
    return list(results)


def _curve(results, key, thresholds, count, per_sequence: bool) -> MetricCurve:
    results = _as_results(results)
    if not results:
        raise ValueError("no results to summarise")
    if per_sequence:
        rows = [count(np.asarray(getattr(r, key), dtype=np.float64), thresholds)
                for r in results if len(getattr(r, key))]
        values = np.mean(rows, axis=0) if rows else np.zeros(len(thresholds))
    else:
        data = np.concatenate([np.asarray(getattr(r, key), dtype=np.float64) for r in results])
        values = count(data, thresholds) if data.size else np.zeros(len(thresholds))
    return MetricCurve(list(thresholds), [float(v) for v in values], float(np.mean(values)))


def _success_counts(os_, thresholds):
    return np.array([np.count_nonzero(os_ > t) / os_.size for t in thresholds])


def _precision_counts(pe, thresholds):
    return np.array([np.count_nonzero(pe < t) / pe.size for t in thresholds])


def success_curve(results, per_sequence: bool = False) -> MetricCurve:
    curve = _curve(results, "os", SUCCESS_THRESHOLDS, _success_counts, per_sequence)
    assert np.all(np.diff(curve.values) <= 1e-12), "success curve must be non-increasing"
    return curve


def precision_curve(results, per_sequence: bool = False) -> MetricCurve:
    curve = _curve(results, "pe", PRECISION_THRESHOLDS, _precision_counts, per_sequence)
    assert np.all(np.diff(curve.values) >= -1e-12), "precision curve must be non-decreasing"
    return curve


def _summary(results, per_sequence=False) -> dict:
    s = success_curve(results, per_sequence)
    p = precision_curve(results, per_sequence)
    return {"auc": s.auc, "precision_at_20": p.at(20.0),
            "frames": int(sum(len(r.os) for r in _as_results(results))),
            "curves": {"success": s.to_dict(), "precision": p.to_dict()}}


def build_report(tracker: str, dataset: str, results: list[SequenceResult], fps: dict | None = None,
                 missing=(), per_sequence: bool = False) -> dict:
    """Assemble the versioned report dict (JSON-serialisable)."""
    results = sorted(results, key=lambda r: r.id)
    fps = fps or {}
    summary = _summary(results, per_sequence)
    total_frames = sum(fps.get(r.id, (0, 0.0))[0] for r in results)
    total_time = sum(fps.get(r.id, (0, 0.0))[1] for r in results)
    report = {
        "schema": REPORT_SCHEMA,
        "tracker": tracker,
        "dataset": dataset,
        "aggregation": "per_sequence" if per_sequence else "pooled",
        "auc": summary["auc"],
        "precision_at_20": summary["precision_at_20"],
        "fps": (total_frames / total_time) if total_time > 0 else None,
        "frames": summary["frames"],
        "curves": summary["curves"],
        "per_sequence": {},
        "attributes": {},
        "missing": sorted(missing),
    }
    for r in results:
        entry = {"auc": success_curve(r).auc, "precision_at_20": precision_curve(r).at(20.0),
                 "frames": len(r.os), "attributes": sorted(r.attributes),
                 "os": [float(v) for v in r.os], "pe": [float(v) if math.isfinite(v) else None for v in r.pe]}
        if r.id in fps and fps[r.id][1] > 0:
            entry["fps"] = fps[r.id][0] / fps[r.id][1]
        report["per_sequence"][r.id] = entry
    tags = sorted({t for r in results for t in r.attributes})
    for tag in tags:
        subset = [r for r in results if tag in r.attributes]
        s = _summary(subset, per_sequence)
        report["attributes"][tag] = {"auc": s["auc"], "precision_at_20": s["precision_at_20"],
                                     "frames": s["frames"], "sequences": [r.id for r in subset],
                                     "curves": s["curves"]}
    return report


def ope_run(records, track_fn, tracker: str = "tracker", dataset: str = "dataset",
            per_sequence: bool = False) -> dict:
    """Run ``track_fn(record) -> SequenceRun`` on every record (initialised
    from the first ground-truth box) and build the report."""
    results, fps = [], {}
    for rec in sorted(records, key=lambda r: r.id):
        run = track_fn(rec)
        results.append(per_frame_metrics(run.boxes, rec.gt, rec.id, rec.attributes))
        fps[rec.id] = (len(run.frame_seconds), float(sum(run.frame_seconds)))
    return build_report(tracker, dataset, results, fps, per_sequence=per_sequence)


def evaluate_result_files(records, results_dir, tracker: str = "tracker", dataset: str = "dataset",
                          fmt: str = "xywh", per_sequence: bool = False) -> dict:
    """Score stored ``<id>.txt`` result files against ``records``.

    Sequences without a result file are listed under ``missing``.
    """
    from pathlib import Path

    from .data_io import parse_results

    results_dir = Path(results_dir)
    results, fps, missing = [], {}, []
    for rec in sorted(records, key=lambda r: r.id):
        path = results_dir / f"{rec.id}.txt"
        if not path.exists():
            missing.append(rec.id)
            continue
        pred = parse_results(path, fmt)
        if len(pred) != len(rec):
            raise ValueError(f"{path}: {len(pred)} boxes for {len(rec)} frames")
        results.append(per_frame_metrics(pred, rec.gt, rec.id, rec.attributes))
        side = path.with_suffix(".json")
        if side.exists():
            info = json.loads(side.read_text())
            if info.get("frame_seconds"):
                fps[rec.id] = (len(info["frame_seconds"]), float(sum(info["frame_seconds"])))
    if not results:
        raise ValueError(f"no result files for any sequence in {results_dir}")
    return build_report(tracker, dataset, results, fps, missing, per_sequence)


TABLE_FIELDS = ["tracker", "dataset", "auc", "precision_at_20", "fps"]


def compare_report(reports: list[dict]) -> list[dict]:
    """One row per report, best AUC first (ties broken by tracker name)."""
    if not reports:
        raise ValueError("need at least one report")
    rows = [{"tracker": r["tracker"], "dataset": r.get("dataset", ""), "auc": float(r["auc"]),
             "precision_at_20": float(r["precision_at_20"]),
             "fps": None if r.get("fps") is None else float(r["fps"])} for r in reports]
    return sorted(rows, key=lambda row: (-row["auc"], row["tracker"]))


def table_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=TABLE_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if row[k] is None else repr(row[k]) if isinstance(row[k], float) else row[k])
                         for k in TABLE_FIELDS})
    return buf.getvalue()


def table_from_csv(text: str) -> list[dict]:
    rows = []
    for row in csv.DictReader(io.StringIO(text)):
        rows.append({"tracker": row["tracker"], "dataset": row["dataset"], "auc": float(row["auc"]),
                     "precision_at_20": float(row["precision_at_20"]),
                     "fps": float(row["fps"]) if row["fps"] else None})
    return rows


def format_table(rows: list[dict]) -> str:
    head = f"{'Tracker':<24}{'AUC':>8}{'Prec@20':>10}{'FPS':>9}"
    lines = [head, "-" * len(head)]
    for row in rows:
        fps = "-" if row["fps"] is None else f"{row['fps']:.1f}"
        lines.append(f"{row['tracker']:<24}{row['auc']:>8.3f}{row['precision_at_20']:>10.3f}{fps:>9}")
    return "\n".join(lines)
