"""Region and boundary scoring plus corpus-level evaluation reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError
from .pnm import read_pgm


def jaccard(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of two binary masks; 1 when both are empty."""
    if pred.shape != gt.shape:
        raise DataError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def boundary(mask: np.ndarray) -> np.ndarray:
    """One-pixel boundary under 4-connectivity; frame edges count as outside."""
    m = mask.astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return m & ~interior


def default_tolerance(shape: tuple) -> int:
    """0.8% of the image diagonal, rounded up."""
    h, w = shape[:2]
    return math.ceil(0.008 * math.hypot(h, w))


def boundary_f(pred: np.ndarray, gt: np.ndarray, tolerance_px: float | None = None) -> float:
    """F-measure of boundary pixels matched within a distance tolerance."""
    if pred.shape != gt.shape:
        raise DataError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if tolerance_px is None:
        tolerance_px = default_tolerance(pred.shape)
    pb = boundary(pred)
    gb = boundary(gt)
    np_pred = int(pb.sum())
    np_gt = int(gb.sum())
    if np_pred == 0 and np_gt == 0:
        return 1.0
    if np_pred == 0 or np_gt == 0:
        return 0.0
    dist_to_gt = ndimage.distance_transform_edt(~gb)
    dist_to_pred = ndimage.distance_transform_edt(~pb)
    precision = float((dist_to_gt[pb] <= tolerance_px).mean())
    recall = float((dist_to_pred[gb] <= tolerance_px).mean())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass
class EvalReport:
    per_object: dict = field(default_factory=dict)   # (seq, obj) -> {"J","F","JF"}
    sequence_splits: dict = field(default_factory=dict)
    invalid: list = field(default_factory=list)      # (seq, reason)

    def _mean(self, key: str, split: str | None = None) -> float:
        values = [
            scores[key]
            for (seq, _), scores in self.per_object.items()
            if split is None or self.sequence_splits.get(seq) == split
        ]
        return float(np.mean(values)) if values else float("nan")

    @property
    def mean_j(self) -> float:
        return self._mean("J")

    @property
    def mean_f(self) -> float:
        return self._mean("F")

    @property
    def mean_jf(self) -> float:
        return self._mean("JF")

    def split_mean(self, key: str, split: str) -> float:
        return self._mean(key, split)


def _read_split(seq_dir: Path) -> str:
    meta = seq_dir / "meta.txt"
    if meta.exists():
        for line in meta.read_text().splitlines():
            if line.replace(" ", "").startswith("split="):
                return line.split("=", 1)[1].strip()
    return "train"


def evaluate(pred_dir, gt_dir) -> EvalReport:
    """Score every sequence of ``gt_dir`` against predictions in ``pred_dir``.

    Frame 0 carries the annotation and is excluded.  Sequences with
    missing prediction frames are reported invalid and skipped.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    report = EvalReport()
    seq_dirs = sorted(d for d in gt_dir.iterdir() if (d / "masks").is_dir())
    if not seq_dirs:
        raise DataError(f"{gt_dir}: no sequences to evaluate")
    for seq_dir in seq_dirs:
        name = seq_dir.name
        report.sequence_splits[name] = _read_split(seq_dir)
        gt_files = sorted((seq_dir / "masks").glob("*.pgm"))
        missing = [
            f.name for f in gt_files[1:]
            if not (pred_dir / name / "masks" / f.name).exists()
        ]
        if missing:
            report.invalid.append((name, f"missing prediction frames: {missing}"))
            continue
        gt_first = read_pgm(gt_files[0])
        ids = [int(v) for v in np.unique(gt_first) if v != 0]
        scores = {obj: {"J": [], "F": []} for obj in ids}
        for f in gt_files[1:]:
            gt = read_pgm(f)
            pred = read_pgm(pred_dir / name / "masks" / f.name)
            for obj in ids:
                scores[obj]["J"].append(jaccard(pred == obj, gt == obj))
                scores[obj]["F"].append(boundary_f(pred == obj, gt == obj))
        for obj in ids:
            j = float(np.mean(scores[obj]["J"]))
            f_score = float(np.mean(scores[obj]["F"]))
            report.per_object[(name, obj)] = {"J": j, "F": f_score, "JF": (j + f_score) / 2.0}
    return report


def format_report(report: EvalReport) -> str:
    lines = [f"{'sequence':<16} {'object':>6} {'J':>8} {'F':>8} {'J&F':>8}"]
    for (seq, obj), s in sorted(report.per_object.items()):
        lines.append(f"{seq:<16} {obj:>6} {s['J']:>8.4f} {s['F']:>8.4f} {s['JF']:>8.4f}")
    lines.append("")
    lines.append(f"mean J   {report.mean_j:.4f}")
    lines.append(f"mean F   {report.mean_f:.4f}")
    lines.append(f"mean J&F {report.mean_jf:.4f}")
    splits = sorted({s for s in report.sequence_splits.values()})
    for split in splits:
        jf = report.split_mean("JF", split)
        if not math.isnan(jf):
            lines.append(f"{split:<8} J&F {jf:.4f} (J {report.split_mean('J', split):.4f}, "
                         f"F {report.split_mean('F', split):.4f})")
    for seq, reason in report.invalid:
        lines.append(f"INVALID {seq}: {reason}")
    return "\n".join(lines) + "\n"


def report_to_json(report: EvalReport) -> str:
    payload = {
        "per_object": [
            {"sequence": seq, "object": obj, **scores}
            for (seq, obj), scores in sorted(report.per_object.items())
        ],
        "mean": {"J": report.mean_j, "F": report.mean_f, "JF": report.mean_jf},
        "splits": {
            split: {
                "J": report.split_mean("J", split),
                "F": report.split_mean("F", split),
                "JF": report.split_mean("JF", split),
            }
            for split in sorted(set(report.sequence_splits.values()))
        },
        "invalid": [{"sequence": seq, "reason": reason} for seq, reason in report.invalid],
    }
    return json.dumps(payload, indent=2, allow_nan=True)
