"""Localization and classification scores."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .detect import MatchResult


@dataclass
class ScoreReport:
    recall: float
    precision: float
    overall_accuracy: float
    kappa: float
    confusion: list[list[int]]
    timings: dict[str, float] = field(default_factory=dict)
    # Names of scores that were undefined and reported as 0 (or nan for kappa).
    flags: list[str] = field(default_factory=list)

    def to_dict(self, include_timings: bool = True) -> dict:
        d = asdict(self)
        if not include_timings:
            d.pop("timings")
        return d


def localization_scores(match: MatchResult) -> tuple[float, float, list[str]]:
    """``(recall, precision, flags)``; precision with no detections is 0 and flagged."""
    flags = []
    recall = match.n_matched / match.n_truth if match.n_truth else 0.0
    if match.n_truth == 0:
        flags.append("recall_undefined")
    if match.n_detections == 0:
        precision = 0.0
        flags.append("precision_undefined")
    else:
        precision = match.n_matched / match.n_detections
    return recall, precision, flags


def confusion_matrix(labels_true, labels_pred, n_classes: int | None = None) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    t = np.asarray(labels_true, dtype=int)
    p = np.asarray(labels_pred, dtype=int)
    if t.shape != p.shape:
        raise ValueError("label lists differ in length")
    if n_classes is None:
        n_classes = int(max(t.max(initial=-1), p.max(initial=-1))) + 1
    C = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(C, (t, p), 1)
    return C


def scores_from_confusion(C) -> tuple[float, float]:
    """``(OA, kappa)``; both nan for an empty matrix."""
    C = np.asarray(C, dtype=float)
    total = C.sum()
    if total == 0:
        return math.nan, math.nan
    po = np.trace(C) / total
    pe = float(C.sum(axis=1) @ C.sum(axis=0)) / total ** 2
    if pe == 1.0:
        # Every item in one class on both sides: perfect agreement.
        return po, 1.0
    return po, (po - pe) / (1.0 - pe)


def classification_scores(labels_pred, labels_true, n_classes: int | None = None):
    """``(OA, kappa, confusion)`` over matched pairs only."""
    C = confusion_matrix(labels_true, labels_pred, n_classes)
    oa, kappa = scores_from_confusion(C)
    return oa, kappa, C


def write_report(report: ScoreReport, path, extra: dict | None = None, include_timings: bool = True) -> None:
    data = report.to_dict(include_timings)
    if extra:
        data.update(extra)
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, allow_nan=True) + "\n")


def write_confusion(C, names, path) -> None:
    C = np.asarray(C)
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred", *names])
        for name, row in zip(names, C):
            w.writerow([name, *[int(v) for v in row]])
