"""Evaluation metrics over the 8 scored emotion classes.

Scoring always works on consensus hard labels in the 8-class space
("other" and no-agreement samples are filtered out upstream). Average
precision uses the deterministic tie-break of ascending sample index, and
a class with no gold and no predicted instances scores F1 = 0, so fully
absent classes depress macro-F1 rather than silently inflating it.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .labels import SCORED_CLASSES, MINORITY_CLASSES

N_SCORED = len(SCORED_CLASSES)


@dataclass
class MetricsReport:
    """All evaluation numbers for one run over one sample set."""

    accuracy: float
    macro_f1: float
    per_class_precision: list[float]
    per_class_recall: list[float]
    per_class_f1: list[float]
    per_class_ap: dict[str, float]
    minority_map: float | None
    confusion: np.ndarray
    n_scored: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "per_class_precision": self.per_class_precision,
            "per_class_recall": self.per_class_recall,
            "per_class_f1": self.per_class_f1,
            "per_class_ap": self.per_class_ap,
            "minority_map": self.minority_map,
            "confusion": self.confusion.tolist(),
            "n_scored": self.n_scored,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "MetricsReport":
        return cls(
            accuracy=obj["accuracy"],
            macro_f1=obj["macro_f1"],
            per_class_precision=list(obj["per_class_precision"]),
            per_class_recall=list(obj["per_class_recall"]),
            per_class_f1=list(obj["per_class_f1"]),
            per_class_ap=dict(obj["per_class_ap"]),
            minority_map=obj["minority_map"],
            confusion=np.asarray(obj["confusion"], dtype=np.int64),
            n_scored=obj["n_scored"],
        )

    def write_json(self, path: str | os.PathLike) -> None:
        path = os.fspath(path)
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")
        os.replace(tmp, path)

    def write_confusion_csv(self, path: str | os.PathLike) -> None:
        """Emit the 8x8 confusion matrix as CSV (rows gold, columns predicted)."""
        path = os.fspath(path)
        names = [c.label for c in SCORED_CLASSES]
        lines = ["gold\\pred," + ",".join(names)]
        for i, name in enumerate(names):
            lines.append(name + "," + ",".join(str(int(v)) for v in self.confusion[i]))
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        os.replace(tmp, path)


def _check_classes(values: list[int], what: str) -> None:
    for v in values:
        if not 0 <= int(v) < N_SCORED:
            raise DataError(f"{what} class {v} outside the 8 scored classes")


def confusion_matrix(gold: list[int], pred: list[int]) -> np.ndarray:
    """8x8 count matrix with rows indexed by gold class, columns by prediction."""
    if len(gold) != len(pred):
        raise DataError(f"gold/pred length mismatch: {len(gold)} vs {len(pred)}")
    if not gold:
        raise DataError("cannot score an empty sample set")
    _check_classes(gold, "gold")
    _check_classes(pred, "predicted")
    matrix = np.zeros((N_SCORED, N_SCORED), dtype=np.int64)
    for g, p in zip(gold, pred):
        matrix[int(g), int(p)] += 1
    return matrix


def macro_f1(gold: list[int], pred: list[int]) -> tuple[float, dict[str, list[float]]]:
    """Unweighted mean F1 over the 8 classes, plus the per-class breakdown.

    Per class: precision = TP/(TP+FP), recall = TP/(TP+FN), and
    F1 = 2PR/(P+R); every ratio is defined as 0 when its denominator is 0.
    """
    matrix = confusion_matrix(gold, pred)
    precisions, recalls, f1s = [], [], []
    for c in range(N_SCORED):
        tp = float(matrix[c, c])
        pred_c = float(matrix[:, c].sum())
        gold_c = float(matrix[c, :].sum())
        precision = tp / pred_c if pred_c > 0 else 0.0
        recall = tp / gold_c if gold_c > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        precisions.append(precision)
        recalls.append(recall)
        f1s.append(f1)
    breakdown = {"precision": precisions, "recall": recalls, "f1": f1s}
    return float(np.mean(f1s)), breakdown


def average_precision(scores: list[float], positives: list[bool]) -> float | None:
    """AP = mean of precision@k over the ranks k holding a positive.

    Samples are ranked by descending score with ties broken by ascending
    input index, which makes the value deterministic. Returns None when
    there are no positives (the class is skipped by callers).
    """
    if len(scores) != len(positives):
        raise DataError(f"scores/positives length mismatch: {len(scores)} vs {len(positives)}")
    flags = np.asarray(positives, dtype=bool)
    n_pos = int(flags.sum())
    if n_pos == 0:
        return None
    values = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(len(values)), -values))
    ranked = flags[order]
    hits = np.cumsum(ranked)
    ranks = np.arange(1, len(values) + 1)
    return float((hits[ranked] / ranks[ranked]).sum() / n_pos)


def minority_map(gold: list[int], probs: np.ndarray) -> float | None:
    """Mean AP over the four minority classes, each scored by its probability column.

    Classes without a gold positive are skipped; returns None when none of
    the four has a positive.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] != len(gold):
        raise DataError(f"probs must be (n_samples, n_classes) aligned with gold, got {probs.shape}")
    _check_classes(list(gold), "gold")
    aps = []
    for cls in sorted(MINORITY_CLASSES):
        ap = average_precision(probs[:, cls].tolist(), [g == cls for g in gold])
        if ap is not None:
            aps.append(ap)
    if not aps:
        return None
    return float(np.mean(aps))


def compute_report(gold: list[int], probs: np.ndarray) -> MetricsReport:
    """Score per-sample probability vectors against consensus gold labels.

    Predictions are the argmax over the 8 scored classes ("other" never
    wins the argmax even if its probability is highest).
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] != len(gold):
        raise DataError(f"probs must be (n_samples, n_classes) aligned with gold, got {probs.shape}")
    pred = [int(np.argmax(row[:N_SCORED])) for row in probs]
    gold = [int(g) for g in gold]
    matrix = confusion_matrix(gold, pred)
    macro, breakdown = macro_f1(gold, pred)
    per_class_ap = {}
    for cls in SCORED_CLASSES:
        ap = average_precision(probs[:, cls].tolist(), [g == int(cls) for g in gold])
        if ap is not None:
            per_class_ap[cls.label] = ap
    return MetricsReport(
        accuracy=float(np.trace(matrix) / matrix.sum() * 100.0),
        macro_f1=macro,
        per_class_precision=breakdown["precision"],
        per_class_recall=breakdown["recall"],
        per_class_f1=breakdown["f1"],
        per_class_ap=per_class_ap,
        minority_map=minority_map(gold, probs),
        confusion=matrix,
        n_scored=len(gold),
    )
