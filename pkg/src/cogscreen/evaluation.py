"""ROC/AUC, accuracy-maximizing thresholds, confusion metrics, and the
four-model comparison table.

AUC is computed by trapezoidal integration over the ROC curve with an
integer numerator, which makes it bit-identical to Mann-Whitney pair
counting with half credit for ties. The prediction rule is inclusive:
score >= threshold means positive. Undefined ratios (zero denominators)
are reported as absent, never NaN.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class ScoredSet:
    patient_ids: tuple[str, ...]
    scores: tuple[float, ...]
    labels: tuple[int, ...]

    def __post_init__(self):
        if not (len(self.patient_ids) == len(self.scores) == len(self.labels)):
            raise ValueError("patient_ids, scores, labels must be parallel")
        if any(l not in (0, 1) for l in self.labels):
            raise ValueError("labels must be 0/1")
        if any(not math.isfinite(s) for s in self.scores):
            raise ValueError("scores must be finite")

    def __len__(self) -> int:
        return len(self.scores)


@dataclass(frozen=True)
class MetricsReport:
    auc: Optional[float]
    threshold: float
    tp: int
    fp: int
    fn: int
    tn: int
    accuracy: float
    sensitivity: Optional[float]
    specificity: Optional[float]
    ppv: Optional[float]
    npv: Optional[float]

    def to_dict(self) -> dict:
        def enc(x):
            if isinstance(x, float) and math.isinf(x):
                return "inf" if x > 0 else "-inf"
            return x
        return {
            "auc": self.auc, "threshold": enc(self.threshold),
            "tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn,
            "accuracy": self.accuracy, "sensitivity": self.sensitivity,
            "specificity": self.specificity, "ppv": self.ppv, "npv": self.npv,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "MetricsReport":
        thr = obj["threshold"]
        if thr == "inf":
            thr = math.inf
        elif thr == "-inf":
            thr = -math.inf
        return cls(
            auc=obj["auc"], threshold=float(thr),
            tp=obj["tp"], fp=obj["fp"], fn=obj["fn"], tn=obj["tn"],
            accuracy=obj["accuracy"], sensitivity=obj["sensitivity"],
            specificity=obj["specificity"], ppv=obj["ppv"], npv=obj["npv"],
        )


def roc_auc_from_arrays(scores: np.ndarray, labels: np.ndarray) -> float:
    """Trapezoidal AUC with an exact integer numerator.

    Equals (wins + 0.5 * ties) / (P * N) over all positive-negative pairs.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = int(np.sum(labels == 1))
    neg = int(np.sum(labels == 0))
    if pos == 0 or neg == 0:
        raise ValueError("AUC needs both classes present")

    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    l_sorted = labels[order]

    numerator = 0  # 2 * P * N * AUC, kept integral
    tp_prev = 0
    i = 0
    n = len(scores)
    while i < n:
        j = i
        tp_inc = 0
        fp_inc = 0
        while j < n and s_sorted[j] == s_sorted[i]:
            if l_sorted[j] == 1:
                tp_inc += 1
            else:
                fp_inc += 1
            j += 1
        numerator += fp_inc * (2 * tp_prev + tp_inc)
        tp_prev += tp_inc
        i = j
    return numerator / (2 * pos * neg)


def roc_auc(s: ScoredSet) -> float:
    return roc_auc_from_arrays(np.array(s.scores), np.array(s.labels))


def best_accuracy_threshold(s: ScoredSet) -> tuple[float, float]:
    """Scan candidate thresholds (midpoints between distinct sorted scores
    plus +/-inf sentinels) for maximum accuracy; ties pick the higher
    threshold. Prediction rule: score >= threshold means positive."""
    if len(s) == 0:
        raise ValueError("empty scored set")
    scores = np.array(s.scores, dtype=float)
    labels = np.array(s.labels)
    n = len(scores)

    distinct = np.unique(scores)  # ascending
    candidates = [math.inf]
    for i in range(len(distinct) - 1, 0, -1):
        candidates.append((distinct[i] + distinct[i - 1]) / 2.0)
    candidates.append(-math.inf)

    best_thr = math.inf
    best_acc = -1.0
    for thr in candidates:  # descending, so first max keeps the higher threshold
        pred = scores >= thr
        acc = float(np.mean(pred == (labels == 1)))
        if acc > best_acc:
            best_acc = acc
            best_thr = thr
    return best_thr, best_acc


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den > 0 else None


def metrics_report(s: ScoredSet, threshold: float) -> MetricsReport:
    scores = np.array(s.scores, dtype=float)
    labels = np.array(s.labels)
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    tn = int(np.sum(~pred & (labels == 0)))
    n = tp + fp + fn + tn
    auc = None
    if 0 < np.sum(labels == 1) < n:
        auc = roc_auc(s)
    return MetricsReport(
        auc=auc, threshold=threshold, tp=tp, fp=fp, fn=fn, tn=tn,
        accuracy=(tp + tn) / n,
        sensitivity=_ratio(tp, tp + fn),
        specificity=_ratio(tn, tn + fp),
        ppv=_ratio(tp, tp + fp),
        npv=_ratio(tn, tn + fn),
    )


def confusion_metrics(tp: int, fp: int, fn: int, tn: int,
                      auc: Optional[float] = None,
                      threshold: float = 0.5) -> MetricsReport:
    """Metrics from raw confusion counts (e.g. a reported table row)."""
    n = tp + fp + fn + tn
    if n == 0:
        raise ValueError("empty confusion matrix")
    return MetricsReport(
        auc=auc, threshold=threshold, tp=tp, fp=fp, fn=fn, tn=tn,
        accuracy=(tp + tn) / n,
        sensitivity=_ratio(tp, tp + fn),
        specificity=_ratio(tn, tn + fp),
        ppv=_ratio(tp, tp + fp),
        npv=_ratio(tn, tn + fn),
    )


COMPARISON_COLUMNS = ("AUC", "Accuracy", "FP", "FN", "Sensitivity",
                      "Specificity", "PPV", "NPV")


@dataclass(frozen=True)
class ComparisonTable:
    rows: tuple[tuple[str, MetricsReport], ...]

    def to_markdown(self) -> str:
        """Display table with values rounded to 2 decimals; missing ratios
        render as an em-free placeholder."""
        def fmt(x):
            if x is None:
                return "--"
            if isinstance(x, int):
                return str(x)
            return f"{x:.2f}"
        lines = ["| Model | " + " | ".join(COMPARISON_COLUMNS) + " |",
                 "|" + "---|" * (len(COMPARISON_COLUMNS) + 1)]
        for name, r in self.rows:
            cells = [fmt(r.auc), fmt(r.accuracy), fmt(r.fp), fmt(r.fn),
                     fmt(r.sensitivity), fmt(r.specificity), fmt(r.ppv), fmt(r.npv)]
            lines.append("| " + name + " | " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        obj = [{"model": name, **r.to_dict()} for name, r in self.rows]
        return json.dumps(obj, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ComparisonTable":
        data = json.loads(text)
        rows = tuple(
            (row["model"], MetricsReport.from_dict({k: v for k, v in row.items()
                                                    if k != "model"}))
            for row in data
        )
        return cls(rows=rows)


def compare_models(reports: list[tuple[str, MetricsReport]]) -> ComparisonTable:
    if not reports:
        raise ValueError("need at least one report")
    return ComparisonTable(rows=tuple(reports))


# ---------------------------------------------------------------------------
# Scores CSV (patient_id, score, label)
# ---------------------------------------------------------------------------

def save_scores_csv(s: ScoredSet, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "score", "label"])
        for pid, score, label in zip(s.patient_ids, s.scores, s.labels):
            writer.writerow([pid, repr(score), label])


def load_scores_csv(path: str | Path) -> ScoredSet:
    ids: list[str] = []
    scores: list[float] = []
    labels: list[int] = []
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["patient_id", "score", "label"]:
            raise ValueError(f"{path}: expected header patient_id,score,label")
        for row in reader:
            if not row:
                continue
            ids.append(row[0])
            scores.append(float(row[1]))
            labels.append(int(row[2]))
    return ScoredSet(patient_ids=tuple(ids), scores=tuple(scores),
                     labels=tuple(labels))
