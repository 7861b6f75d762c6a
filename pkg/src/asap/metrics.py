"""Classification metrics, per-depth breakdowns, contribution summaries, and
the paired t-test used to compare two runs."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc


class MetricsError(ValueError):
    """Inconsistent inputs to a metrics computation."""


def confusion_matrix(predictions, golds, num_classes: int) -> np.ndarray:
    """Counts with rows = gold class, columns = predicted class."""
    predictions = np.asarray(predictions, dtype=np.int64)
    golds = np.asarray(golds, dtype=np.int64)
    if predictions.shape != golds.shape or predictions.ndim != 1:
        raise MetricsError(
            f"predictions {predictions.shape} and golds {golds.shape} must be equal-length 1-D"
        )
    if predictions.size == 0:
        raise MetricsError("cannot evaluate zero turns")
    for name, arr in (("prediction", predictions), ("gold", golds)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise MetricsError(f"{name} label outside 0..{num_classes - 1}")
    mat = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(mat, (golds, predictions), 1)
    return mat


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class EvalReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class: list[ClassMetrics]
    confusion: list[list[int]]
    num_turns: int
    per_depth: list[dict] | None = None
    contribution: dict | None = None
    t_stat: float | None = None
    p_value: float | None = None
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "per_class": [vars(c) for c in self.per_class],
            "confusion": self.confusion,
            "num_turns": self.num_turns,
        }
        if self.per_depth is not None:
            out["per_depth"] = self.per_depth
        if self.contribution is not None:
            out["contribution"] = self.contribution
        if self.t_stat is not None:
            out["t_stat"] = self.t_stat
            out["p_value"] = self.p_value
        out.update(self.extras)
        return out

    def save_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    def save_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["row", "turn", "accuracy", "macro_f1", "support"])
            writer.writerow(
                ["overall", "", f"{self.accuracy:.6f}", f"{self.macro_f1:.6f}", self.num_turns]
            )
            for row in self.per_depth or []:
                writer.writerow(
                    ["depth", row["turn"], f"{row['accuracy']:.6f}",
                     f"{row['macro_f1']:.6f}", row["support"]]
                )


def _prf(mat: np.ndarray) -> list[ClassMetrics]:
    out = []
    for k in range(mat.shape[0]):
        tp = float(mat[k, k])
        pred_k = float(mat[:, k].sum())
        gold_k = float(mat[k, :].sum())
        p = tp / pred_k if pred_k > 0 else 0.0
        r = tp / gold_k if gold_k > 0 else 0.0
        f1 = 2 * p * r / (p + r) if (p + r) > 0 else 0.0
        out.append(ClassMetrics(p, r, f1, int(gold_k)))
    return out


def evaluate(predictions, golds, num_classes: int) -> EvalReport:
    mat = confusion_matrix(predictions, golds, num_classes)
    per_class = _prf(mat)
    n = int(mat.sum())
    return EvalReport(
        accuracy=float(np.trace(mat)) / n,
        macro_precision=sum(c.precision for c in per_class) / num_classes,
        macro_recall=sum(c.recall for c in per_class) / num_classes,
        macro_f1=sum(c.f1 for c in per_class) / num_classes,
        per_class=per_class,
        confusion=mat.tolist(),
        num_turns=n,
    )


def per_turn_breakdown(predictions, golds, turn_indices, num_classes: int,
                       min_turn: int = 4) -> dict:
    """Metrics grouped by 1-based turn depth; depths below min_turn are
    suppressed from the table but still counted in the totals."""
    turn_indices = np.asarray(turn_indices, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    golds = np.asarray(golds, dtype=np.int64)
    if not (len(turn_indices) == len(predictions) == len(golds)):
        raise MetricsError("turn indices, predictions, and golds must align")
    if len(turn_indices) and turn_indices.min() < 1:
        raise MetricsError("turn indices are 1-based")
    rows = []
    for depth in sorted(set(turn_indices.tolist())):
        if depth < min_turn:
            continue
        sel = turn_indices == depth
        rep = evaluate(predictions[sel], golds[sel], num_classes)
        rows.append(
            {"turn": int(depth), "accuracy": rep.accuracy,
             "macro_f1": rep.macro_f1, "support": rep.num_turns}
        )
    return {"rows": rows, "total_turns": int(len(turn_indices))}


def summarize_contributions(values) -> dict:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise MetricsError("no contribution values to summarize")
    q1, med, q3 = np.quantile(values, [0.25, 0.5, 0.75])
    return {
        "min": float(values.min()),
        "q1": float(q1),
        "median": float(med),
        "q3": float(q3),
        "max": float(values.max()),
        "mean": float(values.mean()),
        "count": int(values.size),
    }


def paired_t_test(scores_a, scores_b) -> tuple[float, float]:
    """Two-sided paired t-test; p from the regularized incomplete beta.

    Degenerate inputs get explicit conventions instead of NaN: all differences
    zero -> (0, 1); zero variance with nonzero mean -> (+-inf, 0).
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise MetricsError("paired scores must be equal-length 1-D sequences")
    n = a.size
    if n < 2:
        raise MetricsError("paired t-test needs at least 2 pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    nu = n - 1
    p = float(betainc(nu / 2.0, 0.5, nu / (nu + t * t)))
    return float(t), p
