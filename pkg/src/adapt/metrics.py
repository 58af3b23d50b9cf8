"""Multilabel grading metrics and the prototype diagnostics built on them."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .aggregation import bag_probabilities
from .cohort import CLASSES, GRADES, PatchDataset, WsiBag
from .errors import DomainError
from .model import ModelState, forward_from_similarities, patch_similarities

THRESHOLD = 0.5


@dataclass
class EvalResult:
    f1: dict[int, float]
    macro_f1: float
    hamming: float
    counts: dict[int, tuple[int, int, int, int]]  # grade -> (tp, fp, fn, tn)
    n_bags: int = 0

    def to_dict(self) -> dict:
        return {
            "f1": {str(g): v for g, v in self.f1.items()},
            "macro_f1": self.macro_f1,
            "hamming": self.hamming,
            "counts": {str(g): dict(zip(("tp", "fp", "fn", "tn"), c)) for g, c in self.counts.items()},
            "n_bags": self.n_bags,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_csv(self, header_comment: str | None = None) -> str:
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["grade", "f1", "tp", "fp", "fn", "tn"])
        for g in GRADES:
            w.writerow([g, repr(self.f1[g]), *self.counts[g]])
        w.writerow(["macro", repr(self.macro_f1), "", "", "", ""])
        w.writerow(["hamming", repr(self.hamming), "", "", "", ""])
        return buf.getvalue()


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def score_predictions(y_true: np.ndarray, y_pred: np.ndarray) -> EvalResult:
    """F1 per grade, macro F1 and Hamming loss for ``(B, 3)`` boolean arrays."""
    y_true = np.asarray(y_true).astype(bool)
    y_pred = np.asarray(y_pred).astype(bool)
    if y_true.shape != y_pred.shape or y_true.ndim != 2 or y_true.shape[1] != len(GRADES):
        raise DomainError(f"expected matching (B, 3) label arrays, got {y_true.shape} and {y_pred.shape}")
    if y_true.shape[0] == 0:
        raise DomainError("cannot score an empty bag list")
    f1, counts = {}, {}
    for c, g in enumerate(GRADES):
        t, p = y_true[:, c], y_pred[:, c]
        tp, fp = int(np.sum(t & p)), int(np.sum(~t & p))
        fn, tn = int(np.sum(t & ~p)), int(np.sum(~t & ~p))
        counts[g] = (tp, fp, fn, tn)
        f1[g] = f1_from_counts(tp, fp, fn)
    macro = float(np.mean([f1[g] for g in GRADES]))
    return EvalResult(f1, macro, float(np.mean(y_true != y_pred)), counts, y_true.shape[0])


def score_probabilities(bag_probs: np.ndarray, targets: np.ndarray, threshold: float = THRESHOLD) -> EvalResult:
    return score_predictions(targets, bag_probs > threshold)


def targets_of(bags: list[WsiBag]) -> np.ndarray:
    return np.array([b.target for b in bags], dtype=np.float64).reshape(len(bags), len(GRADES))


def evaluate(model: ModelState, bags: list[WsiBag], threshold: float = THRESHOLD, j: int = 5, attention: bool | None = None) -> EvalResult:
    if not bags:
        raise DomainError("cannot evaluate on an empty bag list")
    return score_probabilities(bag_probabilities(model, bags, j, attention), targets_of(bags), threshold)


@dataclass
class CrossActivationMatrix:
    values: np.ndarray  # (4, 4), rows = true patch class, columns = prototype class
    counts: np.ndarray  # patches per row
    absent: list[int] = field(default_factory=list)

    def diagonal_dominant(self) -> bool:
        """Every present row has its diagonal entry strictly above all others."""
        for r in range(len(CLASSES)):
            if CLASSES[r] in self.absent:
                continue
            row = self.values[r]
            if not np.all(row[r] > np.delete(row, r)):
                return False
        return True

    def to_dict(self) -> dict:
        return {
            "classes": list(CLASSES),
            "values": [[None if np.isnan(v) else float(v) for v in row] for row in self.values],
            "counts": [int(c) for c in self.counts],
            "absent": list(self.absent),
        }

    def to_csv(self, header_comment: str | None = None) -> str:
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true_class", *[f"proto_{c}" for c in CLASSES], "patches"])
        for r, c in enumerate(CLASSES):
            w.writerow([c, *["" if np.isnan(v) else repr(float(v)) for v in self.values[r]], int(self.counts[r])])
        return buf.getvalue()


def cross_activation(model: ModelState, patches: PatchDataset, attention: bool | None = None) -> CrossActivationMatrix:
    """Mean over true-class-r patches of the largest weighted similarity among class-c prototypes."""
    md, ps = patch_similarities(model, patches.cells)
    weighted = forward_from_similarities(model, ps, md, attention).ps_w
    per_class = np.stack([weighted[:, model.class_of == c].max(axis=1) for c in CLASSES], axis=1)
    values = np.full((len(CLASSES), len(CLASSES)), np.nan)
    counts = np.zeros(len(CLASSES), dtype=np.int64)
    absent = []
    for r, c in enumerate(CLASSES):
        rows = patches.grades == c
        counts[r] = int(rows.sum())
        if counts[r] == 0:
            absent.append(c)
            continue
        values[r] = per_class[rows].mean(axis=0)
    return CrossActivationMatrix(values, counts, absent)


def low_attention_fraction(model: ModelState, bags: list[WsiBag], threshold: float = THRESHOLD, j: int = 5) -> dict:
    """Share of each grade's prototypes whose importance score is strictly below ``threshold``."""
    from .stage3 import prototype_importance

    importance = prototype_importance(model, bags, j)
    out = {}
    for g in GRADES:
        scores = [s for _, s in importance[g].ranking]
        out[g] = float(np.mean(np.array(scores) < threshold)) if scores else float("nan")
    valid = [v for v in out.values() if not np.isnan(v)]
    out["overall"] = float(np.mean(valid)) if valid else float("nan")
    return out
