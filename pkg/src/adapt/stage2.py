"""Slide-level fine-tuning from bag labels.

Patch probabilities for each grade are pooled by a top-j mean. The objective
is multilabel BCE on the pooled probabilities plus two prototype-aware terms
built from (bag, grade) threshold errors:

* alignment, for missed grades (y = 1, b < 0.5): pull the most confident
  patch's nearest same-grade prototype distance down;
* repulsion, for spurious grades (y = 0, b > 0.5): push every patch with
  p > 0.5 away from that grade's prototypes.

Only bag labels are used; patch and cell ground truth are stripped on entry.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .aggregation import GRADE_COLUMNS, aggregate_topj, bag_probabilities, stack_bags, topj_indices
from .cohort import GRADES, WsiBag
from .errors import ConfigError, NumericError
from .metrics import score_probabilities, targets_of
from .model import Forward, ModelState, backward, forward
from .protolayer import CLASS_INDEX
from .seeding import substream
from .training import Optimizer, TrainReport, check_finite, minibatches

__all__ = [
    "Stage2Config",
    "WsiForward",
    "aggregate_topj",
    "topj_indices",
    "bag_forwards",
    "alignment_loss",
    "repulsion_loss",
    "wsi_loss",
    "train_stage2",
]

logger = logging.getLogger(__name__)

BCE_FLOOR = 1e-12
LOG_COLUMNS = ["epoch", "bce", "align", "repel", "total", "val_f1_macro", "val_hamming"]


@dataclass
class Stage2Config:
    j: int = 5
    lambda_align: float = 0.05
    lambda_repel: float = 0.02
    epochs: int = 25
    batch_size: int = 8
    lr: float = 1e-4
    threshold: float = 0.5
    train_prototypes: bool = False

    def validate(self) -> None:
        if not 3 <= self.j <= 7:
            raise ConfigError(f"stage2.j must lie in [3, 7], got {self.j}")
        if self.lambda_align < 0 or self.lambda_repel < 0:
            raise ConfigError("stage2 loss weights must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("stage2.epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0:
            raise ConfigError("stage2.lr must be >= 0")
        if not 0 < self.threshold < 1:
            raise ConfigError("stage2.threshold must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class WsiForward:
    patch_probs: np.ndarray  # (l, 4)
    bag_probs: np.ndarray  # (3,) over grades 3, 4, 5
    topj: tuple  # per grade, indices into the bag
    class_md: np.ndarray  # (l, 4) min distance to each class's prototypes
    class_arg: np.ndarray  # (l, 4) prototype index attaining it (first wins)

    def grade_probs(self, c: int) -> np.ndarray:
        return self.patch_probs[:, GRADE_COLUMNS[c]]


def class_min_distances(md: np.ndarray, class_of: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per patch and class, the smallest prototype distance and which prototype gives it."""
    n = md.shape[0]
    out = np.empty((n, 4))
    arg = np.empty((n, 4), dtype=np.int64)
    for c, cls in enumerate(CLASS_INDEX):
        idx = np.flatnonzero(class_of == cls)
        local = np.argmin(md[:, idx], axis=1)
        arg[:, c] = idx[local]
        out[:, c] = md[np.arange(n), arg[:, c]]
    return out, arg


def split_forward(fwd: Forward, offsets: np.ndarray, class_of: np.ndarray, j: int) -> list[WsiForward]:
    cmd, carg = class_min_distances(fwd.md, class_of)
    out = []
    for n in range(offsets.size - 1):
        sl = slice(offsets[n], offsets[n + 1])
        probs = fwd.probs[sl]
        top = tuple(topj_indices(probs[:, col], j) for col in GRADE_COLUMNS)
        b = np.array([probs[t, col].mean() for t, col in zip(top, GRADE_COLUMNS)])
        out.append(WsiForward(probs, b, top, cmd[sl], carg[sl]))
    return out


def bag_forwards(model: ModelState, bags: list[WsiBag], j: int, attention: bool | None = None):
    """Batched forward over every patch of ``bags``; returns (forward, offsets, per-bag views)."""
    x, offsets = stack_bags(bags)
    fwd = forward(model, x, attention)
    return fwd, offsets, split_forward(fwd, offsets, model.class_of, j)


def _events(wsis: list[WsiForward], targets: np.ndarray, threshold: float):
    b = np.array([w.bag_probs for w in wsis])
    fn = (targets == 1) & (b < threshold)
    fp = (targets == 0) & (b > threshold)
    return fn, fp


def alignment_loss(wsis: list[WsiForward], targets: np.ndarray, threshold: float = 0.5) -> float:
    return _alignment(wsis, np.asarray(targets), threshold)[0]


def _alignment(wsis, targets, threshold):
    """Mean over missed (bag, grade) events of the best patch's nearest same-grade prototype distance."""
    fn, _ = _events(wsis, targets, threshold)
    picks = []
    for n, c in zip(*np.nonzero(fn)):
        w = wsis[n]
        i_star = int(np.argmax(w.grade_probs(c)))
        col = GRADE_COLUMNS[c]
        picks.append((n, i_star, int(w.class_arg[i_star, col]), float(w.class_md[i_star, col])))
    if not picks:
        return 0.0, []
    return float(np.mean([p[3] for p in picks])), [(n, i, g, 1.0 / len(picks)) for n, i, g, _ in picks]


def repulsion_loss(wsis: list[WsiForward], targets: np.ndarray, threshold: float = 0.5) -> float:
    return _repulsion(wsis, np.asarray(targets), threshold)[0]


def _repulsion(wsis, targets, threshold):
    """Minus the mean offending-patch distance, averaged over spurious (bag, grade) events."""
    _, fp = _events(wsis, targets, threshold)
    n_fp = int(fp.sum())
    if n_fp == 0:
        return 0.0, []
    total, coefs = 0.0, []
    for n, c in zip(*np.nonzero(fp)):
        w = wsis[n]
        offending = np.flatnonzero(w.grade_probs(c) > threshold)
        if offending.size == 0:
            logger.debug("bag %d grade %d crosses the threshold without any single patch doing so", n, GRADES[c])
            continue
        col = GRADE_COLUMNS[c]
        total -= float(w.class_md[offending, col].mean())
        for i in offending:
            coefs.append((n, int(i), int(w.class_arg[i, col]), -1.0 / (offending.size * n_fp)))
    return total / n_fp, coefs


def bce(b: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean multilabel BCE over (bag, grade) pairs and its gradient in b; clamped entries get no gradient."""
    clipped = np.clip(b, BCE_FLOOR, 1.0 - BCE_FLOOR)
    live = clipped == b
    loss = -(y * np.log(clipped) + (1 - y) * np.log1p(-clipped))
    grad = np.where(live, (clipped - y) / (clipped * (1.0 - clipped)), 0.0) / b.size
    return float(loss.mean()), grad


@dataclass
class WsiLoss:
    total: float
    bce: float
    align: float
    repel: float
    n_fn: int
    n_fp: int


def wsi_loss(wsis: list[WsiForward], targets: np.ndarray, cfg: Stage2Config) -> WsiLoss:
    return _wsi_loss(wsis, np.asarray(targets, dtype=np.float64), cfg)[0]


def _wsi_loss(wsis, targets, cfg):
    """Loss value, per-bag partials w.r.t. patch probabilities, and (bag, patch, prototype, coef) distance partials."""
    b = np.array([w.bag_probs for w in wsis])
    l_bce, g_b = bce(b, targets)
    l_align, align_coefs = _alignment(wsis, targets, cfg.threshold)
    l_repel, repel_coefs = _repulsion(wsis, targets, cfg.threshold)
    total = l_bce + cfg.lambda_align * l_align + cfg.lambda_repel * l_repel
    for name, val in (("bce", l_bce), ("alignment", l_align), ("repulsion", l_repel)):
        if not math.isfinite(val):
            raise NumericError(f"stage-2 {name} term is non-finite")
    fn, fp = _events(wsis, targets, cfg.threshold)

    g_probs = [np.zeros_like(w.patch_probs) for w in wsis]
    for n, w in enumerate(wsis):
        for c, (top, col) in enumerate(zip(w.topj, GRADE_COLUMNS)):
            g_probs[n][top, col] += g_b[n, c] / top.size
    terms = [(cfg.lambda_align, align_coefs), (cfg.lambda_repel, repel_coefs)]
    md_entries = [(n, i, g, lam * coef) for lam, coefs in terms for n, i, g, coef in coefs]
    parts = WsiLoss(total, l_bce, l_align, l_repel, int(fn.sum()), int(fp.sum()))
    return parts, g_probs, md_entries


def loss_and_grad(model: ModelState, bags: list[WsiBag], cfg: Stage2Config, wrt=("encoder", "fc")):
    """Stage-2 batch loss and its gradient over the requested parameter groups."""
    fwd, offsets, wsis = bag_forwards(model, bags, cfg.j, attention=False)
    targets = targets_of(bags)
    parts, g_probs, md_entries = _wsi_loss(wsis, targets, cfg)
    g_md = np.zeros_like(fwd.md)
    for n, i, g, coef in md_entries:
        g_md[offsets[n] + i, g] += coef
    grads = backward(model, fwd, g_probs=np.concatenate(g_probs), g_md=g_md, wrt=wrt)
    return parts, grads


def selection_key(result, val_bce: float) -> tuple:
    return (-result.macro_f1, result.hamming, val_bce)


def validate_model(model: ModelState, bags: list[WsiBag], j: int, attention: bool | None = None):
    b = bag_probabilities(model, bags, j, attention)
    y = targets_of(bags)
    return score_probabilities(b, y), bce(b, y)[0]


def train_stage2(train_bags: list[WsiBag], val_bags: list[WsiBag], model: ModelState, cfg: Stage2Config, seed: int = 0):
    """Fine-tune encoder and FC head on bag labels; returns the best-validation model and its log."""
    cfg.validate()
    if model.stage < 1 or any(p is None for p in model.provenance):
        raise ConfigError("stage 2 needs a model that completed stage 1")
    train_bags = [b.stripped() for b in train_bags]
    val_bags = [b.stripped() for b in val_bags]
    model = model.copy()
    model.stage = 2
    groups = ["encoder", "fc"] + (["prototypes"] if cfg.train_prototypes else [])
    rng = substream(seed, "shuffle-stage2")
    n = len(train_bags)
    per_epoch = math.ceil(n / cfg.batch_size)
    opt = Optimizer(model.params, model.group_names(groups), cfg.lr, per_epoch * cfg.epochs)

    report = TrainReport(stage=2, columns=LOG_COLUMNS)
    val, val_bce = validate_model(model, val_bags, cfg.j, attention=False)
    best_key, best_model, best_epoch = selection_key(val, val_bce), model.copy(), 0
    report.log(epoch=0, val_f1_macro=val.macro_f1, val_hamming=val.hamming)
    for epoch in range(1, cfg.epochs + 1):
        sums = dict.fromkeys(("bce", "align", "repel", "total"), 0.0)
        for batch in minibatches(n, cfg.batch_size, rng):
            parts, grads = loss_and_grad(model, [train_bags[i] for i in batch], cfg, wrt=groups)
            check_finite(parts.total, best_model, "stage-2 loss")
            model = opt.step(model, grads)
            w = batch.size / n
            for key in sums:
                sums[key] += w * getattr(parts, key)
        val, val_bce = validate_model(model, val_bags, cfg.j, attention=False)
        report.log(epoch=epoch, **sums, val_f1_macro=val.macro_f1, val_hamming=val.hamming)
        key = selection_key(val, val_bce)
        if key < best_key:
            best_key, best_model, best_epoch = key, model.copy(), epoch
    report.best_epoch = best_epoch
    val, val_bce = validate_model(best_model, val_bags, cfg.j, attention=False)
    report.summary = {"best_epoch": best_epoch, "val_f1_macro": val.macro_f1, "val_hamming": val.hamming, "val_bce": val_bce}
    return best_model, report
