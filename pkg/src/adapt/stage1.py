"""Patch-level pretraining of encoder, prototypes and FC head.

Training cycles through three phases: (1) encoder and prototypes under
cross-entropy plus cluster/separation with the FC head pinned to the fixed
+1/-0.5 pattern, (2) push every prototype onto its nearest same-class latent
cell, (3) FC head only under cross-entropy.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .cohort import CLASSES, PatchDataset
from .errors import ConfigError, NumericError
from .model import ModelState, backward, forward, forward_from_similarities, match, patch_similarities
from .protolayer import CLASS_INDEX, PatchForward, PrototypeBank, distance_map, fc_fixed, push_prototypes
from .seeding import substream
from .training import Optimizer, TrainReport, check_finite, minibatches

logger = logging.getLogger(__name__)

CE_FLOOR = 1e-12
LOG_COLUMNS = ["epoch", "phase", "ce", "clst", "sep", "total", "accuracy", "val_accuracy"]


@dataclass
class Stage1Config:
    lambda_clst: float = 0.8
    lambda_sep: float = 0.08
    epochs: int = 30
    batch_size: int = 64
    lr: float = 3e-4
    phase1_epochs: int = 10
    phase3_epochs: int = 5
    min_improvement: float = 0.001
    val_fraction: float = 0.1

    def validate(self) -> None:
        if self.lambda_clst < 0 or self.lambda_sep < 0:
            raise ConfigError("stage1 loss weights must be non-negative")
        if self.epochs < 1 or self.batch_size < 1 or self.phase1_epochs < 0 or self.phase3_epochs < 0:
            raise ConfigError("stage1 epoch and batch counts must be positive")
        if self.phase1_epochs + self.phase3_epochs < 1:
            raise ConfigError("stage1 cycle must contain at least one epoch")
        if self.lr < 0:
            raise ConfigError("stage1.lr must be >= 0")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("stage1.val_fraction must lie in [0, 1)")

    @property
    def cycles(self) -> int:
        return max(1, self.epochs // (self.phase1_epochs + self.phase3_epochs))

    def to_dict(self) -> dict:
        return asdict(self)


def cluster_separation(grid: np.ndarray, z: int, bank: PrototypeBank) -> tuple[float, float]:
    """clst = closest same-class prototype/cell distance; sep = minus the closest other-class one."""
    same = bank.class_of == z
    if not same.any():
        raise ConfigError(f"no prototypes belong to class {z}")
    if same.all():
        raise ConfigError("separation needs prototypes from at least one other class")
    dist = distance_map(grid, bank)
    return float(dist[same].min()), -float(dist[~same].min())


def cross_entropy(probs: np.ndarray, z: int) -> float:
    p = float(probs[CLASS_INDEX[z]])
    if p < CE_FLOOR:
        warnings.warn("true-class probability below 1e-12; cross-entropy clamped", RuntimeWarning, stacklevel=2)
        p = CE_FLOOR
    return -math.log(p)


def patch_loss(fwd: PatchForward, grid: np.ndarray, z: int, bank: PrototypeBank, cfg: Stage1Config) -> float:
    clst, sep = cluster_separation(grid, z, bank)
    return cross_entropy(fwd.probs, z) + cfg.lambda_clst * clst + cfg.lambda_sep * sep


def _batch_terms(fwd, z_idx: np.ndarray, class_idx: np.ndarray):
    """Per-patch CE / clst / sep plus the chosen prototype indices (first index wins)."""
    n = z_idx.shape[0]
    rows = np.arange(n)
    logp = fwd.logits - fwd.logits.max(axis=1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
    ce = -logp[rows, z_idx]
    clamped = ce > -math.log(CE_FLOOR)
    if clamped.any():
        warnings.warn("true-class probability below 1e-12; cross-entropy clamped", RuntimeWarning, stacklevel=3)
        ce = np.minimum(ce, -math.log(CE_FLOOR))
    same = class_idx[None, :] == z_idx[:, None]
    md_same = np.where(same, fwd.md, np.inf)
    md_other = np.where(same, np.inf, fwd.md)
    g_clst = np.argmin(md_same, axis=1)
    g_sep = np.argmin(md_other, axis=1)
    clst = fwd.md[rows, g_clst]
    sep = -fwd.md[rows, g_sep]
    return ce, clamped, clst, sep, g_clst, g_sep


def batch_patch_loss(model: ModelState, x: np.ndarray, z: np.ndarray, cfg: Stage1Config, wrt=("encoder", "prototypes")):
    """Mean patch loss over a batch and its gradient; returns (loss, parts, grads, fwd)."""
    fwd = forward(model, x, attention=False)
    z_idx = np.array([CLASS_INDEX[int(c)] for c in z])
    class_idx = np.array([CLASS_INDEX[int(c)] for c in model.class_of])
    ce, clamped, clst, sep, g_clst, g_sep = _batch_terms(fwd, z_idx, class_idx)
    n = z_idx.size
    rows = np.arange(n)
    loss = float(np.mean(ce + cfg.lambda_clst * clst + cfg.lambda_sep * sep))
    g_logits = fwd.probs.copy()
    g_logits[rows, z_idx] -= 1.0
    g_logits[clamped] = 0.0
    g_logits /= n
    g_md = np.zeros_like(fwd.md)
    np.add.at(g_md, (rows, g_clst), cfg.lambda_clst / n)
    np.add.at(g_md, (rows, g_sep), -cfg.lambda_sep / n)
    grads = backward(model, fwd, g_logits=g_logits, g_md=g_md, wrt=wrt)
    parts = {"ce": float(ce.mean()), "clst": float(clst.mean()), "sep": float(sep.mean())}
    acc = float(np.mean(np.argmax(fwd.probs, axis=1) == z_idx))
    return loss, parts, grads, acc


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.maximum((a * a).sum(1)[:, None] - 2 * a @ b.T + (b * b).sum(1)[None, :], 0.0)


def init_prototypes(model: ModelState, pd: PatchDataset, seed: int, pool_patches: int = 64, ratio: float = 3.0, neighbours: int = 5) -> ModelState:
    """Seed every prototype with a class-specific latent cell from the patch set.

    Candidate cells come from random patches of the prototype's class. A cell
    counts as class-specific when its nearest other-class cell is at least
    ``ratio`` times farther than its ``neighbours``-th nearest same-class cell; shared
    background fails this test. Prototypes are then picked by farthest-point
    selection over the class-specific cells so each starts on a different pattern.
    """
    rng = substream(seed, "init-prototypes")
    model = model.copy()
    protos = model.params["prototypes"]
    d = protos.shape[1]
    for c in CLASSES:
        slots = np.flatnonzero(model.class_of == c)
        own = np.flatnonzero(pd.grades == c)
        other = np.flatnonzero(pd.grades != c)
        if own.size == 0:
            raise ConfigError(f"cannot seed prototypes: no class-{c} patches")
        own_pick = rng.choice(own, size=min(pool_patches, own.size), replace=False)
        cand = match(model, pd.cells[own_pick])[1].reshape(-1, d)
        if other.size:
            other_pick = rng.choice(other, size=min(pool_patches, other.size), replace=False)
            ref = match(model, pd.cells[other_pick])[1].reshape(-1, d)
            to_other = _sq_dists(cand, ref).min(axis=1)
            within = _sq_dists(cand, cand)
            np.fill_diagonal(within, np.inf)
            kth = np.partition(within, min(neighbours, within.shape[1]) - 1, axis=1)[:, min(neighbours, within.shape[1]) - 1]
            score = to_other / np.maximum(kth, 1e-12)
            keep = score >= ratio
            if keep.sum() < slots.size:
                keep = score >= np.sort(score)[-slots.size]
            cand = cand[keep]
        first = int(rng.integers(cand.shape[0]))
        chosen = [first]
        gap = ((cand - cand[first]) ** 2).sum(1)
        while len(chosen) < slots.size:
            nxt = int(np.argmax(gap))
            chosen.append(nxt)
            gap = np.minimum(gap, ((cand - cand[nxt]) ** 2).sum(1))
        protos[slots] = cand[chosen]
    model.provenance = [None] * model.config.k
    return model


def patch_accuracy(model: ModelState, pd: PatchDataset) -> float:
    if len(pd) == 0:
        return float("nan")
    md, ps = patch_similarities(model, pd.cells)
    probs = forward_from_similarities(model, ps, md, attention=False).probs
    truth = np.array([CLASS_INDEX[int(c)] for c in pd.grades])
    return float(np.mean(np.argmax(probs, axis=1) == truth))


def split_patch_dataset(pd: PatchDataset, fraction: float, seed: int) -> tuple[PatchDataset, PatchDataset]:
    """Class-stratified hold-out of ``fraction`` of the patches for validation."""
    rng = substream(seed, "stage1-val")
    held = np.zeros(len(pd), dtype=bool)
    for c in CLASSES:
        idx = np.flatnonzero(pd.grades == c)
        n_val = int(math.floor(fraction * idx.size + 0.5))
        held[rng.permutation(idx)[:n_val]] = True
    return pd.subset(~held), pd.subset(held)


def _push(model: ModelState, pd: PatchDataset) -> ModelState:
    model = model.copy()
    bank = push_prototypes(model.bank, pd, model.encoder)
    model.params["prototypes"] = bank.prototypes
    model.provenance = bank.provenance
    return model


def train_stage1(pd: PatchDataset, model: ModelState, cfg: Stage1Config, seed: int = 0) -> tuple[ModelState, TrainReport]:
    cfg.validate()
    for c in CLASSES:
        if not np.any(pd.grades == c):
            raise ConfigError(f"patch dataset has no class-{c} patches")
    train_pd, val_pd = split_patch_dataset(pd, cfg.val_fraction, seed) if cfg.val_fraction > 0 else (pd, pd.subset(np.zeros(0, dtype=np.int64)))
    report = TrainReport(stage=1, columns=LOG_COLUMNS)
    rng = substream(seed, "shuffle-stage1")
    model = init_prototypes(model, train_pd, seed)
    model.stage = 1

    n = len(train_pd)
    per_epoch = math.ceil(n / cfg.batch_size)
    p1_opt = Optimizer(model.params, model.group_names(["encoder", "prototypes"]), cfg.lr, per_epoch * cfg.phase1_epochs * cfg.cycles)
    p3_opt = Optimizer(model.params, model.group_names(["fc"]), cfg.lr, per_epoch * cfg.phase3_epochs * cfg.cycles)
    truth = np.array([CLASS_INDEX[int(c)] for c in train_pd.grades])

    prev_val = patch_accuracy(model, val_pd) if len(val_pd) else None
    epoch = 0
    for cycle in range(cfg.cycles):
        # phase 1: encoder + prototypes, FC pinned to the fixed pattern
        model = model.copy()
        model.params["fc"] = fc_fixed(model.class_of)
        for _ in range(cfg.phase1_epochs):
            epoch += 1
            sums = {"ce": 0.0, "clst": 0.0, "sep": 0.0, "total": 0.0, "accuracy": 0.0}
            for batch in minibatches(n, cfg.batch_size, rng):
                loss, parts, grads, acc = batch_patch_loss(model, train_pd.cells[batch], train_pd.grades[batch], cfg)
                check_finite(loss, model, "stage-1 patch loss")
                model = p1_opt.step(model, grads)
                w = batch.size / n
                for key in ("ce", "clst", "sep"):
                    sums[key] += w * parts[key]
                sums["total"] += w * loss
                sums["accuracy"] += w * acc
            report.log(epoch=epoch, phase=1, **sums, val_accuracy=_maybe_acc(model, val_pd))

        # phase 2: push
        model = _push(model, train_pd)
        parts = _dataset_terms(model, train_pd, cfg)
        report.log(epoch=epoch, phase=2, **parts, val_accuracy=_maybe_acc(model, val_pd))

        # phase 3: FC only; encoder and prototypes are fixed, so similarities are cached
        md, ps = patch_similarities(model, train_pd.cells)
        for _ in range(cfg.phase3_epochs):
            epoch += 1
            sums = {"ce": 0.0, "total": 0.0, "accuracy": 0.0}
            for batch in minibatches(n, cfg.batch_size, rng):
                fwd = forward_from_similarities(model, ps[batch], md[batch], attention=False)
                z = truth[batch]
                rows = np.arange(batch.size)
                ce = -np.log(np.maximum(fwd.probs[rows, z], CE_FLOOR))
                loss = float(ce.mean())
                check_finite(loss, model, "stage-1 phase-3 loss")
                g_logits = fwd.probs.copy()
                g_logits[rows, z] -= 1.0
                grads = backward(model, fwd, g_logits=g_logits / batch.size, wrt=("fc",))
                model = p3_opt.step(model, grads)
                w = batch.size / n
                sums["ce"] += w * loss
                sums["total"] += w * loss
                sums["accuracy"] += w * float(np.mean(np.argmax(fwd.probs, axis=1) == z))
            report.log(epoch=epoch, phase=3, **sums, val_accuracy=_maybe_acc(model, val_pd))

        if prev_val is not None and cycle + 1 < cfg.cycles:
            val = patch_accuracy(model, val_pd)
            if val - prev_val < cfg.min_improvement:
                report.events.append(f"converged after cycle {cycle + 1}: val accuracy {prev_val:.4f} -> {val:.4f}")
                break
            prev_val = val

    missing = [g for g, p in enumerate(model.provenance) if p is None]
    if missing:
        raise NumericError(f"prototypes {missing} were never pushed")
    report.summary = {
        "train_accuracy": patch_accuracy(model, train_pd),
        "val_accuracy": _maybe_acc(model, val_pd),
        "epochs_run": epoch,
    }
    return model, report


def _maybe_acc(model, pd):
    return patch_accuracy(model, pd) if len(pd) else None


def _dataset_terms(model: ModelState, pd: PatchDataset, cfg: Stage1Config, chunk: int = 1024) -> dict:
    """Mean CE / clst / sep / total / accuracy over a patch set without gradients."""
    class_idx = np.array([CLASS_INDEX[int(c)] for c in model.class_of])
    sums = {"ce": 0.0, "clst": 0.0, "sep": 0.0, "accuracy": 0.0}
    n = len(pd)
    for start in range(0, n, chunk):
        sl = slice(start, start + chunk)
        fwd = forward(model, pd.cells[sl], attention=False)
        z_idx = np.array([CLASS_INDEX[int(c)] for c in pd.grades[sl]])
        ce, _, clst, sep, _, _ = _batch_terms(fwd, z_idx, class_idx)
        sums["ce"] += float(ce.sum()) / n
        sums["clst"] += float(clst.sum()) / n
        sums["sep"] += float(sep.sum()) / n
        sums["accuracy"] += float(np.sum(np.argmax(fwd.probs, axis=1) == z_idx)) / n
    sums["total"] = sums["ce"] + cfg.lambda_clst * sums["clst"] + cfg.lambda_sep * sums["sep"]
    return sums
