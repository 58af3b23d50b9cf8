"""Attention-based dynamic prototype pruning.

A small MLP maps each patch's similarity vector to per-prototype attention in
[0, 1]; the FC head then sees ``ps * a``. Only the attention MLP and the FC
head are trained; encoder and prototypes stay bit-frozen, so similarities are
computed once up front.

For grade c and a batch of bags, let ``abar[n]`` be the mean over the top-j
patches (ranked by p^c) of the attention sub-vector on class-c prototypes.
``mu_pos`` and ``mu_neg`` average ``abar`` over bags positive and negative for
c, ``w_c`` is the positive share of the batch, and

    L_c = w_c * (alpha * sum(mu_pos * mu_neg) + beta * sum(mu_neg)).

The attention loss is the mean of L_c over the three grades and is added to
the bag BCE.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .aggregation import GRADE_COLUMNS, pool, stack_bags, topj_indices
from .attention import attention_forward
from .cohort import GRADES, WsiBag
from .errors import ConfigError, DomainError
from .metrics import score_probabilities, targets_of
from .model import Forward, ModelState, backward, forward, forward_from_similarities, patch_similarities
from .seeding import substream
from .stage2 import bce, selection_key, split_forward
from .training import Optimizer, TrainReport, check_finite, minibatches

__all__ = [
    "Stage3Config",
    "ClassAttentionStats",
    "attention_forward",
    "wsi_attention_vector",
    "class_attention_stats",
    "classwise_loss",
    "train_stage3",
    "prototype_importance",
    "verify_lemma1",
    "verify_lemma2",
]

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "bce", "attn", "attn_3", "attn_4", "attn_5", "total", "val_f1_macro", "val_hamming"]
TAU_SUPPORT = 1e-3
LEMMA_SLACK = 1e-9


@dataclass
class Stage3Config:
    alpha: float = 1.0
    beta: float = 0.3
    j: int = 5
    epochs: int = 60
    batch_size: int = 8
    lr: float = 3e-3
    threshold: float = 0.5
    use_attention_loss: bool = True
    rescale_fc: bool = True  # doubles theta on entry so that a = 0.5 reproduces the stage-2 logits

    def validate(self) -> None:
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigError("stage3.alpha and stage3.beta must be positive")
        if self.j < 1:
            raise ConfigError("stage3.j must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("stage3.epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0:
            raise ConfigError("stage3.lr must be >= 0")
        if not 0 < self.threshold < 1:
            raise ConfigError("stage3.threshold must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ClassAttentionStats:
    grade: int
    mu_pos: np.ndarray  # (m,)
    mu_neg: np.ndarray  # (m,)
    w: float
    n_pos: int
    n_neg: int


def wsi_attention_vector(a: np.ndarray, grade_probs: np.ndarray, proto_idx: np.ndarray, j: int) -> np.ndarray:
    """Mean attention on ``proto_idx`` over the top-j patches of one bag by grade probability."""
    if a.shape[0] == 0:
        raise DomainError("empty bag")
    top = topj_indices(grade_probs, j)
    return a[np.ix_(top, proto_idx)].mean(axis=0)


def _bag_vectors(a, wsis, offsets, class_of):
    """abar[c] of shape (B, m) for every grade, plus the patch rows and prototype columns used."""
    out = []
    for c, g in enumerate(GRADES):
        idx = np.flatnonzero(class_of == g)
        rows = [offsets[n] + w.topj[c] for n, w in enumerate(wsis)]
        out.append((np.stack([a[np.ix_(r, idx)].mean(axis=0) for r in rows]), rows, idx))
    return out


def class_attention_stats(abar: np.ndarray, y: np.ndarray, grade: int) -> ClassAttentionStats:
    """Positive/negative means of the per-bag vectors ``abar`` (B, m) for one grade."""
    y = np.asarray(y).astype(bool)
    m = abar.shape[1]
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    mu_pos = abar[y].mean(axis=0) if n_pos else np.zeros(m)
    mu_neg = abar[~y].mean(axis=0) if n_neg else np.zeros(m)
    if not (n_pos and n_neg):
        logger.debug("grade %d: batch has %d positive and %d negative bags", grade, n_pos, n_neg)
    return ClassAttentionStats(grade, mu_pos, mu_neg, n_pos / max(y.size, 1), n_pos, n_neg)


def class_loss(stats: ClassAttentionStats, alpha: float, beta: float) -> float:
    # attention is non-negative, so the L1 norms are plain sums
    return stats.w * (alpha * float(np.sum(stats.mu_pos * stats.mu_neg)) + beta * float(np.sum(stats.mu_neg)))


def classwise_loss(stats: list[ClassAttentionStats], cfg: Stage3Config) -> tuple[dict[int, float], float]:
    per = {s.grade: class_loss(s, cfg.alpha, cfg.beta) for s in stats}
    return per, float(np.mean(list(per.values()))) if per else 0.0


@dataclass
class Stage3Loss:
    total: float
    bce: float
    attn: float
    per_grade: dict[int, float]
    stats: list[ClassAttentionStats] = field(default_factory=list)


def _loss_terms(model: ModelState, fwd: Forward, offsets: np.ndarray, targets: np.ndarray, cfg: Stage3Config):
    """Loss plus its partials w.r.t. the stacked patch probabilities and attention."""
    wsis = split_forward(fwd, offsets, model.class_of, cfg.j)
    b = np.array([w.bag_probs for w in wsis])
    l_bce, g_b = bce(b, targets)
    g_probs = np.zeros_like(fwd.probs)
    for n, w in enumerate(wsis):
        for c, (top, col) in enumerate(zip(w.topj, GRADE_COLUMNS)):
            g_probs[offsets[n] + top, col] += g_b[n, c] / top.size

    g_a = np.zeros_like(fwd.ps)
    stats = []
    for c, (abar, rows, idx) in enumerate(_bag_vectors(fwd.a, wsis, offsets, model.class_of)):
        y = targets[:, c].astype(bool)
        s = class_attention_stats(abar, y, GRADES[c])
        stats.append(s)
        if not cfg.use_attention_loss:
            continue
        # d L_attn / d abar[n]; the 1/3 is the average over grades
        g_abar = np.zeros_like(abar)
        if s.n_pos:
            g_abar[y] = s.w * cfg.alpha * s.mu_neg / s.n_pos
        if s.n_neg:
            g_abar[~y] = s.w * (cfg.alpha * s.mu_pos + cfg.beta) / s.n_neg
        g_abar /= len(GRADES)
        for n, r in enumerate(rows):
            g_a[np.ix_(r, idx)] += g_abar[n] / r.size
    per, l_attn = classwise_loss(stats, cfg)
    if not cfg.use_attention_loss:
        l_attn = 0.0
    parts = Stage3Loss(l_bce + l_attn, l_bce, l_attn, per, stats)
    return parts, g_probs, g_a


def loss_and_grad(model: ModelState, bags: list[WsiBag], cfg: Stage3Config, wrt=("attention", "fc")):
    """Stage-3 batch objective from raw bags, with its gradient over ``wrt``."""
    x, offsets = stack_bags(bags)
    fwd = forward(model, x, attention=True)
    parts, g_probs, g_a = _loss_terms(model, fwd, offsets, targets_of(bags), cfg)
    return parts, backward(model, fwd, g_probs=g_probs, g_a=g_a, wrt=wrt)


@dataclass
class CachedBags:
    """Similarities of every patch, stacked, for a frozen encoder and prototype bank."""

    ps: np.ndarray
    md: np.ndarray
    offsets: np.ndarray
    targets: np.ndarray

    @classmethod
    def build(cls, model: ModelState, bags: list[WsiBag]) -> CachedBags:
        x, offsets = stack_bags(bags)
        md, ps = patch_similarities(model, x)
        return cls(ps, md, offsets, targets_of(bags))

    def select(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        rows = np.concatenate([np.arange(self.offsets[n], self.offsets[n + 1]) for n in idx])
        sizes = self.offsets[idx + 1] - self.offsets[idx]
        return self.ps[rows], self.md[rows], np.concatenate([[0], np.cumsum(sizes)]), self.targets[idx]


def _cached_step(model, cache: CachedBags, idx, cfg):
    ps, md, offsets, targets = cache.select(idx)
    fwd = forward_from_similarities(model, ps, md, attention=True)
    parts, g_probs, g_a = _loss_terms(model, fwd, offsets, targets, cfg)
    return parts, backward(model, fwd, g_probs=g_probs, g_a=g_a, wrt=("attention", "fc"))


def _validate_cached(model, cache: CachedBags, j):
    probs = forward_from_similarities(model, cache.ps, cache.md, attention=True).probs
    b = pool(probs, cache.offsets, j)
    return score_probabilities(b, cache.targets), bce(b, cache.targets)[0]


def lemma1_check(stats: ClassAttentionStats, eps: float, alpha: float, tau: float = TAU_SUPPORT) -> dict:
    """Inner-product bound and support overlap for one grade's batch statistics."""
    inner = float(np.dot(stats.mu_pos, stats.mu_neg))
    overlap = int(np.sum((stats.mu_pos > tau) & (stats.mu_neg > tau)))
    if stats.w == 0:
        return {"grade": stats.grade, "inner": inner, "eps": eps, "bound": None, "holds": None, "skipped": True, "overlap": overlap}
    bound = eps / (stats.w * alpha)
    return {"grade": stats.grade, "inner": inner, "eps": eps, "bound": bound, "holds": bool(inner <= bound + LEMMA_SLACK), "skipped": False, "overlap": overlap}


def train_stage3(train_bags: list[WsiBag], val_bags: list[WsiBag], model: ModelState, cfg: Stage3Config, seed: int = 0):
    """Train attention and FC head; returns the best-validation model and its log."""
    cfg.validate()
    if model.stage < 2:
        raise ConfigError("stage 3 needs a model that completed stage 2")
    train_bags = [b.stripped() for b in train_bags]
    val_bags = [b.stripped() for b in val_bags]
    model = model.copy()
    model.stage = 3
    if cfg.rescale_fc:
        model.params["fc"] = 2.0 * model.params["fc"]
    train_cache = CachedBags.build(model, train_bags)
    val_cache = CachedBags.build(model, val_bags)

    rng = substream(seed, "shuffle-stage3")
    n = len(train_bags)
    opt = Optimizer(model.params, model.group_names(["attention", "fc"]), cfg.lr, math.ceil(n / cfg.batch_size) * cfg.epochs)
    report = TrainReport(stage=3, columns=LOG_COLUMNS)
    val, val_bce = _validate_cached(model, val_cache, cfg.j)
    best_key, best_model, best_epoch = selection_key(val, val_bce), model.copy(), 0
    report.log(epoch=0, val_f1_macro=val.macro_f1, val_hamming=val.hamming)
    checked = violations = 0
    for epoch in range(1, cfg.epochs + 1):
        sums = dict.fromkeys(("bce", "attn", "attn_3", "attn_4", "attn_5", "total"), 0.0)
        for batch in minibatches(n, cfg.batch_size, rng):
            parts, grads = _cached_step(model, train_cache, batch, cfg)
            check_finite(parts.total, best_model, "stage-3 loss")
            for s in parts.stats:
                res = lemma1_check(s, parts.per_grade[s.grade], cfg.alpha)
                if not res["skipped"]:
                    checked += 1
                    violations += not res["holds"]
            model = opt.step(model, grads)
            w = batch.size / n
            sums["bce"] += w * parts.bce
            sums["attn"] += w * parts.attn
            sums["total"] += w * parts.total
            for g in GRADES:
                sums[f"attn_{g}"] += w * parts.per_grade[g]
        val, val_bce = _validate_cached(model, val_cache, cfg.j)
        report.log(epoch=epoch, **sums, val_f1_macro=val.macro_f1, val_hamming=val.hamming)
        key = selection_key(val, val_bce)
        if key < best_key:
            best_key, best_model, best_epoch = key, model.copy(), epoch
    report.best_epoch = best_epoch
    val, val_bce = _validate_cached(best_model, val_cache, cfg.j)
    report.summary = {
        "best_epoch": best_epoch,
        "val_f1_macro": val.macro_f1,
        "val_hamming": val.hamming,
        "val_bce": val_bce,
        "lemma1_batches_checked": checked,
        "lemma1_violations": violations,
    }
    return best_model, report


@dataclass
class Importance:
    grade: int
    ranking: list  # (prototype id, score), best first
    n_positive: int

    @property
    def empty(self) -> bool:
        return self.n_positive == 0


def prototype_importance(model: ModelState, bags: list[WsiBag], j: int = 5) -> dict[int, Importance]:
    """Per grade, mean attention vector over the positive bags, ranked high to low (ties by id)."""
    x, offsets = stack_bags(bags)
    md, ps = patch_similarities(model, x)
    fwd = forward_from_similarities(model, ps, md, attention=True)
    wsis = split_forward(fwd, offsets, model.class_of, j)
    targets = targets_of(bags)
    out = {}
    for c, (abar, _, idx) in enumerate(_bag_vectors(fwd.a, wsis, offsets, model.class_of)):
        pos = targets[:, c] == 1
        g = GRADES[c]
        if not pos.any():
            out[g] = Importance(g, [], 0)
            continue
        score = abar[pos].mean(axis=0)
        order = sorted(range(idx.size), key=lambda t: (-score[t], idx[t]))
        out[g] = Importance(g, [(int(idx[t]), float(score[t])) for t in order], int(pos.sum()))
    return out


def batch_stats(model: ModelState, bags: list[WsiBag], j: int) -> list[ClassAttentionStats]:
    x, offsets = stack_bags(bags)
    md, ps = patch_similarities(model, x)
    fwd = forward_from_similarities(model, ps, md, attention=True)
    wsis = split_forward(fwd, offsets, model.class_of, j)
    targets = targets_of(bags)
    return [class_attention_stats(abar, targets[:, c], GRADES[c]) for c, (abar, _, _) in enumerate(_bag_vectors(fwd.a, wsis, offsets, model.class_of))]


def verify_lemma1(model: ModelState, bags: list[WsiBag], cfg: Stage3Config, batch_size: int | None = None, tau: float = TAU_SUPPORT) -> dict:
    """Check the inner-product bound on every batch of ``bags`` (in order) and report support overlap."""
    size = batch_size or cfg.batch_size
    batches = []
    for start in range(0, len(bags), size):
        stats = batch_stats(model, bags[start : start + size], cfg.j)
        batches.append([lemma1_check(s, class_loss(s, cfg.alpha, cfg.beta), cfg.alpha, tau) for s in stats])
    checks = [c for b in batches for c in b if not c["skipped"]]
    return {
        "batches": batches,
        "checked": len(checks),
        "holds": all(c["holds"] for c in checks),
        "max_eps": max((c["eps"] for c in checks), default=0.0),
        "tau": tau,
    }


def negative_activity(mu_neg: np.ndarray, w: float, beta: float) -> float:
    return w * beta * float(np.sum(np.abs(mu_neg)))


def verify_lemma2(stats: list[ClassAttentionStats] | ClassAttentionStats, cfg: Stage3Config, magnitudes=(1e-6, 1e-3, 0.5), tol: float = 1e-9) -> dict:
    """Central-difference derivative of the negative-activity term at each active coordinate.

    Each active coordinate is moved to every magnitude in turn and differenced
    with step ``mu / 2``; the derivative should equal ``w * beta`` regardless.
    """
    if isinstance(stats, ClassAttentionStats):
        stats = [stats]
    rows = []
    for s in stats:
        expected = s.w * cfg.beta
        for k in np.flatnonzero(s.mu_neg > 0):
            for mu in magnitudes:
                base = s.mu_neg.copy()
                h = mu / 2.0
                base[k] = mu + h
                f_plus = negative_activity(base, s.w, cfg.beta)
                base[k] = mu - h
                f_minus = negative_activity(base, s.w, cfg.beta)
                deriv = (f_plus - f_minus) / (2.0 * h)
                rows.append({"grade": s.grade, "coordinate": int(k), "magnitude": mu, "derivative": deriv, "expected": expected, "error": abs(deriv - expected)})
    return {"checks": rows, "vacuous": not rows, "passed": all(r["error"] <= tol for r in rows), "tol": tol}
