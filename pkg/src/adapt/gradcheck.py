"""Finite-difference verification of every training objective on small random instances.

Each instance is checked only if it is tie-free: every discrete choice made by
the loss (nearest cells, argmin prototypes, ReLU masks, top-j sets, FN/FP
events, clamps) must be identical at the base point and at every perturbed
point the central-difference oracle visits. Otherwise the instance is
redrawn.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .cohort import CLASSES, GRADES, WsiBag
from .model import ModelConfig, forward, init_model
from .numerics import GradCheckReport, ParamVector, finite_diff_check
from .protolayer import CLASS_INDEX
from .seeding import substream
from .stage1 import Stage1Config, _batch_terms, batch_patch_loss
from .aggregation import stack_bags
from .stage2 import Stage2Config, _events, _wsi_loss, split_forward
from .stage2 import bag_forwards as _bag_forwards
from .stage2 import loss_and_grad as stage2_loss_and_grad
from .stage3 import Stage3Config, _loss_terms
from .stage3 import loss_and_grad as stage3_loss_and_grad

H_DEFAULT = 1e-5
TOL_DEFAULT = 1e-5


class _NotTieFree(Exception):
    pass


def _relu_masks(fwd) -> tuple:
    masks = [fwd.enc.z1 > 0] if fwd.enc is not None else []
    if fwd.att is not None:
        masks.append(fwd.att.q1 > 0)
    return tuple(m.tobytes() for m in masks)


def _random_model(rng: np.random.Generator, *, max_m: int = 4):
    cfg = ModelConfig(
        d_raw=int(rng.integers(2, 6)),
        d_hidden=int(rng.integers(2, 6)),
        d_latent=int(rng.integers(2, 9)),
        m=int(rng.integers(1, max_m + 1)),
    )
    cfg = dataclasses.replace(cfg, k_hidden=int(rng.integers(2, min(2 * cfg.k, 8) + 1)))
    model = init_model(cfg, int(rng.integers(2**31)))
    p = model.params
    # random everything, including attention output weights and biases
    for name in p.names:
        p[name] = rng.normal(0.0, 0.6, p.shape_of(name))
    p["encoder.b1"] = np.abs(p["encoder.b1"]) + 0.1  # keep most hidden units alive
    return model


def _random_grid(rng, n, cfg, h=2, w=2):
    return rng.normal(0.0, 1.0, (n, h, w, cfg.d_raw))


@dataclass
class InstanceResult:
    loss: str
    report: GradCheckReport
    redraws: int
    info: dict = field(default_factory=dict)


def _check(loss_with_sig, analytic: ParamVector, params: ParamVector, segments, h, tol):
    _, base_sig = loss_with_sig(params)

    def loss(pv):
        val, sig = loss_with_sig(pv)
        if sig != base_sig:
            raise _NotTieFree
        return val

    return finite_diff_check(loss, params, analytic, h=h, tol=tol, segments=segments)


def check_patch_loss(rng, h=H_DEFAULT, tol=TOL_DEFAULT) -> GradCheckReport:
    """Patch cross-entropy + cluster + separation, through encoder, prototypes and FC."""
    model = _random_model(rng)
    n = int(rng.integers(2, 7))
    x = _random_grid(rng, n, model.config)
    z = rng.choice(np.array(CLASSES), size=n)
    cfg = Stage1Config(lambda_clst=float(rng.uniform(0.1, 1.0)), lambda_sep=float(rng.uniform(0.01, 0.2)))
    wrt = ("encoder", "prototypes", "fc")
    class_idx = np.array([CLASS_INDEX[int(c)] for c in model.class_of])
    z_idx = np.array([CLASS_INDEX[int(c)] for c in z])

    def loss_with_sig(pv):
        m = model.with_params(pv)
        fwd = forward(m, x, attention=False)
        ce, clamped, clst, sep, g_clst, g_sep = _batch_terms(fwd, z_idx, class_idx)
        val = float(np.mean(ce + cfg.lambda_clst * clst + cfg.lambda_sep * sep))
        return val, (fwd.nearest.tobytes(), g_clst.tobytes(), g_sep.tobytes(), clamped.tobytes(), _relu_masks(fwd))

    _, _, grads, _ = batch_patch_loss(model, x, z, cfg, wrt=wrt)
    return _check(loss_with_sig, grads, model.params, model.group_names(wrt), h, tol)


def _random_bags(rng, model, n_bags, max_l=6):
    bags = []
    for n in range(n_bags):
        l = int(rng.integers(1, max_l + 1))
        pg, sg = (int(g) for g in rng.choice(np.array(GRADES), size=2))
        bags.append(WsiBag(f"gc-{n}", _random_grid(rng, l, model.config), pg, sg))
    return bags


def _wsi_signature(wsis, targets, threshold):
    fn, fp = _events(wsis, targets, threshold)
    parts = [fn.tobytes(), fp.tobytes()]
    for w in wsis:
        parts.append(tuple(t.tobytes() for t in w.topj))
        parts.append(w.class_arg.tobytes())
        parts.append(np.argmax(w.patch_probs, axis=0).tobytes())
        parts.append((w.patch_probs > threshold).tobytes())
        b = w.bag_probs
        parts.append(((b <= 1e-12) | (b >= 1 - 1e-12)).tobytes())
    return tuple(parts)


def check_wsi_loss(rng, h=H_DEFAULT, tol=TOL_DEFAULT, with_prototypes: bool = True) -> tuple[GradCheckReport, dict]:
    """Top-j BCE + alignment + repulsion, through encoder and FC (and prototypes when asked)."""
    model = _random_model(rng)
    bags = _random_bags(rng, model, int(rng.integers(2, 5)))
    # a low threshold makes both missed and spurious grades likely on random weights
    cfg = Stage2Config(
        j=int(rng.integers(3, 8)),
        lambda_align=float(rng.uniform(0.03, 0.1)),
        lambda_repel=float(rng.uniform(0.01, 0.03)),
        threshold=float(rng.uniform(0.15, 0.4)),
    )
    wrt = ("encoder", "fc") + (("prototypes",) if with_prototypes else ())
    targets = np.array([b.target for b in bags], dtype=np.float64)

    def loss_with_sig(pv):
        m = model.with_params(pv)
        fwd, _, wsis = _bag_forwards(m, bags, cfg.j, attention=False)
        parts = _wsi_loss(wsis, targets, cfg)[0]
        return parts.total, (fwd.nearest.tobytes(), _relu_masks(fwd), _wsi_signature(wsis, targets, cfg.threshold))

    parts, grads = stage2_loss_and_grad(model, bags, cfg, wrt=wrt)
    report = _check(loss_with_sig, grads, model.params, model.group_names(wrt), h, tol)
    return report, {"n_fn": parts.n_fn, "n_fp": parts.n_fp}


def check_attention_loss(rng, h=H_DEFAULT, tol=TOL_DEFAULT) -> GradCheckReport:
    """Attention-weighted top-j BCE + classwise attention loss, through every parameter group."""
    model = _random_model(rng)
    model.stage = 3
    bags = _random_bags(rng, model, int(rng.integers(2, 5)))
    cfg = Stage3Config(alpha=float(rng.uniform(0.5, 2.0)), beta=float(rng.uniform(0.1, 1.0)), j=int(rng.integers(1, 8)))
    wrt = ("encoder", "prototypes", "fc", "attention")
    targets = np.array([b.target for b in bags], dtype=np.float64)

    def loss_with_sig(pv):
        m = model.with_params(pv)
        x, offsets = stack_bags(bags)
        fwd = forward(m, x, attention=True)
        parts = _loss_terms(m, fwd, offsets, targets, cfg)[0]
        wsis = split_forward(fwd, offsets, m.class_of, cfg.j)
        return parts.total, (fwd.nearest.tobytes(), _relu_masks(fwd), _wsi_signature(wsis, targets, cfg.threshold))

    _, grads = stage3_loss_and_grad(model, bags, cfg, wrt=wrt)
    return _check(loss_with_sig, grads, model.params, model.group_names(wrt), h, tol)


CHECKS = {
    "patch": check_patch_loss,
    "wsi": lambda rng, h, tol: check_wsi_loss(rng, h, tol)[0],
    "attention": check_attention_loss,
}


def run_gradchecks(n_instances: int = 50, seed: int = 0, h: float = H_DEFAULT, tol: float = TOL_DEFAULT, losses=tuple(CHECKS), max_redraws: int = 1000) -> dict[str, list[InstanceResult]]:
    """Check each loss on ``n_instances`` tie-free random instances."""
    out = {}
    for name in losses:
        rng = substream(seed, "gradcheck", name)
        results = []
        while len(results) < n_instances:
            redraws = 0
            while True:
                try:
                    report = CHECKS[name](rng, h, tol)
                    break
                except _NotTieFree:
                    redraws += 1
                    if redraws > max_redraws:
                        raise RuntimeError(f"could not draw a tie-free instance for {name}") from None
            results.append(InstanceResult(name, report, redraws))
        out[name] = results
    return out


def summarize(results: dict[str, list[InstanceResult]]) -> dict:
    return {
        name: {
            "instances": len(rs),
            "passed": sum(r.report.passed for r in rs),
            "max_error": max((r.report.max_error for r in rs), default=0.0),
            "redraws": sum(r.redraws for r in rs),
        }
        for name, rs in results.items()
    }
