"""Top-j pooling of patch probabilities into bag-level grade probabilities."""

from __future__ import annotations

import numpy as np

from .cohort import GRADES, WsiBag
from .errors import DomainError
from .model import ModelState, forward_from_similarities, patch_similarities
from .protolayer import CLASS_INDEX

GRADE_COLUMNS = np.array([CLASS_INDEX[g] for g in GRADES])


def topj_indices(p, j: int) -> np.ndarray:
    """Indices of the ``min(j, l)`` largest entries, largest first; ties go to the lower index."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise DomainError("top-j selection needs a non-empty vector")
    if j < 1:
        raise DomainError(f"j must be >= 1, got {j}")
    return np.argsort(-p, kind="stable")[: min(j, p.size)]


def aggregate_topj(p, j: int) -> float:
    """Mean of the j largest values (all of them when j exceeds the length)."""
    p = np.asarray(p, dtype=np.float64)
    return float(p[topj_indices(p, j)].mean())


def stack_bags(bags: list[WsiBag]) -> tuple[np.ndarray, np.ndarray]:
    """All patches of ``bags`` in one array plus the bag offsets (length B+1)."""
    if not bags:
        raise DomainError("no bags given")
    sizes = [len(b) for b in bags]
    if min(sizes) == 0:
        raise DomainError("empty bag")
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    return np.concatenate([b.patches for b in bags]), offsets


def pool(patch_probs: np.ndarray, offsets: np.ndarray, j: int) -> np.ndarray:
    """Bag probabilities ``(B, 3)`` from stacked patch probabilities ``(N, 4)``."""
    b = np.empty((offsets.size - 1, len(GRADES)))
    for n in range(offsets.size - 1):
        block = patch_probs[offsets[n] : offsets[n + 1]]
        for c, col in enumerate(GRADE_COLUMNS):
            b[n, c] = aggregate_topj(block[:, col], j)
    return b


def bag_probabilities(model: ModelState, bags: list[WsiBag], j: int = 5, attention: bool | None = None) -> np.ndarray:
    x, offsets = stack_bags(bags)
    md, ps = patch_similarities(model, x)
    probs = forward_from_similarities(model, ps, md, attention).probs
    return pool(probs, offsets, j)
