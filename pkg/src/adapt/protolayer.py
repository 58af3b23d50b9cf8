"""Prototype layer and FC head.

Prototypes are 1x1xD: each latent cell is one candidate region. For a patch,
``distances[g, r]`` is the squared L2 distance from cell ``r`` to prototype
``g``; the per-prototype minimum is converted to a similarity and the K
similarities are combined linearly by ``theta`` (4 x K, no bias).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cohort import CLASSES, PatchDataset
from .encoder import EncoderWeights, encode_forward
from .errors import DomainError, LayoutError, PushError

EPS_SIM = 1e-4
CLASS_INDEX = {c: i for i, c in enumerate(CLASSES)}


def make_class_of(m: int) -> np.ndarray:
    """Owning class of each prototype: m consecutive prototypes per class."""
    return np.repeat(np.array(CLASSES, dtype=np.int64), m)


@dataclass(eq=False)
class PrototypeBank:
    prototypes: np.ndarray  # (K, D)
    class_of: np.ndarray  # (K,) over {0, 3, 4, 5}
    provenance: list = field(default_factory=list)  # (patch_id, row, col) or None per prototype

    def __post_init__(self):
        if not self.provenance:
            self.provenance = [None] * len(self.class_of)

    @property
    def k(self) -> int:
        return self.prototypes.shape[0]

    @property
    def m(self) -> int:
        counts = {c: int(np.sum(self.class_of == c)) for c in CLASSES}
        if len(set(counts.values())) != 1:
            raise LayoutError(f"classes own unequal prototype counts: {counts}")
        return counts[CLASSES[0]]

    def indices_of(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.class_of == c)

    def copy(self) -> PrototypeBank:
        return PrototypeBank(self.prototypes.copy(), self.class_of.copy(), list(self.provenance))


def _cells(grid: np.ndarray) -> np.ndarray:
    """Flatten spatial axes: (..., H, W, D) -> (..., H*W, D)."""
    return grid.reshape(grid.shape[:-3] + (-1, grid.shape[-1]))


def distance_map(grid: np.ndarray, bank_or_prototypes) -> np.ndarray:
    """Squared distances ``(K, H*W)`` between prototypes and cells of one grid.

    Batched grids ``(N, H, W, D)`` give ``(N, K, H*W)``.
    """
    protos = getattr(bank_or_prototypes, "prototypes", bank_or_prototypes)
    cells = _cells(np.asarray(grid, dtype=np.float64))
    if cells.shape[-1] != protos.shape[1]:
        raise LayoutError(f"latent depth {cells.shape[-1]} != prototype depth {protos.shape[1]}")
    diff = cells[..., None, :, :] - protos[:, None, :]
    return np.einsum("...krd,...krd->...kr", diff, diff)


def similarity(d):
    """log((d + 1) / (d + eps)): strictly decreasing, s(0) = log(1/eps), s -> 0 as d -> inf."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0):
        raise DomainError("similarity is defined for non-negative distances only")
    s = np.log1p(d) - np.log(d + EPS_SIM)
    return s if s.ndim else float(s)


def similarity_grad(d: np.ndarray) -> np.ndarray:
    return 1.0 / (d + 1.0) - 1.0 / (d + EPS_SIM)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def fc_fixed(bank_or_class_of) -> np.ndarray:
    """+1 from a class's own prototypes to its logit, -0.5 from all others."""
    class_of = getattr(bank_or_class_of, "class_of", bank_or_class_of)
    classes = np.array(CLASSES)[:, None]
    return np.where(class_of[None, :] == classes, 1.0, -0.5)


@dataclass
class PatchForward:
    distances: np.ndarray  # (K, H*W)
    min_distances: np.ndarray  # (K,)
    nearest_cell: np.ndarray  # (K,) first index wins on ties
    similarities: np.ndarray  # (K,)
    logits: np.ndarray  # (4,)
    probs: np.ndarray  # (4,)


def forward_patch(grid: np.ndarray, bank: PrototypeBank, theta: np.ndarray) -> PatchForward:
    if theta.shape != (len(CLASSES), bank.k):
        raise LayoutError(f"theta has shape {theta.shape}, expected (4, {bank.k})")
    dist = distance_map(grid, bank)
    nearest = np.argmin(dist, axis=-1)
    md = np.take_along_axis(dist, nearest[..., None], axis=-1)[..., 0]
    ps = similarity(md)
    logits = ps @ theta.T
    return PatchForward(dist, md, nearest, ps, logits, softmax(logits))


def push_prototypes(bank: PrototypeBank, pd: PatchDataset, encoder: EncoderWeights, chunk: int = 512) -> PrototypeBank:
    """Project every prototype onto its nearest latent cell among same-class patches.

    Ties go to the lowest (patch_id, row, col). Provenance is recorded.
    """
    new = bank.copy()
    h, w = pd.cells.shape[1:3]
    for c in CLASSES:
        members = np.flatnonzero(pd.grades == c)
        protos_idx = bank.indices_of(c)
        if protos_idx.size == 0:
            continue
        if members.size == 0:
            raise PushError(f"no patches of class {c} available for the push step")
        # visit patches in patch_id order so that first-index-wins gives the lowest id
        members = members[np.argsort(pd.patch_ids[members], kind="stable")]
        protos = bank.prototypes[protos_idx]
        best_d = np.full(protos_idx.size, np.inf)
        best_vec = np.zeros_like(protos)
        best_src = [None] * protos_idx.size
        for start in range(0, members.size, chunk):
            idx = members[start : start + chunk]
            e, _ = encode_forward(pd.cells[idx], encoder)
            cells = e.reshape(idx.size * h * w, -1)
            diff = cells[None, :, :] - protos[:, None, :]
            dist = np.einsum("krd,krd->kr", diff, diff)
            arg = np.argmin(dist, axis=1)
            for j in range(protos_idx.size):
                d = dist[j, arg[j]]
                if d < best_d[j]:
                    best_d[j] = d
                    best_vec[j] = cells[arg[j]]
                    p, cell = divmod(int(arg[j]), h * w)
                    best_src[j] = (int(pd.patch_ids[idx[p]]), cell // w, cell % w)
        new.prototypes[protos_idx] = best_vec
        for j, g in enumerate(protos_idx):
            new.provenance[g] = best_src[j]
    return new
