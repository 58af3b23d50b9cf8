"""Two-layer sigmoid attention over prototype similarities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import glorot_bound
from .errors import LayoutError
from .seeding import substream


@dataclass(eq=False)
class AttentionWeights:
    w1: np.ndarray  # (K, K_h)
    b1: np.ndarray  # (K_h,)
    w2: np.ndarray  # (K_h, K)
    b2: np.ndarray  # (K,)


def init_attention(k: int, k_hidden: int, seed: int) -> AttentionWeights:
    """Random first layer, zero output layer: every attention weight starts at 0.5."""
    rng = substream(seed, "init-attention")
    bound = glorot_bound(k, k_hidden)
    return AttentionWeights(
        rng.uniform(-bound, bound, (k, k_hidden)),
        np.zeros(k_hidden),
        np.zeros((k_hidden, k)),
        np.zeros(k),
    )


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class AttentionCache:
    ps: np.ndarray
    q1: np.ndarray
    hidden: np.ndarray
    a: np.ndarray


def attention_forward(ps: np.ndarray, w: AttentionWeights) -> tuple[np.ndarray, np.ndarray, AttentionCache]:
    """Return attention ``a`` in [0, 1]^K, weighted similarities ``ps * a`` and a cache."""
    if ps.shape[-1] != w.w1.shape[0]:
        raise LayoutError(f"similarity vector has {ps.shape[-1]} entries, attention expects {w.w1.shape[0]}")
    q1 = ps @ w.w1 + w.b1
    hidden = np.maximum(q1, 0.0)
    a = sigmoid(hidden @ w.w2 + w.b2)
    return a, ps * a, AttentionCache(ps, q1, hidden, a)


def attention_backward(cache: AttentionCache, g_a: np.ndarray, w: AttentionWeights) -> tuple[AttentionWeights, np.ndarray]:
    """Gradients of the attention weights and of the input similarities, given dL/da."""
    a = cache.a
    g_q2 = g_a * a * (1.0 - a)
    g_w2 = cache.hidden.T @ g_q2
    g_b2 = g_q2.sum(axis=0)
    g_q1 = (g_q2 @ w.w2.T) * (cache.q1 > 0)
    g_w1 = cache.ps.T @ g_q1
    g_b1 = g_q1.sum(axis=0)
    g_ps = g_q1 @ w.w1.T
    return AttentionWeights(g_w1, g_b1, g_w2, g_b2), g_ps
