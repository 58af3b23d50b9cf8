"""Per-cell two-layer perceptron standing in for the convolutional backbone.

The same weights are applied to every cell of a patch (a 1x1 convolution), so
cell ``(r, c)`` of the latent grid depends only on cell ``(r, c)`` of the input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import LayoutError
from .seeding import substream


@dataclass(eq=False)
class EncoderWeights:
    w1: np.ndarray  # (D_raw, D_h)
    b1: np.ndarray  # (D_h,)
    w2: np.ndarray  # (D_h, D)
    b2: np.ndarray  # (D,)

    @property
    def d_raw(self) -> int:
        return self.w1.shape[0]

    @property
    def d_latent(self) -> int:
        return self.w2.shape[1]

    def check(self) -> None:
        d_raw, d_h = self.w1.shape
        if self.b1.shape != (d_h,) or self.w2.shape[0] != d_h or self.b2.shape != (self.w2.shape[1],):
            raise LayoutError("encoder weight shapes are inconsistent")


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_encoder(d_raw: int, d_hidden: int, d_latent: int, seed: int) -> EncoderWeights:
    if min(d_raw, d_hidden, d_latent) < 1:
        raise LayoutError("encoder dimensions must be positive")
    rng = substream(seed, "init-encoder")
    b1 = glorot_bound(d_raw, d_hidden)
    b2 = glorot_bound(d_hidden, d_latent)
    return EncoderWeights(
        rng.uniform(-b1, b1, (d_raw, d_hidden)),
        np.zeros(d_hidden),
        rng.uniform(-b2, b2, (d_hidden, d_latent)),
        np.zeros(d_latent),
    )


@dataclass
class EncoderCache:
    x: np.ndarray
    z1: np.ndarray
    h1: np.ndarray


def encode_forward(x: np.ndarray, w: EncoderWeights) -> tuple[np.ndarray, EncoderCache]:
    """Map cells ``(..., D_raw)`` to latents ``(..., D)``; ReLU between the layers."""
    if x.shape[-1] != w.d_raw:
        raise LayoutError(f"cells have depth {x.shape[-1]}, encoder expects {w.d_raw}")
    z1 = x @ w.w1 + w.b1
    h1 = np.maximum(z1, 0.0)
    e = h1 @ w.w2 + w.b2
    return e, EncoderCache(x, z1, h1)


def encode(patch, w: EncoderWeights) -> np.ndarray:
    """Latent grid for a RawPatch (or a bare ``(H, W, D_raw)`` array)."""
    cells = getattr(patch, "cells", patch)
    w.check()
    return encode_forward(np.asarray(cells, dtype=np.float64), w)[0]


def encode_backward(cache: EncoderCache, g_e: np.ndarray, w: EncoderWeights) -> EncoderWeights:
    d_raw, d_h = w.w1.shape
    h1 = cache.h1.reshape(-1, d_h)
    g_e2 = g_e.reshape(-1, w.d_latent)
    g_w2 = h1.T @ g_e2
    g_b2 = g_e2.sum(axis=0)
    g_z1 = (g_e2 @ w.w2.T) * (cache.z1.reshape(-1, d_h) > 0)
    g_w1 = cache.x.reshape(-1, d_raw).T @ g_z1
    g_b1 = g_z1.sum(axis=0)
    return EncoderWeights(g_w1, g_b1, g_w2, g_b2)
