"""Model state and the batched forward/backward engine shared by all trainers.

Gradients are derived by hand. Discrete choices (nearest cell per prototype,
top-j sets, event sets) are held fixed during the backward pass; ties resolve
to the lowest index.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .attention import AttentionCache, AttentionWeights, attention_backward, attention_forward, init_attention
from .cohort import CLASSES
from .encoder import EncoderCache, EncoderWeights, encode_backward, encode_forward, init_encoder
from .errors import ConfigError, LayoutError
from .numerics import ParamVector
from .protolayer import PrototypeBank, fc_fixed, make_class_of, similarity, similarity_grad, softmax

GROUPS = ("encoder", "prototypes", "fc", "attention")


@dataclass
class ModelConfig:
    d_raw: int = 16
    d_hidden: int = 32
    d_latent: int = 24
    m: int = 4
    k_hidden: int | None = None  # defaults to 2K

    @property
    def k(self) -> int:
        return len(CLASSES) * self.m

    @property
    def attention_hidden(self) -> int:
        return self.k_hidden if self.k_hidden else 2 * self.k

    def validate(self) -> None:
        for name in ("d_raw", "d_hidden", "d_latent", "m"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def param_layout(cfg: ModelConfig):
    k, kh = cfg.k, cfg.attention_hidden
    return (
        ("encoder.w1", (cfg.d_raw, cfg.d_hidden)),
        ("encoder.b1", (cfg.d_hidden,)),
        ("encoder.w2", (cfg.d_hidden, cfg.d_latent)),
        ("encoder.b2", (cfg.d_latent,)),
        ("prototypes", (k, cfg.d_latent)),
        ("fc", (len(CLASSES), k)),
        ("attention.w1", (k, kh)),
        ("attention.b1", (kh,)),
        ("attention.w2", (kh, k)),
        ("attention.b2", (k,)),
    )


@dataclass(eq=False)
class ModelState:
    config: ModelConfig
    params: ParamVector
    class_of: np.ndarray
    provenance: list
    stage: int = 0

    @property
    def encoder(self) -> EncoderWeights:
        p = self.params
        return EncoderWeights(p["encoder.w1"], p["encoder.b1"], p["encoder.w2"], p["encoder.b2"])

    @property
    def bank(self) -> PrototypeBank:
        return PrototypeBank(self.params["prototypes"], self.class_of, self.provenance)

    @property
    def theta(self) -> np.ndarray:
        return self.params["fc"]

    @property
    def attention(self) -> AttentionWeights:
        p = self.params
        return AttentionWeights(p["attention.w1"], p["attention.b1"], p["attention.w2"], p["attention.b2"])

    @property
    def uses_attention(self) -> bool:
        return self.stage >= 3

    def group_names(self, groups) -> list[str]:
        names = []
        for g in groups:
            names.extend(self.params.segment_names(g))
        return names

    def copy(self) -> ModelState:
        return ModelState(self.config, self.params.copy(), self.class_of.copy(), list(self.provenance), self.stage)

    def with_params(self, params: ParamVector) -> ModelState:
        return ModelState(self.config, params, self.class_of, self.provenance, self.stage)


def init_model(cfg: ModelConfig, seed: int) -> ModelState:
    """Fresh model: random encoder, zero prototypes (seeded later), fixed FC, neutral attention."""
    cfg.validate()
    params = ParamVector(param_layout(cfg))
    enc = init_encoder(cfg.d_raw, cfg.d_hidden, cfg.d_latent, seed)
    params["encoder.w1"], params["encoder.b1"] = enc.w1, enc.b1
    params["encoder.w2"], params["encoder.b2"] = enc.w2, enc.b2
    class_of = make_class_of(cfg.m)
    params["fc"] = fc_fixed(class_of)
    att = init_attention(cfg.k, cfg.attention_hidden, seed)
    params["attention.w1"], params["attention.b1"] = att.w1, att.b1
    params["attention.w2"], params["attention.b2"] = att.w2, att.b2
    return ModelState(cfg, params, class_of, [None] * cfg.k, stage=0)


@dataclass
class Forward:
    enc: EncoderCache | None
    latent: np.ndarray | None  # (N, R, D)
    nearest: np.ndarray | None  # (N, K)
    delta: np.ndarray | None  # (N, K, D) nearest cell minus prototype
    md: np.ndarray  # (N, K) min squared distance per prototype
    ps: np.ndarray  # (N, K) similarities
    att: AttentionCache | None
    ps_w: np.ndarray  # (N, K) similarities after attention
    logits: np.ndarray  # (N, 4)
    probs: np.ndarray  # (N, 4)

    @property
    def a(self) -> np.ndarray | None:
        return None if self.att is None else self.att.a


def _flat_cells(x: np.ndarray) -> np.ndarray:
    if x.ndim == 4:
        return x.reshape(x.shape[0], -1, x.shape[-1])
    if x.ndim == 3:
        return x
    raise LayoutError(f"expected patches of shape (N, H, W, D) or (N, R, D), got {x.shape}")


def match(state: ModelState, x: np.ndarray):
    """Encode patches and find each prototype's nearest cell."""
    x = _flat_cells(np.asarray(x, dtype=np.float64))
    latent, enc = encode_forward(x, state.encoder)
    protos = state.params["prototypes"]
    # squared distances via the expansion, only to pick the nearest cell ...
    approx = (latent * latent).sum(-1)[..., None] - 2.0 * latent @ protos.T + (protos * protos).sum(-1)
    nearest = np.argmin(approx, axis=1)  # (N, K)
    # ... then the exact distance to that cell
    delta = np.take_along_axis(latent, nearest[..., None], axis=1) - protos
    md = np.einsum("nkd,nkd->nk", delta, delta)
    return enc, latent, nearest, delta, md


def head(state: ModelState, ps: np.ndarray, attention: bool):
    att = None
    ps_w = ps
    if attention:
        _, ps_w, att = attention_forward(ps, state.attention)
    logits = ps_w @ state.theta.T
    return att, ps_w, logits, softmax(logits)


def forward(state: ModelState, x: np.ndarray, attention: bool | None = None) -> Forward:
    if attention is None:
        attention = state.uses_attention
    enc, latent, nearest, delta, md = match(state, x)
    ps = similarity(md)
    att, ps_w, logits, probs = head(state, ps, attention)
    return Forward(enc, latent, nearest, delta, md, ps, att, ps_w, logits, probs)


def forward_from_similarities(state: ModelState, ps: np.ndarray, md: np.ndarray | None = None, attention: bool | None = None) -> Forward:
    """Head-only forward for a frozen encoder and prototype bank."""
    if attention is None:
        attention = state.uses_attention
    att, ps_w, logits, probs = head(state, ps, attention)
    return Forward(None, None, None, None, md if md is not None else np.zeros_like(ps), ps, att, ps_w, logits, probs)


def patch_similarities(state: ModelState, x: np.ndarray, chunk: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Min distances and similarities for many patches, in chunks."""
    md_parts = []
    for start in range(0, x.shape[0], chunk):
        md_parts.append(match(state, x[start : start + chunk])[4])
    md = np.concatenate(md_parts) if md_parts else np.zeros((0, state.config.k))
    return md, similarity(md)


def predict_probs(state: ModelState, x: np.ndarray, attention: bool | None = None, chunk: int = 1024) -> np.ndarray:
    md, ps = patch_similarities(state, x, chunk)
    return forward_from_similarities(state, ps, md, attention).probs


def backward(
    state: ModelState,
    fwd: Forward,
    g_logits: np.ndarray | None = None,
    g_probs: np.ndarray | None = None,
    g_md: np.ndarray | None = None,
    g_a: np.ndarray | None = None,
    wrt=GROUPS,
) -> ParamVector:
    """Gradient of a loss given its partials w.r.t. logits/probs, min distances and attention."""
    wrt = set(wrt)
    grads = state.params.zeros_like()
    n, k = fwd.ps.shape
    gl = np.zeros((n, len(CLASSES))) if g_logits is None else g_logits.copy()
    if g_probs is not None:
        p = fwd.probs
        gl += p * (g_probs - (g_probs * p).sum(axis=-1, keepdims=True))

    if "fc" in wrt:
        grads["fc"] = gl.T @ fwd.ps_w
    upstream = wrt & {"encoder", "prototypes", "attention"}
    if not upstream:
        return grads

    g_psw = gl @ state.theta
    if fwd.att is not None:
        g_att_out = g_psw * fwd.ps
        if g_a is not None:
            g_att_out = g_att_out + g_a
        g_att, g_ps_in = attention_backward(fwd.att, g_att_out, state.attention)
        if "attention" in wrt:
            grads["attention.w1"], grads["attention.b1"] = g_att.w1, g_att.b1
            grads["attention.w2"], grads["attention.b2"] = g_att.w2, g_att.b2
        g_ps = g_psw * fwd.att.a + g_ps_in
    else:
        g_ps = g_psw

    if not wrt & {"encoder", "prototypes"}:
        return grads
    if fwd.delta is None:
        raise LayoutError("forward was computed from cached similarities; no path to encoder/prototypes")
    g_md_tot = g_ps * similarity_grad(fwd.md)
    if g_md is not None:
        g_md_tot = g_md_tot + g_md
    g_delta = 2.0 * g_md_tot[..., None] * fwd.delta
    if "prototypes" in wrt:
        grads["prototypes"] = -g_delta.sum(axis=0)
    if "encoder" in wrt:
        r = fwd.latent.shape[1]
        onehot = np.zeros((n, k, r))
        onehot[np.arange(n)[:, None], np.arange(k)[None, :], fwd.nearest] = 1.0
        g_latent = np.matmul(onehot.transpose(0, 2, 1), g_delta)
        g_enc = encode_backward(fwd.enc, g_latent, state.encoder)
        grads["encoder.w1"], grads["encoder.b1"] = g_enc.w1, g_enc.b1
        grads["encoder.w2"], grads["encoder.b2"] = g_enc.w2, g_enc.b2
    return grads
