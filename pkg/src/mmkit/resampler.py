"""Perceiver resampler that compresses history frames into a few latents.

Each layer lets the latents cross-attend (scaled cosine attention) over the
frame tokens concatenated with the latents themselves, followed by a GELU
MLP; both sub-blocks are residual with pre-LayerNorm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from mmkit.kernels import AttentionCase, cosine_attention
from mmkit.modality import BudgetError, MAX_HISTORY_FRAMES


@dataclass(frozen=True)
class ResamplerConfig:
    latents: int = 32
    layers: int = 2
    dim: int = 768
    heads: int = 12
    head_dim: int = 64
    mlp_dim: int = 2048
    query_mode: str = "per_frame"
    logit_scale: float = 10.0

    def __post_init__(self):
        if self.latents <= 0:
            raise ValueError("latents must be positive")
        if self.query_mode not in ("per_frame", "joint"):
            raise ValueError(f"query_mode must be per_frame or joint, got {self.query_mode!r}")


# Model-size presets for the image / audio resamplers.
RESAMPLER_PRESETS = {
    (size, kind): ResamplerConfig(latents=32 if kind == "image" else 16, dim=dim, heads=heads, mlp_dim=mlp)
    for size, dim, heads, mlp in (("L", 768, 12, 2048), ("XL", 1024, 16, 4096), ("XXL", 1024, 16, 4096))
    for kind in ("image", "audio")
}


@dataclass(frozen=True)
class ResamplerParams:
    latents: np.ndarray
    layers: tuple = field(default_factory=tuple)


def init_params(config: ResamplerConfig, seed=0) -> ResamplerParams:
    rng = np.random.default_rng(seed)
    d, inner, m = config.dim, config.heads * config.head_dim, config.mlp_dim

    def dense(n_in, n_out):
        return rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)

    layers = []
    for _ in range(config.layers):
        layers.append({
            "wq": dense(d, inner), "wk": dense(d, inner), "wv": dense(d, inner), "wo": dense(inner, d),
            "w1": dense(d, m), "b1": np.zeros(m), "w2": dense(m, d), "b2": np.zeros(d),
            "scale": np.full(config.heads, config.logit_scale),
        })
    return ResamplerParams(rng.standard_normal((config.latents, d)), tuple(layers))


def _ln(x, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _split(x, heads):
    n, inner = x.shape
    return x.reshape(n, heads, inner // heads).transpose(1, 0, 2)


def _block(x, media, layer, config):
    xn, mn = _ln(x), _ln(media)
    kv = np.concatenate([mn, xn], axis=0)
    q = _split(xn @ layer["wq"], config.heads)
    k = _split(kv @ layer["wk"], config.heads)
    v = _split(kv @ layer["wv"], config.heads)
    out, _ = cosine_attention(AttentionCase(q, k, v), layer["scale"])
    x = x + out.transpose(1, 0, 2).reshape(x.shape[0], -1) @ layer["wo"]
    h = gelu(_ln(x) @ layer["w1"] + layer["b1"])
    return x + h @ layer["w2"] + layer["b2"]


def _run(media, params, config):
    x = params.latents
    for layer in params.layers:
        x = _block(x, media, layer, config)
    return _ln(x)


def resample(frames: np.ndarray, config: ResamplerConfig, params: ResamplerParams) -> np.ndarray:
    """Compress ``frames [T, N, dim]`` to ``[T * latents, dim]`` (per_frame) or ``[latents, dim]`` (joint)."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[2] != config.dim:
        raise ValueError(f"frames must be [T, N, {config.dim}], got {frames.shape}")
    t = frames.shape[0]
    if not 1 <= t <= MAX_HISTORY_FRAMES:
        raise BudgetError(f"history holds 1..{MAX_HISTORY_FRAMES} frames, got {t}")
    if config.query_mode == "joint":
        return _run(frames.reshape(-1, config.dim), params, config)
    return np.concatenate([_run(frames[i], params, config) for i in range(t)], axis=0)
