"""Attention kernels: rotary embeddings, QK-normalized and scaled cosine attention.

All kernels are plain numpy and default to float64. Arrays follow the
``[heads, seq, head_dim]`` convention. Masks are boolean ``[seq_q, seq_kv]``
(or broadcastable with a leading heads axis) where ``True`` means "may attend".
Masked logits are set to ``-inf`` so masked weights are exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

COSINE_SCALE_MIN = 0.01
COSINE_SCALE_MAX = 100.0
COSINE_EPS = 1e-6
LN_EPS = 1e-6


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class AttentionCase:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    mask: Optional[np.ndarray] = None
    positions: Optional[np.ndarray] = None

    def __post_init__(self):
        q, k, v = self.q, self.k, self.v
        if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
            raise ContractError("q, k, v must be [heads, seq, head_dim]")
        if q.shape[0] != k.shape[0] or k.shape[:2] != v.shape[:2] or q.shape[2] != k.shape[2]:
            raise ContractError(f"incompatible shapes q{q.shape} k{k.shape} v{v.shape}")
        if self.mask is not None and self.mask.shape[-2:] != (q.shape[1], k.shape[1]):
            raise ContractError(f"mask shape {self.mask.shape} does not match [{q.shape[1]}, {k.shape[1]}]")

    @property
    def heads(self) -> int:
        return self.q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.q.shape[2]


def random_case(heads=4, seq=8, head_dim=16, seed=0, seq_kv=None, causal=False) -> AttentionCase:
    rng = np.random.default_rng(seed)
    seq_kv = seq if seq_kv is None else seq_kv
    q = rng.standard_normal((heads, seq, head_dim))
    k = rng.standard_normal((heads, seq_kv, head_dim))
    v = rng.standard_normal((heads, seq_kv, head_dim))
    mask = np.tril(np.ones((seq, seq_kv), dtype=bool)) if causal else None
    return AttentionCase(q, k, v, mask)


# --------------------------------------------------------------------------
# rotary embeddings


def _rotate_pairs(x: np.ndarray, angles: np.ndarray) -> np.ndarray:
    cos, sin = np.cos(angles), np.sin(angles)
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def rope_1d(x: np.ndarray, pos, base: float = 10000.0) -> np.ndarray:
    """Rotate adjacent feature pairs of ``x[..., seq, d]`` by ``pos * base^(-2m/d)``."""
    x = np.asarray(x)
    d = x.shape[-1]
    if d % 2:
        raise ValueError(f"head_dim must be even for RoPE, got {d}")
    pos = np.asarray(pos, dtype=np.float64)
    if pos.shape != (x.shape[-2],):
        raise ValueError(f"need one position per token: pos {pos.shape}, seq {x.shape[-2]}")
    inv_freq = base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    return _rotate_pairs(x, pos[:, None] * inv_freq[None, :])


def rope_2d(x: np.ndarray, pos, base: float = 10000.0) -> np.ndarray:
    """First half of each head rotated by the row index, second half by the column."""
    x = np.asarray(x)
    d = x.shape[-1]
    if d % 4:
        raise ValueError(f"head_dim must be divisible by 4 for 2D RoPE, got {d}")
    pos = np.asarray(pos)
    if pos.shape != (x.shape[-2], 2):
        raise ValueError(f"need an (i, j) pair per token, got positions {pos.shape}")
    h = d // 2
    return np.concatenate([rope_1d(x[..., :h], pos[:, 0], base), rope_1d(x[..., h:], pos[:, 1], base)], axis=-1)


def grid_positions(rows: int, cols: int) -> np.ndarray:
    """Raster-order ``(i, j)`` positions for a ``rows x cols`` patch grid."""
    i, j = np.divmod(np.arange(rows * cols), cols)
    return np.stack([i, j], axis=1)


# --------------------------------------------------------------------------
# shared softmax-attention core


def _masked_softmax(logits: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    if mask is not None:
        mask = np.broadcast_to(mask, logits.shape)
        if not mask.any(axis=-1).all():
            raise ContractError("every query row needs at least one allowed key")
        logits = np.where(mask, logits, -np.inf)
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


def _core_forward(qn, kn, v, scale, mask):
    """``softmax(scale * qn kn^T) v``; scale broadcast per head."""
    sim = np.einsum("hqd,hkd->hqk", qn, kn)
    w = _masked_softmax(np.asarray(scale)[..., None, None] * sim, mask)
    return np.einsum("hqk,hkd->hqd", w, v), w, sim


def _core_backward(qn, kn, v, scale, w, sim, d_out):
    scale = np.asarray(scale)[..., None, None]
    dv = np.einsum("hqk,hqd->hkd", w, d_out)
    dw = np.einsum("hqd,hkd->hqk", d_out, v)
    ds = w * (dw - (dw * w).sum(axis=-1, keepdims=True))
    dqn = np.einsum("hqk,hkd->hqd", scale * ds, kn)
    dkn = np.einsum("hqk,hqd->hkd", scale * ds, qn)
    d_scale = (ds * sim).sum(axis=(-2, -1))
    return dqn, dkn, dv, d_scale


def softmax_attention(case: AttentionCase):
    """Plain masked ``softmax(q k^T / sqrt(d)) v`` with no normalization."""
    scale = np.full(case.heads, 1.0 / np.sqrt(case.head_dim))
    out, w, _ = _core_forward(case.q, case.k, case.v, scale, case.mask)
    return out, w


# --------------------------------------------------------------------------
# QK-normalized attention


@dataclass(frozen=True)
class QKNormParams:
    """Per-head LayerNorm affine parameters, each ``[heads, head_dim]``."""

    q_gain: np.ndarray
    q_bias: np.ndarray
    k_gain: np.ndarray
    k_bias: np.ndarray

    @classmethod
    def identity(cls, heads: int, head_dim: int) -> "QKNormParams":
        one, zero = np.ones((heads, head_dim)), np.zeros((heads, head_dim))
        return cls(one, zero, one.copy(), zero.copy())

    @classmethod
    def random(cls, heads: int, head_dim: int, seed=0) -> "QKNormParams":
        rng = np.random.default_rng(seed)
        return cls(1.0 + 0.1 * rng.standard_normal((heads, head_dim)), 0.1 * rng.standard_normal((heads, head_dim)),
                   1.0 + 0.1 * rng.standard_normal((heads, head_dim)), 0.1 * rng.standard_normal((heads, head_dim)))


def _layer_norm(x, gain, bias, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat if gain is None else gain[:, None, :] * xhat + bias[:, None, :]
    return y, (xhat, inv)


def _layer_norm_backward(dy, gain, cache):
    xhat, inv = cache
    dxhat = dy if gain is None else dy * gain[:, None, :]
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    if gain is None:
        return dx, None, None
    return dx, (dy * xhat).sum(axis=1), dy.sum(axis=1)


def qk_norm_attention(case: AttentionCase, params: Optional[QKNormParams] = None, eps: float = LN_EPS):
    """LayerNorm queries and keys over ``head_dim``, then scaled dot-product attention.

    ``params=None`` disables the learned affine. Logits keep the usual
    ``1/sqrt(head_dim)`` factor. Returns ``(output, weights)``.
    """
    qn, _ = _layer_norm(case.q, *_gains(params, "q"), eps)
    kn, _ = _layer_norm(case.k, *_gains(params, "k"), eps)
    scale = np.full(case.heads, 1.0 / np.sqrt(case.head_dim))
    out, w, _ = _core_forward(qn, kn, case.v, scale, case.mask)
    return out, w


def _gains(params, which):
    if params is None:
        return None, None
    return getattr(params, f"{which}_gain"), getattr(params, f"{which}_bias")


# --------------------------------------------------------------------------
# scaled cosine attention


def clamp_scale(logit_scale, heads: int) -> np.ndarray:
    s = np.broadcast_to(np.asarray(logit_scale, dtype=np.float64), (heads,))
    if np.any(s <= 0):
        raise ContractError("cosine logit scale must be positive")
    return np.clip(s, COSINE_SCALE_MIN, COSINE_SCALE_MAX)


def _unit_rows(x, eps):
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    denom = np.maximum(norm, eps)
    return x / denom, denom, norm > eps


def _unit_rows_backward(dxn, xn, denom, active):
    proj = np.where(active, (dxn * xn).sum(axis=-1, keepdims=True), 0.0)
    return (dxn - xn * proj) / denom


def cosine_similarity_logits(case: AttentionCase, logit_scale=10.0, eps: float = COSINE_EPS) -> np.ndarray:
    """Unmasked logits ``s * cos(q_i, k_j)``, bounded by ``[-s, s]``."""
    s = clamp_scale(logit_scale, case.heads)
    qn, _, _ = _unit_rows(case.q, eps)
    kn, _, _ = _unit_rows(case.k, eps)
    cos = np.clip(np.einsum("hqd,hkd->hqk", qn, kn), -1.0, 1.0)
    return s[:, None, None] * cos


def cosine_attention(case: AttentionCase, logit_scale=10.0, eps: float = COSINE_EPS):
    """Attention on cosine similarities scaled by a clamped per-head scalar.

    Rows with norm below ``eps`` are divided by ``eps`` instead of their
    norm, so zero rows give zero logits rather than NaN.
    """
    s = clamp_scale(logit_scale, case.heads)
    qn, _, _ = _unit_rows(case.q, eps)
    kn, _, _ = _unit_rows(case.k, eps)
    sim = np.clip(np.einsum("hqd,hkd->hqk", qn, kn), -1.0, 1.0)
    w = _masked_softmax(s[:, None, None] * sim, case.mask)
    return np.einsum("hqk,hkd->hqd", w, case.v), w


# --------------------------------------------------------------------------
# backward


def attention_backward(kind: str, case: AttentionCase, d_out: np.ndarray, params=None, logit_scale=10.0,
                       eps: Optional[float] = None) -> dict[str, np.ndarray]:
    """Analytic gradients of ``sum(output * d_out)``.

    ``kind`` is ``"plain"``, ``"qk_norm"`` (``params`` is a
    :class:`QKNormParams` or None) or ``"cosine"`` (``logit_scale`` scalar or per-head). Returns gradients
    keyed ``q, k, v`` plus ``q_gain, q_bias, k_gain, k_bias`` or ``logit_scale``.
    """
    d_out = np.asarray(d_out, dtype=np.float64)
    if d_out.shape != (case.heads, case.q.shape[1], case.v.shape[2]):
        raise ContractError(f"upstream gradient shape {d_out.shape} does not match output")
    if kind == "plain":
        scale = np.full(case.heads, 1.0 / np.sqrt(case.head_dim))
        _, w, sim = _core_forward(case.q, case.k, case.v, scale, case.mask)
        dq, dk, dv, _ = _core_backward(case.q, case.k, case.v, scale, w, sim, d_out)
        return {"q": dq, "k": dk, "v": dv}
    if kind == "qk_norm":
        eps = LN_EPS if eps is None else eps
        qg, qb = _gains(params, "q")
        kg, kb = _gains(params, "k")
        qn, qcache = _layer_norm(case.q, qg, qb, eps)
        kn, kcache = _layer_norm(case.k, kg, kb, eps)
        scale = np.full(case.heads, 1.0 / np.sqrt(case.head_dim))
        _, w, sim = _core_forward(qn, kn, case.v, scale, case.mask)
        dqn, dkn, dv, _ = _core_backward(qn, kn, case.v, scale, w, sim, d_out)
        dq, dqg, dqb = _layer_norm_backward(dqn, qg, qcache)
        dk, dkg, dkb = _layer_norm_backward(dkn, kg, kcache)
        grads = {"q": dq, "k": dk, "v": dv}
        if params is not None:
            grads.update(q_gain=dqg, q_bias=dqb, k_gain=dkg, k_bias=dkb)
        return grads
    if kind == "cosine":
        eps = COSINE_EPS if eps is None else eps
        raw = np.broadcast_to(np.asarray(logit_scale, dtype=np.float64), (case.heads,))
        s = clamp_scale(raw, case.heads)
        qn, qd, qa = _unit_rows(case.q, eps)
        kn, kd, ka = _unit_rows(case.k, eps)
        raw_sim = np.einsum("hqd,hkd->hqk", qn, kn)
        sim = np.clip(raw_sim, -1.0, 1.0)
        w = _masked_softmax(s[:, None, None] * sim, case.mask)
        dv = np.einsum("hqk,hqd->hkd", w, d_out)
        dw = np.einsum("hqd,hkd->hqk", d_out, case.v)
        ds = w * (dw - (dw * w).sum(axis=-1, keepdims=True))
        d_scale = (ds * sim).sum(axis=(-2, -1))
        dsim = s[:, None, None] * ds * (np.abs(raw_sim) <= 1.0)
        dq = _unit_rows_backward(np.einsum("hqk,hkd->hqd", dsim, kn), qn, qd, qa)
        dk = _unit_rows_backward(np.einsum("hqk,hqd->hkd", dsim, qn), kn, kd, ka)
        d_scale = d_scale * ((raw >= COSINE_SCALE_MIN) & (raw <= COSINE_SCALE_MAX))
        return {"q": dq, "k": dk, "v": dv, "logit_scale": d_scale}
    raise ValueError(f"unknown attention kind {kind!r}")


# --------------------------------------------------------------------------
# finite-difference gradient check


def _loss(kind, case, d_out, params, logit_scale):
    if kind == "qk_norm":
        out, _ = qk_norm_attention(case, params)
    else:
        out, _ = cosine_attention(case, logit_scale)
    return float((out * d_out).sum())


def numeric_gradients(kind: str, case: AttentionCase, d_out, params=None, logit_scale=10.0, h: float = 1e-5):
    """Central finite differences of ``sum(output * d_out)`` for every input."""
    tensors = {"q": case.q, "k": case.k, "v": case.v}
    if kind == "qk_norm" and params is not None:
        tensors.update(q_gain=params.q_gain, q_bias=params.q_bias, k_gain=params.k_gain, k_bias=params.k_bias)
    if kind == "cosine":
        tensors["logit_scale"] = np.broadcast_to(np.asarray(logit_scale, dtype=np.float64), (case.heads,))
    work = {name: np.array(t, dtype=np.float64) for name, t in tensors.items()}

    def evaluate():
        c = AttentionCase(work["q"], work["k"], work["v"], case.mask)
        p = None
        if kind == "qk_norm" and params is not None:
            p = QKNormParams(work["q_gain"], work["q_bias"], work["k_gain"], work["k_bias"])
        return _loss(kind, c, d_out, p, work.get("logit_scale", logit_scale))

    grads = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = evaluate()
            flat[i] = orig - h
            down = evaluate()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads[name] = g
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-2) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries whose true gradient is ~0 from being judged on
    finite-difference round-off alone.
    """
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


@dataclass
class GradCheckReport:
    kind: str
    seed: int
    max_errors: dict
    worst_index: dict
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.max_errors.values())


def gradcheck(kind: str, heads=4, seq=8, head_dim=16, seed=0, tolerance=1e-6, h=1e-5,
              backward=None, causal=True) -> GradCheckReport:
    """Compare :func:`attention_backward` against central differences on a random case.

    ``backward`` substitutes the analytic gradient function (negative
    controls use this to inject a broken implementation).
    """
    rng = np.random.default_rng(seed)
    case = random_case(heads, seq, head_dim, seed=rng.integers(2**32), causal=causal)
    d_out = rng.standard_normal((heads, seq, head_dim))
    params = QKNormParams.random(heads, head_dim, seed=rng.integers(2**32)) if kind == "qk_norm" else None
    scale = rng.uniform(2.0, 20.0, size=heads) if kind == "cosine" else 10.0
    backward = attention_backward if backward is None else backward
    analytic = backward(kind, case, d_out, params=params, logit_scale=scale)
    numeric = numeric_gradients(kind, case, d_out, params=params, logit_scale=scale, h=h)
    max_errors, worst = {}, {}
    for name, num in numeric.items():
        err = relative_error(np.asarray(analytic[name]), num)
        idx = np.unravel_index(int(np.argmax(err)), err.shape)
        max_errors[name] = float(err[idx])
        worst[name] = tuple(int(i) for i in idx)
    return GradCheckReport(kind, seed, max_errors, worst, tolerance)
