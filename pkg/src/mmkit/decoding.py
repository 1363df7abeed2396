"""Inference-time decoding rules operating on supplied logits/probabilities.

Logit processing order for one step: classifier-free guidance, then
temperature, then the allowed-token mask, then nucleus filtering.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from mmkit.token_space import Box2D


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class DecodePreset:
    temperature: float = 1.0
    top_p: float = 0.95
    cfg_scale: Optional[float] = None
    negative_prompt: Optional[str] = None
    eos_gate: bool = False
    nms_threshold: Optional[float] = None


PRESETS = {
    "image_gen": DecodePreset(1.0, 0.95, 10.0, "An image of a random picture."),
    "audio_gen": DecodePreset(1.0, 0.95),
    "dense_label": DecodePreset(1.0, 0.95),
    "segmentation": DecodePreset(1.0, 0.97),
    "localization": DecodePreset(eos_gate=True, nms_threshold=0.8),
}


def format_presets() -> str:
    lines = []
    for name, p in PRESETS.items():
        parts = [f"temperature={p.temperature}", f"top_p={p.top_p}"]
        if p.cfg_scale is not None:
            parts.append(f"cfg_scale={p.cfg_scale}")
            parts.append(f"negative_prompt={p.negative_prompt!r}")
        if p.eos_gate:
            parts.append("eos_gate=on (P(EOS) > 0.5)")
        if p.nms_threshold is not None:
            parts.append(f"nms_threshold={p.nms_threshold}")
        lines.append(f"{name:<14}" + " ".join(parts))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    finite = np.isfinite(z)
    if not finite.any():
        raise ContractError("no finite logits")
    e = np.where(finite, np.exp(z - z[finite].max()), 0.0)
    return e / e.sum()


def top_p_filter(probs, p: float) -> tuple[np.ndarray, np.ndarray]:
    """Smallest high-probability prefix whose mass reaches ``p``.

    Sorting is by descending probability with ties broken by lower token id.
    Returns ``(kept ids in sorted order, renormalized distribution)``.
    """
    if not 0 < p <= 1:
        raise ContractError(f"top_p must be in (0, 1], got {p}")
    probs = np.asarray(probs, dtype=np.float64)
    order = np.lexsort((np.arange(probs.size), -probs))
    order = order[probs[order] > 0]
    csum = np.cumsum(probs[order])
    n = int(np.searchsorted(csum, p, side="left")) + 1
    kept = order[:min(n, order.size)]
    out = np.zeros_like(probs)
    out[kept] = probs[kept]
    return kept, out / out.sum()


def cfg_mix(logits_cond, logits_uncond, alpha: float) -> np.ndarray:
    """``uncond + alpha * (cond - uncond)``; the endpoints alpha=0/1 are returned exactly."""
    c = np.asarray(logits_cond, dtype=np.float64)
    u = np.asarray(logits_uncond, dtype=np.float64)
    if c.shape != u.shape:
        raise ContractError(f"logit shapes differ: {c.shape} vs {u.shape}")
    if alpha == 1:
        return c.copy()
    if alpha == 0:
        return u.copy()
    return u + alpha * (c - u)


def eos_gate(probs, eos_id: int, mode: str = "localization", threshold: float = 0.5) -> bool:
    """Whether this step emits EOS.

    In localization mode EOS needs probability above ``threshold`` even when
    it is the argmax, since mass can be split over many similar location
    tokens. Default mode is plain argmax.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if mode == "localization":
        return bool(probs[eos_id] > threshold)
    if mode == "default":
        return int(np.argmax(probs)) == eos_id
    raise ValueError(f"unknown eos gate mode {mode!r}")


def gated_argmax(probs, eos_id: int, mode: str = "localization") -> int:
    probs = np.asarray(probs, dtype=np.float64)
    if eos_gate(probs, eos_id, mode):
        return eos_id
    masked = probs.copy()
    masked[eos_id] = -np.inf
    return int(np.argmax(masked))


def sample(logits, rng: np.random.Generator, temperature: float = 1.0, top_p: float = 1.0,
           allowed: Optional[np.ndarray] = None) -> int:
    """Draw one token. ``temperature == 0`` means argmax over the allowed set."""
    z = np.asarray(logits, dtype=np.float64).copy()
    if allowed is not None:
        z[~np.asarray(allowed, dtype=bool)] = -np.inf
    if not np.isfinite(z).any():
        raise ContractError("no token left after masking")
    if temperature <= 0:
        return int(np.argmax(z))
    probs = softmax(z / temperature)
    _, filtered = top_p_filter(probs, top_p)
    return int(rng.choice(filtered.size, p=filtered))


def guided_step(logits_cond, logits_uncond, rng, preset: DecodePreset, allowed=None) -> int:
    z = logits_cond if preset.cfg_scale is None else cfg_mix(logits_cond, logits_uncond, preset.cfg_scale)
    return sample(z, rng, preset.temperature, preset.top_p, allowed)


# --------------------------------------------------------------------------
# boxes


def iou(a: Box2D, b: Box2D) -> float:
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    inter = ih * iw
    union = (a.y2 - a.y1) * (a.x2 - a.x1) + (b.y2 - b.y1) * (b.x2 - b.x1) - inter
    if union <= 0:
        # Two degenerate boxes: identical ones overlap fully.
        return 1.0 if a == b else 0.0
    return inter / union


def nms(boxes: Sequence[Box2D], scores: Sequence[float], threshold: float = 0.8) -> list[int]:
    """Greedy NMS; returns kept indices in descending-score order (ties by index)."""
    if len(boxes) != len(scores):
        raise ContractError(f"{len(boxes)} boxes but {len(scores)} scores")
    order = sorted(range(len(boxes)), key=lambda i: (-float(scores[i]), i))
    kept: list[int] = []
    for i in order:
        if all(iou(boxes[i], boxes[j]) <= threshold for j in kept):
            kept.append(i)
    return kept
