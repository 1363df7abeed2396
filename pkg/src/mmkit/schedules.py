"""Optimizer schedules and gradient clipping."""

from __future__ import annotations

import numpy as np

WARMUP_STEPS = 5000

# Model sizes: transformer dims and the resampler width used with each.
MODEL_PRESETS = {
    "L": {"model_dims": 1024, "mlp_dims": 2816, "encoder_layers": 24, "decoder_layers": 24, "heads": 16,
          "params": "1.1B"},
    "XL": {"model_dims": 2048, "mlp_dims": 5120, "encoder_layers": 24, "decoder_layers": 24, "heads": 16,
           "params": "3.2B"},
    "XXL": {"model_dims": 3072, "mlp_dims": 8192, "encoder_layers": 24, "decoder_layers": 24, "heads": 24,
            "params": "6.8B"},
}

TRAINING = {"beta1": 0.9, "clip_norm": 1.0, "warmup_steps": WARMUP_STEPS,
            "pretrain_steps": 1_500_000, "instruct_steps": 1_500_000,
            "pretrain_batch": 512, "instruct_batch": 256}


def lr_schedule(k: int, base: float, warmup: int = WARMUP_STEPS) -> float:
    """Linear warm-up to ``base`` at ``warmup``, then ``1/sqrt(k)`` decay."""
    if k < 1:
        raise ValueError(f"step must be >= 1, got {k}")
    return base * min(k / warmup, (warmup / k) ** 0.5)


def beta2_schedule(k: int) -> float:
    if k < 1:
        raise ValueError(f"step must be >= 1, got {k}")
    return 1.0 - k ** -0.8


def clip_global_norm(grads, threshold: float = 1.0) -> np.ndarray:
    g = np.asarray(grads, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise ValueError("gradients contain non-finite values")
    norm = float(np.linalg.norm(g))
    if norm <= threshold:
        return g
    scale = threshold / norm
    out = g * scale
    # rounding can leave the norm one ulp above the threshold
    while np.linalg.norm(out) > threshold:
        scale = np.nextafter(scale, 0.0)
        out = g * scale
    return out
