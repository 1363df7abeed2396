"""Binary fixtures for attention cases.

A fixture ``name`` is two files: ``name.bin`` holding q, k, v (and the mask
as 0/1 values, if present) back to back as little-endian float64, and
``name.json`` with shapes, the generating seed and the sha256 of the
reference QK-norm output bytes.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from mmkit.kernels import AttentionCase, qk_norm_attention

_ORDER = ("q", "k", "v", "mask")


def output_digest(out: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(out, dtype="<f8").tobytes()).hexdigest()


def save_case(path, case: AttentionCase, seed: int) -> dict:
    path = Path(path)
    arrays = {"q": case.q, "k": case.k, "v": case.v}
    if case.mask is not None:
        arrays["mask"] = case.mask.astype(np.float64)
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name in _ORDER:
            if name in arrays:
                fh.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())
    out, _ = qk_norm_attention(case)
    meta = {
        "dtype": "<f8",
        "order": [n for n in _ORDER if n in arrays],
        "shapes": {n: list(a.shape) for n, a in arrays.items()},
        "seed": seed,
        "expected_output_sha256": output_digest(out),
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta


def load_case(path) -> tuple[AttentionCase, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    raw = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    arrays, pos = {}, 0
    for name in meta["order"]:
        shape = tuple(meta["shapes"][name])
        n = int(np.prod(shape))
        arrays[name] = raw[pos:pos + n].reshape(shape).copy()
        pos += n
    if pos != raw.size:
        raise ValueError(f"fixture holds {raw.size} values, sidecar describes {pos}")
    mask = arrays.get("mask")
    case = AttentionCase(arrays["q"], arrays["k"], arrays["v"], None if mask is None else mask.astype(bool))
    return case, meta


def verify_case(path) -> bool:
    case, meta = load_case(path)
    out, _ = qk_norm_attention(case)
    return output_digest(out) == meta["expected_output_sha256"]
