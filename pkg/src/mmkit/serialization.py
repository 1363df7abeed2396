"""Canonical JSON lines and run-length mask encoding.

Output is byte-stable: keys sorted, floats always printed with six decimals,
no whitespace variation. That lets fixture files be compared with ``diff``.
"""

from __future__ import annotations

import json
import math

import numpy as np


def _fmt(obj) -> str:
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise ValueError(f"cannot serialize non-finite float {x}")
        s = f"{x:.6f}"
        return "0.000000" if s == "-0.000000" else s
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        items = sorted(obj.items(), key=lambda kv: kv[0])
        return "{" + ",".join(f"{json.dumps(str(k))}:{_fmt(v)}" for k, v in items) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ",".join(_fmt(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def canonical_dumps(obj) -> str:
    """Serialize ``obj`` as one canonical JSON line (no trailing newline)."""
    return _fmt(obj)


def rle_encode(mask: np.ndarray) -> dict:
    """Run-length encode a boolean array in row-major order.

    Returns ``{"shape": [...], "start": bool, "runs": [...]}`` where runs
    alternate starting from the value ``start``.
    """
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return {"shape": list(mask.shape), "start": False, "runs": []}
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    return {"shape": list(mask.shape), "start": bool(flat[0]), "runs": np.diff(bounds).tolist()}


def rle_decode(rec: dict) -> np.ndarray:
    shape = tuple(rec["shape"])
    out = np.empty(int(np.prod(shape)), dtype=bool)
    value, pos = bool(rec["start"]), 0
    for run in rec["runs"]:
        out[pos:pos + run] = value
        pos += run
        value = not value
    if pos != out.size:
        raise ValueError(f"runs cover {pos} cells, shape {shape} needs {out.size}")
    return out.reshape(shape)
