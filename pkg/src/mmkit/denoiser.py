"""Multimodal mixture of denoisers.

Paradigms:

* ``R`` - span corruption for text, random patch masking for image/audio.
* ``S`` - generate the target modality from the other inputs only.
* ``X`` - extreme span corruption (text only).

For masked image/audio denoising the decoder uses a dynamic mask: a target
position whose patch was masked on the encoder side is visible to the
decoder only on its own row, i.e. only while it is the token being
predicted from.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from mmkit.serialization import canonical_dumps, rle_encode
from mmkit.token_space import PAPER_SPACE, TokenSpace

MODALITIES = ("Text", "Image", "Audio")
KINDS = ("R", "S", "X")
VALID_PARADIGMS = tuple((m, k) for m in MODALITIES for k in KINDS if not (k == "X" and m != "Text"))


class ConfigError(ValueError):
    pass


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class Paradigm:
    modality: str
    kind: str

    def __post_init__(self):
        if (self.modality, self.kind) not in VALID_PARADIGMS:
            raise ConfigError(f"unsupported paradigm [{self.modality}] [{self.kind}]")

    def prefix(self, space: TokenSpace = PAPER_SPACE) -> tuple[int, int]:
        return space.prefix_tokens(self.modality, self.kind)

    @property
    def name(self) -> str:
        return f"{self.modality}-{self.kind}"


def choose_paradigm(rng: np.random.Generator, weights: Mapping[str, float],
                    space: TokenSpace = PAPER_SPACE) -> tuple[Paradigm, tuple[int, int]]:
    """Draw a paradigm from weights keyed ``"Text-R"``, ``"Image-S"``, ...

    Missing keys count as zero weight.
    """
    names = [f"{m}-{k}" for m, k in VALID_PARADIGMS]
    unknown = set(weights) - set(names)
    if unknown:
        raise ConfigError(f"unknown paradigm keys {sorted(unknown)}")
    w = np.array([float(weights.get(n, 0.0)) for n in names])
    if np.any(w < 0) or w.sum() <= 0:
        raise ConfigError("paradigm weights must be non-negative with a positive sum")
    i = int(rng.choice(len(names), p=w / w.sum()))
    p = Paradigm(*VALID_PARADIGMS[i])
    return p, p.prefix(space)


# --------------------------------------------------------------------------
# text span corruption


def apply_spans(tokens: Sequence[int], spans: Sequence[tuple[int, int]],
                space: TokenSpace = PAPER_SPACE) -> tuple[list[int], list[int]]:
    """Replace each half-open span with one sentinel.

    Returns ``(inputs, targets)`` in the usual T5 layout: the target is each
    sentinel followed by the tokens it replaced.
    """
    inputs, targets = [], []
    pos = 0
    for n, (start, stop) in enumerate(sorted(spans)):
        if start < pos or stop <= start or stop > len(tokens):
            raise ValueError(f"invalid or overlapping span ({start}, {stop})")
        s = space.sentinel(n)
        inputs.extend(tokens[pos:start])
        inputs.append(s)
        targets.append(s)
        targets.extend(tokens[start:stop])
        pos = stop
    inputs.extend(tokens[pos:])
    return inputs, targets


def reconstruct(inputs: Sequence[int], targets: Sequence[int], space: TokenSpace = PAPER_SPACE) -> list[int]:
    """Invert :func:`apply_spans`."""
    spans: dict[int, list[int]] = {}
    current = None
    for t in targets:
        if space.is_sentinel(t):
            current = t
            spans[t] = []
        elif current is None:
            raise ValueError("target must start with a sentinel")
        else:
            spans[current].append(t)
    out = []
    for t in inputs:
        if space.is_sentinel(t):
            out.extend(spans[t])
        else:
            out.append(t)
    return out


def _random_segmentation(rng, n_items: int, n_segments: int) -> np.ndarray:
    """Split ``n_items`` into ``n_segments`` positive parts uniformly at random."""
    cuts = np.sort(rng.choice(np.arange(1, n_items), size=n_segments - 1, replace=False))
    return np.diff(np.concatenate([[0], cuts, [n_items]]))


def sample_spans(length: int, rate: float, mean_span: float, rng: np.random.Generator,
                 max_spans: int = 200) -> list[tuple[int, int]]:
    """T5-style noise spans covering ``round(length * rate)`` tokens."""
    if not 0 < rate < 1:
        raise ConfigError(f"corruption rate must be in (0, 1), got {rate}")
    if mean_span < 1:
        raise ConfigError(f"mean span must be >= 1, got {mean_span}")
    if length < 2:
        return []
    n_noise = min(max(int(round(length * rate)), 0), length - 1)
    if n_noise == 0:
        return []
    n_spans = max(1, min(int(round(n_noise / mean_span)), n_noise, length - n_noise, max_spans))
    noise_lens = _random_segmentation(rng, n_noise, n_spans) if n_spans > 1 else np.array([n_noise])
    keep_lens = _random_segmentation(rng, length - n_noise, n_spans) if n_spans > 1 else np.array([length - n_noise])
    # keep, noise, keep, noise, ...: every span is preceded by at least one kept token.
    spans, pos = [], 0
    for keep, noise in zip(keep_lens, noise_lens):
        pos += int(keep)
        spans.append((pos, pos + int(noise)))
        pos += int(noise)
    return spans


def span_corrupt_text(tokens: Sequence[int], rate: float, mean_span: float, rng: np.random.Generator,
                      space: TokenSpace = PAPER_SPACE) -> tuple[list[int], list[int]]:
    spans = sample_spans(len(tokens), rate, mean_span, rng, space.sentinel_count)
    return apply_spans(list(tokens), spans, space)


# --------------------------------------------------------------------------
# patch masking and decoder masks


def patch_mask(grid: tuple[int, int], rate: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean ``[rows, cols]`` mask with exactly ``round(rate * count)`` True cells."""
    if not 0 <= rate <= 1:
        raise ConfigError(f"mask rate must be in [0, 1], got {rate}")
    rows, cols = grid
    n = rows * cols
    k = int(round(rate * n))
    flat = np.zeros(n, dtype=bool)
    flat[rng.choice(n, size=k, replace=False)] = True
    return flat.reshape(rows, cols)


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


@dataclass(frozen=True)
class DecoderMask:
    n: int
    masked: tuple[int, ...]
    allowed: np.ndarray = field(repr=False)


def dynamic_decoder_mask(n: int, masked: Sequence[int]) -> DecoderMask:
    """``A[i, j] = (j <= i) and (j not in M or j == i)``."""
    m = np.zeros(n, dtype=bool)
    idx = np.asarray(sorted(set(int(j) for j in masked)), dtype=int)
    if idx.size and (idx[0] < 0 or idx[-1] >= n):
        raise ValueError(f"masked positions must lie in [0, {n})")
    m[idx] = True
    allowed = causal_mask(n) & ~m[None, :]
    allowed[np.arange(n), np.arange(n)] = True
    return DecoderMask(n, tuple(idx.tolist()), allowed)


def sparse_pattern(grid: tuple[int, int], kind: str, window: int = 3) -> np.ndarray:
    """Row, column or conv-shaped causal attention over a raster-ordered grid.

    ``conv`` allows keys at most ``window - 1`` rows above the query and at
    most ``window - 1`` columns to either side, restricted to earlier raster
    positions, so a window equal to the grid extent is the full causal mask.
    """
    rows, cols = grid
    n = rows * cols
    r, c = np.divmod(np.arange(n), cols)
    causal = causal_mask(n)
    if kind == "row":
        keep = r[:, None] == r[None, :]
    elif kind == "column":
        keep = c[:, None] == c[None, :]
    elif kind == "conv":
        if window < 1 or window > min(rows, cols):
            raise ConfigError(f"conv window {window} must be in [1, {min(rows, cols)}]")
        keep = (np.abs(r[:, None] - r[None, :]) < window) & (np.abs(c[:, None] - c[None, :]) < window)
    else:
        raise ConfigError(f"unknown sparse pattern {kind!r}")
    return causal & keep


def layer_sparse_schedule(n_layers: int, cycle: Sequence[str] = ("row", "column", "row", "conv")) -> list[str]:
    """Pattern per decoder layer by cycling; the final layer uses conv."""
    out = [cycle[i % len(cycle)] for i in range(n_layers)]
    if out:
        out[-1] = "conv"
    return out


def map_grid_mask(mask: np.ndarray, target_grid: tuple[int, int]) -> np.ndarray:
    """Project an input-patch mask onto a (possibly finer) target token grid by area."""
    rows, cols = mask.shape
    tr, tc = target_grid
    ri = (np.arange(tr) * rows) // tr
    ci = (np.arange(tc) * cols) // tc
    return mask[np.ix_(ri, ci)]


# --------------------------------------------------------------------------
# corruption plans


@dataclass(frozen=True)
class DenoiserConfig:
    r_rate: float = 0.15
    r_mean_span: float = 3.0
    x_rate: float = 0.5
    x_mean_span: float = 32.0
    patch_rate: float = 0.5
    image_input_grid: tuple[int, int] = (24, 24)
    image_target_grid: tuple[int, int] = (32, 32)
    audio_input_grid: tuple[int, int] = (8, 16)
    audio_target_grid: tuple[int, int] = (32, 16)


@dataclass(frozen=True)
class CorruptionPlan:
    """Everything needed to build encoder inputs and decoder targets.

    ``input_mask`` is True for dropped input units (text tokens or patches);
    ``masked_targets`` is the decoder dynamic-mask set M.
    """

    paradigm: Paradigm
    prefix: tuple[int, int]
    target_modality: str
    input_present: bool
    input_mask: Optional[np.ndarray]
    input_tokens: Optional[tuple[int, ...]]
    target_tokens: Optional[tuple[int, ...]]
    target_length: int
    masked_targets: tuple[int, ...]

    def decoder_mask(self) -> DecoderMask:
        return dynamic_decoder_mask(self.target_length, self.masked_targets)

    def to_record(self) -> dict:
        rec = {
            "paradigm": self.paradigm.name,
            "prefix": list(self.prefix),
            "target_modality": self.target_modality,
            "input_present": self.input_present,
            "input_mask": None if self.input_mask is None else rle_encode(self.input_mask),
            "target_length": self.target_length,
            "M": list(self.masked_targets),
        }
        if self.input_tokens is not None:
            rec["input_tokens"] = list(self.input_tokens)
        if self.target_tokens is not None:
            rec["target_tokens"] = list(self.target_tokens)
        return rec

    def to_jsonl(self) -> str:
        return canonical_dumps(self.to_record())


def _target_len(modality: str, config: DenoiserConfig) -> int:
    r, c = config.image_target_grid if modality == "Image" else config.audio_target_grid
    return r * c


def build_corruption_plan(record: Mapping, paradigm: Paradigm, rng: np.random.Generator,
                          config: DenoiserConfig = DenoiserConfig(),
                          space: TokenSpace = PAPER_SPACE) -> CorruptionPlan:
    """Corrupt the target modality of ``record`` according to ``paradigm``.

    ``record`` maps lower-case modality names to payloads: ``"text"`` to a
    token list, ``"image"``/``"audio"`` to anything truthy (patch grids come
    from ``config``).
    """
    mod = paradigm.modality
    key = mod.lower()
    payload = record.get(key)
    if payload is None or payload is False:
        raise ContractError(f"target modality {key!r} is absent from the record")
    prefix = paradigm.prefix(space)

    if mod == "Text":
        tokens = list(payload)
        if paradigm.kind == "S":
            return CorruptionPlan(paradigm, prefix, key, False, None, None, tuple(tokens), len(tokens), ())
        rate, span = (config.r_rate, config.r_mean_span) if paradigm.kind == "R" else (config.x_rate, config.x_mean_span)
        spans = sample_spans(len(tokens), rate, span, rng, space.sentinel_count)
        inputs, targets = apply_spans(tokens, spans, space)
        mask = np.zeros(len(tokens), dtype=bool)
        for a, b in spans:
            mask[a:b] = True
        return CorruptionPlan(paradigm, prefix, key, True, mask, tuple(inputs), tuple(targets), len(targets), ())

    n_target = _target_len(mod, config)
    if paradigm.kind == "S":
        return CorruptionPlan(paradigm, prefix, key, False, None, None, None, n_target, ())
    grid = config.image_input_grid if mod == "Image" else config.audio_input_grid
    tgrid = config.image_target_grid if mod == "Image" else config.audio_target_grid
    mask = patch_mask(grid, config.patch_rate, rng)
    masked = np.flatnonzero(map_grid_mask(mask, tgrid).ravel())
    return CorruptionPlan(paradigm, prefix, key, True, mask, None, None, n_target, tuple(masked.tolist()))
