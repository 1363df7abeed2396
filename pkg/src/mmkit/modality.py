"""Shape, budget and framing arithmetic for each modality.

Preset keys follow the row names of the model's input-representation table
(``fft_hop_length``, ``mel_bins``, ``subsegment_hops``, ...) so a preset can be
audited line by line against it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

KINDS = ("image_in", "image_history", "audio_in", "audio_history", "text", "image_vq_target", "audio_vq_target")
MAX_HISTORY_FRAMES = 4


class ShapeError(ValueError):
    pass


class BudgetError(ValueError):
    pass


@dataclass(frozen=True)
class ModalityShape:
    kind: str
    height: int
    width: int
    patch: int
    rows: int
    cols: int

    @property
    def count(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class BudgetSet:
    encoder_max: int = 1152
    decoder_max: int = 2048
    packed_encoder: int = 864
    packed_decoder: int = 1280

    def __post_init__(self):
        if self.packed_encoder > self.encoder_max or self.packed_decoder > self.decoder_max:
            raise BudgetError(f"packed budgets exceed maxima: {self}")

    @property
    def packed_slots(self) -> int:
        return self.packed_encoder + self.packed_decoder

    @property
    def unpacked_slots(self) -> int:
        return self.encoder_max + self.decoder_max


PAPER_BUDGETS = BudgetSet()


def token_grid(kind: str, dims: tuple[int, int], patch: int) -> ModalityShape:
    """Patch grid for a ``height x width`` input (``mels x hops`` for audio)."""
    if kind not in KINDS:
        raise ShapeError(f"unknown modality kind {kind!r}")
    h, w = dims
    if patch <= 0 or h % patch or w % patch:
        raise ShapeError(f"{kind} dims {h}x{w} not divisible by patch {patch}")
    return ModalityShape(kind, h, w, patch, h // patch, w // patch)


def vq_target_tokens(kind: str, dims: tuple[int, int], compression: int) -> int:
    """Number of discrete VQ tokens for an image or spectrogram target."""
    if kind not in ("image", "audio", "image_vq_target", "audio_vq_target"):
        raise ShapeError(f"{kind!r} has no VQ target")
    h, w = dims
    if compression <= 0 or h % compression or w % compression:
        raise ShapeError(f"{kind} dims {h}x{w} not divisible by {compression}")
    return (h // compression) * (w // compression)


@dataclass(frozen=True)
class AudioSegment:
    samples: int
    seconds: float
    sample_rate: int

    def bounds(self, i: int) -> tuple[int, int]:
        """Half-open sample range ``[start, stop)`` of segment ``i``."""
        if i < 0:
            raise ShapeError(f"segment index must be >= 0, got {i}")
        return i * self.samples, (i + 1) * self.samples

    def extract(self, waveform: np.ndarray, i: int) -> np.ndarray:
        """Slice segment ``i``; a short final segment is zero-padded."""
        start, stop = self.bounds(i)
        seg = np.asarray(waveform)[start:stop]
        if seg.shape[0] < self.samples:
            pad = [(0, self.samples - seg.shape[0])] + [(0, 0)] * (seg.ndim - 1)
            seg = np.pad(seg, pad)
        return seg

    def count(self, n_samples: int) -> int:
        return max(1, math.ceil(n_samples / self.samples))


def audio_segment(sample_rate: int, hop: int, hops: int) -> AudioSegment:
    if min(sample_rate, hop, hops) <= 0:
        raise ShapeError("sample rate, hop and hop count must be positive")
    samples = hop * hops
    return AudioSegment(samples, samples / sample_rate, sample_rate)


def history_budget(frames: int, latents_per_frame: int) -> int:
    if not 1 <= frames <= MAX_HISTORY_FRAMES:
        raise BudgetError(f"history holds 1..{MAX_HISTORY_FRAMES} frames, got {frames}")
    return frames * latents_per_frame


def subsample_count(count: int, keep_fraction: float) -> int:
    if not 0 < keep_fraction <= 1:
        raise ShapeError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    return math.ceil(count * keep_fraction)


def subsample_patches(count: int, keep_fraction: float, seed) -> np.ndarray:
    """Sorted, duplicate-free indices of the patches to keep."""
    k = subsample_count(count, keep_fraction)
    if k == count:
        return np.arange(count)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(count, size=k, replace=False))


def depth_to_gray(depth, max_depth: float):
    d = np.asarray(depth, dtype=np.float64)
    if max_depth <= 0:
        raise ValueError("max_depth must be positive")
    if np.any(d < 0) or np.any(d > max_depth):
        raise ValueError(f"depth outside [0, {max_depth}]")
    return d / max_depth


def gray_to_depth(gray, max_depth: float):
    return np.asarray(gray, dtype=np.float64) * max_depth


def normal_to_rgb(normal, atol: float = 1e-6):
    """Map unit normals (last axis xyz) to rgb in [0, 1]."""
    n = np.asarray(normal, dtype=np.float64)
    norms = np.linalg.norm(n, axis=-1)
    if np.any(np.abs(norms - 1.0) > atol):
        raise ValueError("surface normals must have unit length")
    return (n + 1.0) / 2.0


def rgb_to_normal(rgb):
    return np.asarray(rgb, dtype=np.float64) * 2.0 - 1.0


# Rows of the input representation table. Pretrain sub-sample keeps 50%,
# instruction tuning keeps 87.5%.
PAPER_MODALITIES = {
    "audio_in": {
        "sample_rate": 16000,
        "fft_hop_length": 256,
        "fft_window_size": 1024,
        "mel_bins": 128,
        "subsegment_hops": 256,
        "fmin": 0,
        "fmax": 8000,
        "ast_patch_size": 16,
    },
    "image_in": {"vit_patch_size": 16, "pretraining_size": [384, 384]},
    "text": {"seq_length": 512},
    "image_history": {"vit_patch_size": 16, "pretraining_size": [256, 256], "max_num_segments": 4, "latent_size": 32},
    "audio_history": {"ast_patch_size": 16, "pretraining_size": [128, 256], "max_num_segments": 4, "latent_size": 16},
    "image_vq_target": {"size": [256, 256], "compression": 8},
    "audio_vq_target": {"size": [256, 128], "patch": 8},
    "subsample": {"pretrain": 0.5, "instruct": 0.875},
}


def input_shapes(preset: dict = PAPER_MODALITIES) -> dict[str, ModalityShape]:
    a = preset["audio_in"]
    return {
        "image_in": token_grid("image_in", tuple(preset["image_in"]["pretraining_size"]),
                               preset["image_in"]["vit_patch_size"]),
        "audio_in": token_grid("audio_in", (a["mel_bins"], a["subsegment_hops"]), a["ast_patch_size"]),
        "image_history": token_grid("image_history", tuple(preset["image_history"]["pretraining_size"]),
                                    preset["image_history"]["vit_patch_size"]),
        "audio_history": token_grid("audio_history", tuple(preset["audio_history"]["pretraining_size"]),
                                    preset["audio_history"]["ast_patch_size"]),
    }


def target_tokens(preset: dict = PAPER_MODALITIES) -> dict[str, int]:
    return {
        "image": vq_target_tokens("image", tuple(preset["image_vq_target"]["size"]),
                                  preset["image_vq_target"]["compression"]),
        "audio": vq_target_tokens("audio", tuple(preset["audio_vq_target"]["size"]),
                                  preset["audio_vq_target"]["patch"]),
        "text": preset["text"]["seq_length"],
    }


def max_encoder_tokens(preset: dict = PAPER_MODALITIES, stage: str = "instruct") -> int:
    """Largest encoder input under a stage's patch sub-sampling."""
    keep = preset["subsample"][stage]
    shapes = input_shapes(preset)
    total = preset["text"]["seq_length"]
    total += subsample_count(shapes["image_in"].count, keep)
    total += subsample_count(shapes["audio_in"].count, keep)
    for kind in ("image_history", "audio_history"):
        h = preset[kind]
        total += history_budget(h["max_num_segments"], h["latent_size"])
    return total


def validate_preset(preset: dict = PAPER_MODALITIES, budgets: BudgetSet = PAPER_BUDGETS,
                    stage: str = "pretrain") -> None:
    """Check that maximal inputs and targets fit the unpacked budgets.

    Only the given sub-sampling stage is checked: with every modality present
    at 87.5% the encoder input (1320 tokens) does not fit 1152, so the
    instruction stage relies on examples rarely carrying all modalities.
    """
    n = max_encoder_tokens(preset, stage)
    if n > budgets.encoder_max:
        raise BudgetError(f"{stage} inputs need {n} tokens, encoder_max is {budgets.encoder_max}")
    t = target_tokens(preset)
    if max(t.values()) > budgets.decoder_max:
        raise BudgetError(f"targets need {max(t.values())} tokens, decoder_max is {budgets.decoder_max}")
