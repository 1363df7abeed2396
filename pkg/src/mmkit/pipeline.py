"""Training-sample construction and mixture sampling.

A sample is built from a pre-tokenized record in five steps: pick the target
modality among those present, independently keep or drop each remaining
modality, pick the denoising paradigm for the target, generate the
corruption masks, and prepend the task prefix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping, Optional, Sequence

import numpy as np

from mmkit.denoiser import (
    CorruptionPlan,
    DenoiserConfig,
    Paradigm,
    build_corruption_plan,
    choose_paradigm,
)
from mmkit.modality import BudgetSet, MAX_HISTORY_FRAMES, PAPER_BUDGETS, subsample_count
from mmkit.serialization import canonical_dumps
from mmkit.token_space import (
    AUDIO_HISTORY_REF0,
    AUDIO_INPUT_REF,
    IMAGE_HISTORY_REF0,
    IMAGE_INPUT_REF,
    PAPER_SPACE,
    TokenSpace,
)

TARGET_MODALITIES = ("text", "image", "audio")
INPUT_MODALITIES = ("text", "image", "audio", "image_history", "audio_history")


class ContractError(ValueError):
    pass


# --------------------------------------------------------------------------
# mixtures


@dataclass(frozen=True)
class MixtureSpec:
    name: str
    groups: dict  # group -> rate (percent)
    corpora: dict  # corpus -> (group, rate)

    def __post_init__(self):
        total = sum(self.groups.values())
        if abs(total - 100.0) > 0.1:
            raise ValueError(f"mixture {self.name!r} group rates sum to {total}, expected 100")
        if self.corpora:
            leaf = sum(r for _, r in self.corpora.values())
            if abs(leaf - 100.0) > 0.1:
                raise ValueError(f"mixture {self.name!r} corpus rates sum to {leaf}, expected 100")

    @classmethod
    def from_dict(cls, d: Mapping) -> "MixtureSpec":
        groups, corpora = {}, {}
        for g, body in d["groups"].items():
            groups[g] = float(body["rate"])
            for c, rate in body.get("corpora", {}).items():
                corpora[c] = (g, float(rate))
        return cls(d["name"], groups, corpora)

    def sample_groups(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draw ``n`` group names; via corpora when the mixture lists them."""
        if self.corpora:
            names = list(self.corpora)
            p = np.array([self.corpora[c][1] for c in names])
            idx = rng.choice(len(names), size=n, p=p / p.sum())
            group_of = np.array([self.corpora[c][0] for c in names], dtype=object)
            return group_of[idx]
        names = list(self.groups)
        p = np.array([self.groups[g] for g in names])
        return np.array(names, dtype=object)[rng.choice(len(names), size=n, p=p / p.sum())]


def load_mixture(name: str) -> MixtureSpec:
    """Load a bundled preset (``paper-pretrain``/``paper-instruct``) or a JSON file path."""
    bundled = {"paper-pretrain": "paper_pretrain.json", "paper-instruct": "paper_instruct.json"}
    if name in bundled:
        text = resources.files("mmkit.data").joinpath(bundled[name]).read_text()
    else:
        with open(name) as fh:
            text = fh.read()
    return MixtureSpec.from_dict(json.loads(text))


def worker_rngs(seed: int, n_workers: int) -> list[np.random.Generator]:
    """Independent, non-overlapping streams for parallel workers."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_workers)]


# --------------------------------------------------------------------------
# records and samples


@dataclass(frozen=True)
class ExampleRecord:
    text: Optional[tuple[int, ...]] = None
    image: bool = False
    audio: bool = False
    image_history: int = 0
    audio_history: int = 0

    def __post_init__(self):
        if self.text is not None:
            object.__setattr__(self, "text", tuple(int(t) for t in self.text))
        for kind in ("image_history", "audio_history"):
            n = getattr(self, kind)
            if not 0 <= n <= MAX_HISTORY_FRAMES:
                raise ContractError(f"{kind} holds at most {MAX_HISTORY_FRAMES} frames, got {n}")
        if not self.present():
            raise ContractError("record has no modalities")

    def present(self) -> tuple[str, ...]:
        out = []
        if self.text:
            out.append("text")
        if self.image:
            out.append("image")
        if self.audio:
            out.append("audio")
        if self.image_history:
            out.append("image_history")
        if self.audio_history:
            out.append("audio_history")
        return tuple(out)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExampleRecord":
        return cls(d.get("text"), bool(d.get("image", False)), bool(d.get("audio", False)),
                   int(d.get("image_history", 0)), int(d.get("audio_history", 0)))


_DEFAULT_PARADIGMS = {
    "Text": {"R": 1.0, "S": 1.0, "X": 1.0},
    "Image": {"R": 1.0, "S": 1.0},
    "Audio": {"R": 1.0, "S": 1.0},
}


@dataclass(frozen=True)
class SampleWeights:
    target: Mapping[str, float] = field(default_factory=lambda: {"text": 1.0, "image": 1.0, "audio": 1.0})
    paradigms: Mapping[str, Mapping[str, float]] = field(default_factory=lambda: _DEFAULT_PARADIGMS)
    # keep[target][modality]; unspecified pairs use default_keep.
    keep: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    default_keep: float = 0.5

    def keep_prob(self, target: str, modality: str) -> float:
        return float(self.keep.get(target, {}).get(modality, self.default_keep))


@dataclass(frozen=True)
class SampleConfig:
    denoiser: DenoiserConfig = DenoiserConfig()
    budgets: BudgetSet = PAPER_BUDGETS
    keep_fraction: float = 0.5
    text_max: int = 512
    image_latents: int = 32
    audio_latents: int = 16


@dataclass(frozen=True)
class SampleSpec:
    target: str
    kept_inputs: tuple[str, ...]
    paradigm: Paradigm
    plan: CorruptionPlan
    prefix: tuple[int, int]
    input_text: tuple[int, ...]
    image_history: int
    audio_history: int
    enc_len: int
    dec_len: int

    def to_record(self) -> dict:
        rec = self.plan.to_record()
        rec.update(target=self.target, kept_inputs=list(self.kept_inputs), prompt_tokens=list(self.prefix)
                   + list(self.input_text), enc_len=self.enc_len, dec_len=self.dec_len,
                   image_history=self.image_history, audio_history=self.audio_history)
        return rec

    def to_jsonl(self) -> str:
        return canonical_dumps(self.to_record())


def _weighted_choice(rng, options: Sequence[str], weights: Mapping[str, float]) -> str:
    w = np.array([float(weights.get(o, 0.0)) for o in options])
    if w.sum() <= 0:
        raise ContractError(f"no positive weight among {list(options)}")
    return options[int(rng.choice(len(options), p=w / w.sum()))]


def construct_sample(record: ExampleRecord, rng: np.random.Generator, weights: SampleWeights = SampleWeights(),
                     config: SampleConfig = SampleConfig(), space: TokenSpace = PAPER_SPACE) -> SampleSpec:
    present = record.present()
    targets = [m for m in present if m in TARGET_MODALITIES]
    if not targets:
        raise ContractError("record has no modality that can be a target")

    # 1. target, 2. inputs to keep
    target = _weighted_choice(rng, targets, weights.target)
    kept = tuple(m for m in present if m != target and rng.random() < weights.keep_prob(target, m))

    # 3. objective
    mod = target.capitalize()
    para_w = {f"{mod}-{k}": w for k, w in weights.paradigms.get(mod, {}).items()}
    paradigm, prefix = choose_paradigm(rng, para_w, space)

    # 4. masks
    text = list(record.text or ())[:config.text_max]
    payload = {"text": text, "image": record.image, "audio": record.audio}
    plan = build_corruption_plan(payload, paradigm, rng, config.denoiser, space)

    # 5. prefix + input assembly
    d = config.denoiser
    if target == "text":
        input_text = plan.input_tokens if plan.input_present else ()
    else:
        input_text = tuple(text) if "text" in kept else ()
    enc = len(prefix) + len(input_text)
    grids = {"image": d.image_input_grid, "audio": d.audio_input_grid}
    for m in ("image", "audio"):
        n = grids[m][0] * grids[m][1]
        if m == target and plan.input_present:
            enc += int((~plan.input_mask).sum())
        elif m in kept:
            enc += subsample_count(n, config.keep_fraction)
    img_h = record.image_history if "image_history" in kept else 0
    aud_h = record.audio_history if "audio_history" in kept else 0
    enc += img_h * config.image_latents + aud_h * config.audio_latents
    dec = plan.target_length
    b = config.budgets
    if enc > b.encoder_max or dec > b.decoder_max:
        raise ContractError(f"sample needs {enc}/{dec} tokens, maxima are {b.encoder_max}/{b.decoder_max}")
    return SampleSpec(target, kept, paradigm, plan, prefix, tuple(input_text), img_h, aud_h, enc, dec)


# --------------------------------------------------------------------------
# prompts with history references


@dataclass(frozen=True)
class HistoryRef:
    """Insert the reference token for ``kind``/``frame`` before text position ``position``.

    ``kind`` is ``image_input``, ``audio_input``, ``image_history`` or
    ``audio_history``; ``frame`` only matters for histories.
    """

    kind: str
    position: int
    frame: int = 0


def reference_token(ref: HistoryRef, space: TokenSpace = PAPER_SPACE) -> int:
    if ref.kind == "image_input":
        return space.ref(IMAGE_INPUT_REF)
    if ref.kind == "audio_input":
        return space.ref(AUDIO_INPUT_REF)
    if ref.kind in ("image_history", "audio_history"):
        if not 0 <= ref.frame < MAX_HISTORY_FRAMES:
            raise ContractError(f"history frame {ref.frame} outside 0..{MAX_HISTORY_FRAMES - 1}")
        base = IMAGE_HISTORY_REF0 if ref.kind == "image_history" else AUDIO_HISTORY_REF0
        return space.ref(base + ref.frame)
    raise ContractError(f"unknown reference kind {ref.kind!r}")


def assemble_prompt(spec: SampleSpec, refs: Sequence[HistoryRef] = (), space: TokenSpace = PAPER_SPACE) -> list[int]:
    """Prefix + input text with reference tokens spliced in at their positions."""
    available = {
        "image_input": "image" in spec.kept_inputs or (spec.target == "image" and spec.plan.input_present),
        "audio_input": "audio" in spec.kept_inputs or (spec.target == "audio" and spec.plan.input_present),
    }
    frames = {"image_history": spec.image_history, "audio_history": spec.audio_history}
    text = list(spec.input_text)
    inserts: dict[int, list[int]] = {}
    for ref in refs:
        tok = reference_token(ref, space)
        if ref.kind in available and not available[ref.kind]:
            raise ContractError(f"{ref.kind} is referenced but not part of the input")
        if ref.kind in frames and ref.frame >= frames[ref.kind]:
            raise ContractError(f"{ref.kind} frame {ref.frame} referenced but only {frames[ref.kind]} present")
        if not 0 <= ref.position <= len(text):
            raise ContractError(f"reference position {ref.position} outside text of length {len(text)}")
        inserts.setdefault(ref.position, []).append(tok)
    out = list(spec.prefix)
    for i in range(len(text) + 1):
        out.extend(inserts.get(i, ()))
        if i < len(text):
            out.append(text[i])
    return out
