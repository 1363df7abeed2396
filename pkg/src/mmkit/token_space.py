"""Shared vocabulary layout and discrete encodings for sparse structures.

Every continuous quantity (coordinates, angles, depths, action deltas) is
mapped onto a shared range of 1000 location tokens. The layout of the global
vocabulary is::

    [text | sentinels | reference specials | locations | reserved | image VQ | audio VQ]

Text is handled by an injected tokenizer (anything with ``encode(str) ->
list[int]`` and ``decode(list[int]) -> str``); :class:`ByteTokenizer` is a
tiny stand-in used by tests and the CLI.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence, Union

import numpy as np

NUM_KEYPOINTS = 17
MISSING_TEXT = "MISSING"

# COCO order.
KEYPOINT_NAMES = (
    "nose", "left eye", "right eye", "left ear", "right ear",
    "left shoulder", "right shoulder", "left elbow", "right elbow",
    "left wrist", "right wrist", "left hip", "right hip",
    "left knee", "right knee", "left ankle", "right ankle",
)

RANGE_NAMES = ("text", "sentinel", "ref", "location", "reserved", "image_vq", "audio_vq")

# Reference specials, local indices inside the "ref" range.
IMAGE_INPUT_REF = 0
AUDIO_INPUT_REF = 1
IMAGE_HISTORY_REF0 = 2
AUDIO_HISTORY_REF0 = 6
MAX_HISTORY = 4

MODALITY_PREFIXES = ("Text", "Image", "Audio")
PARADIGM_PREFIXES = ("R", "S", "X")


class CodecError(ValueError):
    """Raised for out-of-range values or malformed token sequences."""


class Tokenizer(Protocol):
    def encode(self, text: str) -> list[int]: ...

    def decode(self, ids: Sequence[int]) -> str: ...


class ByteTokenizer:
    """UTF-8 byte tokenizer: byte ``b`` maps to text id ``b + offset``.

    Ids below ``offset`` are left for pad/bos/eos.
    """

    def __init__(self, offset: int = 3):
        self.offset = offset

    def encode(self, text: str) -> list[int]:
        return [b + self.offset for b in text.encode("utf-8")]

    def decode(self, ids: Sequence[int]) -> str:
        return bytes(int(i) - self.offset for i in ids).decode("utf-8")


@dataclass(frozen=True)
class TokenSpace:
    """Contiguous vocabulary layout.

    ``text_total`` is the size of the text vocabulary block as reported for
    the model (33280). Whatever it leaves after text, sentinel, reference and
    location ranges is reserved; the first six reserved ids hold the
    modality/paradigm prefix tokens.
    """

    text_base: int = 32000
    sentinel_count: int = 200
    ref_special_count: int = 10
    location_count: int = 1000
    text_total: int = 33280
    image_vq_vocab: int = 16512
    audio_vq_vocab: int = 8320
    pad_id: int = 0
    eos_id: int = 1
    offsets: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        accounted = self.text_base + self.sentinel_count + self.ref_special_count + self.location_count
        reserved = self.text_total - accounted
        if reserved < len(MODALITY_PREFIXES) + len(PARADIGM_PREFIXES):
            raise ValueError(
                f"text_total={self.text_total} leaves {reserved} reserved ids; "
                "at least 6 are needed for prefix tokens"
            )
        sizes = (
            self.text_base, self.sentinel_count, self.ref_special_count,
            self.location_count, reserved, self.image_vq_vocab, self.audio_vq_vocab,
        )
        if min(sizes) <= 0:
            raise ValueError("all vocabulary ranges must be non-empty")
        offsets = {}
        start = 0
        for name, size in zip(RANGE_NAMES, sizes):
            offsets[name] = (start, size)
            start += size
        object.__setattr__(self, "offsets", offsets)

    @property
    def vocab_size(self) -> int:
        start, size = self.offsets["audio_vq"]
        return start + size

    def range_of(self, name: str) -> tuple[int, int]:
        """(first global id, size) of a named range."""
        return self.offsets[name]

    def to_global(self, name: str, local: int) -> int:
        start, size = self.offsets[name]
        if not 0 <= local < size:
            raise CodecError(f"local index {local} outside {name} range of size {size}")
        return start + local

    def to_local(self, token: int) -> tuple[str, int]:
        """Map a global id back to ``(range name, local index)``."""
        if not 0 <= token < self.vocab_size:
            raise CodecError(f"token {token} outside vocabulary of size {self.vocab_size}")
        for name in RANGE_NAMES:
            start, size = self.offsets[name]
            if token < start + size:
                return name, token - start
        raise AssertionError("unreachable")

    def loc(self, index: int) -> int:
        return self.to_global("location", index)

    def loc_index(self, token: int) -> int:
        name, local = self.to_local(token)
        if name != "location":
            raise CodecError(f"token {token} is a {name} token, expected a location token")
        return local

    def is_location(self, token: int) -> bool:
        start, size = self.offsets["location"]
        return start <= token < start + size

    def sentinel(self, k: int) -> int:
        return self.to_global("sentinel", k)

    def is_sentinel(self, token: int) -> bool:
        start, size = self.offsets["sentinel"]
        return start <= token < start + size

    def ref(self, k: int) -> int:
        return self.to_global("ref", k)

    def prefix_tokens(self, modality: str, kind: str) -> tuple[int, int]:
        """Global ids of the ``[Modality] [Kind]`` task prefix pair."""
        m = MODALITY_PREFIXES.index(modality)
        k = PARADIGM_PREFIXES.index(kind)
        start, _ = self.offsets["reserved"]
        return start + m, start + len(MODALITY_PREFIXES) + k

    def location_mask(self) -> np.ndarray:
        mask = np.zeros(self.vocab_size, dtype=bool)
        start, size = self.offsets["location"]
        mask[start:start + size] = True
        return mask


PAPER_SPACE = TokenSpace()


# --------------------------------------------------------------------------
# scalar quantization


def quantize(v: float, bins: int = 1000) -> int:
    if bins < 1:
        raise CodecError(f"bins must be >= 1, got {bins}")
    if not 0.0 <= v <= 1.0:
        raise CodecError(f"value {v} outside [0, 1]")
    return min(int(math.floor(v * bins)), bins - 1)


def dequantize(index: int, bins: int = 1000) -> float:
    if not 0 <= index < bins:
        raise CodecError(f"index {index} outside [0, {bins})")
    return (index + 0.5) / bins


def _affine_to_unit(value: float, lo: float, hi: float, name: str) -> float:
    if not lo <= value <= hi:
        raise CodecError(f"{name}={value} outside [{lo}, {hi}]")
    return (value - lo) / (hi - lo)


def _encode_ranged(space: TokenSpace, value: float, lo: float, hi: float, name: str) -> int:
    return space.loc(quantize(_affine_to_unit(value, lo, hi, name), space.location_count))


def _decode_ranged(space: TokenSpace, token: int, lo: float, hi: float) -> float:
    return lo + (hi - lo) * dequantize(space.loc_index(token), space.location_count)


# --------------------------------------------------------------------------
# geometric entities


def _check_unit(name: str, value: float):
    if not 0.0 <= value <= 1.0:
        raise CodecError(f"{name}={value} outside [0, 1]")


@dataclass(frozen=True)
class Point2D:
    y: float
    x: float

    def __post_init__(self):
        _check_unit("y", self.y)
        _check_unit("x", self.x)


@dataclass(frozen=True)
class Box2D:
    y1: float
    x1: float
    y2: float
    x2: float

    def __post_init__(self):
        for name in ("y1", "x1", "y2", "x2"):
            _check_unit(name, getattr(self, name))
        if self.y1 > self.y2 or self.x1 > self.x2:
            raise CodecError(f"malformed box {self}: expected y1 <= y2 and x1 <= x2")

    def as_array(self) -> np.ndarray:
        return np.array([self.y1, self.x1, self.y2, self.x2])


@dataclass(frozen=True)
class CameraPose:
    theta: float
    phi: float
    r: float

    def __post_init__(self):
        for name in ("theta", "phi"):
            if not -math.pi <= getattr(self, name) <= math.pi:
                raise CodecError(f"{name}={getattr(self, name)} outside [-pi, pi]")
        if self.r < 0:
            raise CodecError(f"r={self.r} must be >= 0")


@dataclass(frozen=True)
class Cuboid3D:
    u: float
    v: float
    z: float
    w_bar: float
    h_bar: float
    l_bar: float
    p: tuple[float, float, float, float, float, float]

    def __post_init__(self):
        if self.z <= 0:
            raise CodecError(f"z={self.z} must be > 0")
        if len(self.p) != 6:
            raise CodecError(f"rotation needs 6 components, got {len(self.p)}")
        object.__setattr__(self, "p", tuple(float(c) for c in self.p))


@dataclass(frozen=True)
class KeypointSet:
    """17 COCO keypoints; ``None`` marks a keypoint that is not visible."""

    person_box: Box2D
    keypoints: tuple[Union[Point2D, None], ...]

    def __post_init__(self):
        if len(self.keypoints) != NUM_KEYPOINTS:
            raise CodecError(f"expected {NUM_KEYPOINTS} keypoints, got {len(self.keypoints)}")
        object.__setattr__(self, "keypoints", tuple(self.keypoints))


@dataclass(frozen=True)
class DiscreteAction:
    command: str


@dataclass(frozen=True)
class ContinuousAction:
    """Up to six deltas (position xyz, rotation xyz) plus an optional gripper flag."""

    deltas: tuple[float, ...]
    gripper_open: Union[bool, None] = None

    def __post_init__(self):
        if len(self.deltas) > 6:
            raise CodecError(f"at most 6 continuous deltas, got {len(self.deltas)}")
        object.__setattr__(self, "deltas", tuple(float(d) for d in self.deltas))


ActionCommand = Union[DiscreteAction, ContinuousAction]


@dataclass(frozen=True)
class CuboidNorm:
    z_max: float = 100.0
    dim_bound: float = 4.0
    rot_bound: float = 1.0


@dataclass(frozen=True)
class ActionRanges:
    """Symmetric physical range per continuous delta (dataset-specific)."""

    pos: tuple[float, float] = (-1.0, 1.0)
    rot: tuple[float, float] = (-math.pi, math.pi)

    def for_index(self, i: int) -> tuple[float, float]:
        return self.pos if i < 3 else self.rot


# --------------------------------------------------------------------------
# encoders / decoders


def encode_point(p: Point2D, space: TokenSpace = PAPER_SPACE) -> list[int]:
    n = space.location_count
    return [space.loc(quantize(p.y, n)), space.loc(quantize(p.x, n))]


def decode_point(tokens: Sequence[int], space: TokenSpace = PAPER_SPACE) -> Point2D:
    if len(tokens) != 2:
        raise CodecError(f"point needs 2 tokens, got {len(tokens)}")
    n = space.location_count
    y, x = (dequantize(space.loc_index(t), n) for t in tokens)
    return Point2D(y, x)


def encode_box(b: Box2D, space: TokenSpace = PAPER_SPACE) -> list[int]:
    n = space.location_count
    return [space.loc(quantize(c, n)) for c in (b.y1, b.x1, b.y2, b.x2)]


def decode_box(tokens: Sequence[int], space: TokenSpace = PAPER_SPACE) -> Box2D:
    if len(tokens) != 4:
        raise CodecError(f"box needs 4 tokens, got {len(tokens)}")
    n = space.location_count
    return Box2D(*(dequantize(space.loc_index(t), n) for t in tokens))


def encode_camera_pose(c: CameraPose, r_max: float = 10.0, space: TokenSpace = PAPER_SPACE) -> list[int]:
    if c.r > r_max:
        raise CodecError(f"r={c.r} exceeds r_max={r_max}")
    return [
        _encode_ranged(space, c.theta, -math.pi, math.pi, "theta"),
        _encode_ranged(space, c.phi, -math.pi, math.pi, "phi"),
        _encode_ranged(space, c.r, 0.0, r_max, "r"),
    ]


def decode_camera_pose(tokens: Sequence[int], r_max: float = 10.0, space: TokenSpace = PAPER_SPACE) -> CameraPose:
    if len(tokens) != 3:
        raise CodecError(f"camera pose needs 3 tokens, got {len(tokens)}")
    return CameraPose(
        _decode_ranged(space, tokens[0], -math.pi, math.pi),
        _decode_ranged(space, tokens[1], -math.pi, math.pi),
        _decode_ranged(space, tokens[2], 0.0, r_max),
    )


def _cuboid_fields(norm: CuboidNorm):
    d, r = norm.dim_bound, norm.rot_bound
    names = ["u", "v", "z", "w_bar", "h_bar", "l_bar"] + [f"p{i + 1}" for i in range(6)]
    ranges = [(0.0, 1.0), (0.0, 1.0), (0.0, norm.z_max)] + [(-d, d)] * 3 + [(-r, r)] * 6
    return names, ranges


def encode_cuboid(c: Cuboid3D, norm: CuboidNorm = CuboidNorm(), space: TokenSpace = PAPER_SPACE) -> list[int]:
    """12 tokens: ``[u, v, z, w, h, l, p1..p6]``."""
    names, ranges = _cuboid_fields(norm)
    values = [c.u, c.v, c.z, c.w_bar, c.h_bar, c.l_bar, *c.p]
    return [_encode_ranged(space, v, lo, hi, n) for v, n, (lo, hi) in zip(values, names, ranges)]


def decode_cuboid(tokens: Sequence[int], norm: CuboidNorm = CuboidNorm(), space: TokenSpace = PAPER_SPACE) -> Cuboid3D:
    if len(tokens) != 12:
        raise CodecError(f"cuboid needs 12 tokens, got {len(tokens)}")
    _, ranges = _cuboid_fields(norm)
    vals = [_decode_ranged(space, t, lo, hi) for t, (lo, hi) in zip(tokens, ranges)]
    return Cuboid3D(*vals[:6], p=tuple(vals[6:]))


def encode_keypoints(k: KeypointSet, tokenizer: Tokenizer, space: TokenSpace = PAPER_SPACE) -> list[int]:
    missing = tokenizer.encode(MISSING_TEXT)
    out: list[int] = []
    for kp in k.keypoints:
        out.extend(missing if kp is None else encode_point(kp, space))
    return out


def decode_keypoints(tokens: Sequence[int], tokenizer: Tokenizer, space: TokenSpace = PAPER_SPACE) -> list:
    missing = tokenizer.encode(MISSING_TEXT)
    out: list = []
    i = 0
    while i < len(tokens):
        if space.is_location(tokens[i]):
            out.append(decode_point(tokens[i:i + 2], space))
            i += 2
        elif list(tokens[i:i + len(missing)]) == missing:
            out.append(None)
            i += len(missing)
        else:
            raise CodecError(f"unexpected token {tokens[i]} at position {i} in keypoint sequence")
    if len(out) != NUM_KEYPOINTS:
        raise CodecError(f"expected {NUM_KEYPOINTS} keypoint entries, decoded {len(out)}")
    return out


def build_keypoint_constraint(
    prefix: Sequence[int],
    tokenizer: Tokenizer,
    force_visible: bool = True,
    space: TokenSpace = PAPER_SPACE,
) -> np.ndarray:
    """Allowed-token mask for the next keypoint decoding step.

    ``prefix`` is what has been generated so far in the keypoint target. At
    the start of an entry the model may emit a location token, or the first
    MISSING token when ``force_visible`` is off. Mid-entry steps allow only the
    continuation; after all 17 entries only EOS is allowed.
    """
    missing = tokenizer.encode(MISSING_TEXT)
    mask = np.zeros(space.vocab_size, dtype=bool)
    entries, i = 0, 0
    while i < len(prefix):
        if space.is_location(prefix[i]):
            if i + 1 == len(prefix):
                return space.location_mask()
            i += 2
        else:
            chunk = list(prefix[i:i + len(missing)])
            if chunk != missing[:len(chunk)]:
                raise CodecError(f"prefix token {prefix[i]} at {i} is not a valid keypoint entry")
            if len(chunk) < len(missing):
                mask[missing[len(chunk)]] = True
                return mask
            i += len(missing)
        entries += 1
    if entries >= NUM_KEYPOINTS:
        mask[space.eos_id] = True
        return mask
    mask = space.location_mask()
    if not force_visible:
        mask[missing[0]] = True
    return mask


def encode_action(a: ActionCommand, tokenizer: Tokenizer, ranges: ActionRanges = ActionRanges(),
                  space: TokenSpace = PAPER_SPACE) -> list[int]:
    if isinstance(a, DiscreteAction):
        return tokenizer.encode(a.command)
    out = []
    for i, d in enumerate(a.deltas):
        lo, hi = ranges.for_index(i)
        out.append(_encode_ranged(space, d, lo, hi, f"delta[{i}]"))
    if a.gripper_open is not None:
        out.append(space.loc(space.location_count - 1 if a.gripper_open else 0))
    return out


def decode_action(tokens: Sequence[int], n_deltas: int, has_gripper: bool,
                  ranges: ActionRanges = ActionRanges(), space: TokenSpace = PAPER_SPACE) -> ContinuousAction:
    if len(tokens) != n_deltas + int(has_gripper):
        raise CodecError(f"expected {n_deltas + int(has_gripper)} action tokens, got {len(tokens)}")
    deltas = tuple(_decode_ranged(space, t, *ranges.for_index(i)) for i, t in enumerate(tokens[:n_deltas]))
    gripper = None
    if has_gripper:
        gripper = space.loc_index(tokens[-1]) >= space.location_count // 2
    return ContinuousAction(deltas, gripper)
