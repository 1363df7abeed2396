"""Dynamic packing of two examples into one encoder/decoder sequence.

Packing is expressed as multiplication by one-hot matrices so it can run
between the modality encoders and the transformer on accelerator-friendly
dense ops: ``packed = P @ concat(a, b)`` and ``concat(a, b) = P.T @ packed``.

The streaming heuristic keeps a small pool. Each arrival is paired with the
largest pool member it fits with; otherwise it joins the pool, and when the
pool would exceed its capacity the largest held example is emitted alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from mmkit.modality import BudgetSet, PAPER_BUDGETS
from mmkit.serialization import canonical_dumps

PAD_SEGMENT = -1
POOL_CAPACITY = 10


class PackError(ValueError):
    pass


@dataclass(frozen=True)
class ExampleLens:
    id: int
    enc_len: int
    dec_len: int

    @property
    def size(self) -> int:
        return self.enc_len + self.dec_len

    def validate(self, budget: BudgetSet = PAPER_BUDGETS) -> None:
        if not 0 < self.enc_len <= budget.encoder_max:
            raise PackError(f"example {self.id}: enc_len {self.enc_len} outside (0, {budget.encoder_max}]")
        if not 0 < self.dec_len <= budget.decoder_max:
            raise PackError(f"example {self.id}: dec_len {self.dec_len} outside (0, {budget.decoder_max}]")

    def fits_alone(self, budget: BudgetSet = PAPER_BUDGETS) -> bool:
        return self.enc_len <= budget.packed_encoder and self.dec_len <= budget.packed_decoder


def can_pack(a: ExampleLens, b: ExampleLens, budget: BudgetSet = PAPER_BUDGETS) -> bool:
    return a.enc_len + b.enc_len <= budget.packed_encoder and a.dec_len + b.dec_len <= budget.packed_decoder


# --------------------------------------------------------------------------
# one-hot packing


@dataclass(frozen=True)
class PackMember:
    """Token blocks of one example; rows may be ids ``[n]`` or embeddings ``[n, d]``."""

    id: int
    enc: np.ndarray
    dec: np.ndarray
    dec_mask: Optional[np.ndarray] = None


def packing_matrix(lengths: Sequence[int], packed_len: int) -> np.ndarray:
    """One-hot ``[packed_len, sum(lengths)]`` placing members back to back."""
    total = int(sum(lengths))
    if total > packed_len:
        raise PackError(f"{total} tokens do not fit in {packed_len} slots")
    return np.eye(packed_len, total)


def segment_ids(lengths: Sequence[int], packed_len: int) -> np.ndarray:
    seg = np.full(packed_len, PAD_SEGMENT, dtype=np.int64)
    pos = 0
    for i, n in enumerate(lengths):
        seg[pos:pos + n] = i
        pos += n
    return seg


def _apply(P: np.ndarray, blocks: Sequence[np.ndarray]) -> np.ndarray:
    stacked = np.concatenate([np.asarray(b, dtype=np.float64) for b in blocks], axis=0)
    return P @ stacked


@dataclass
class PackedBatch:
    member_ids: tuple[int, ...]
    enc_lengths: tuple[int, ...]
    dec_lengths: tuple[int, ...]
    enc: np.ndarray
    dec: np.ndarray
    enc_segments: np.ndarray
    dec_segments: np.ndarray
    p_enc: np.ndarray = field(repr=False)
    p_dec: np.ndarray = field(repr=False)
    enc_mask: np.ndarray = field(repr=False)
    dec_mask: np.ndarray = field(repr=False)
    cross_mask: np.ndarray = field(repr=False)
    unpacked_budget: bool = False

    @property
    def real_tokens(self) -> int:
        return sum(self.enc_lengths) + sum(self.dec_lengths)

    @property
    def slots(self) -> int:
        return self.enc.shape[0] + self.dec.shape[0]


def build_masks(enc_segments: np.ndarray, dec_segments: np.ndarray,
                member_dec_masks: Sequence[Optional[np.ndarray]]):
    """Segment-gated encoder, decoder-self and decoder-to-encoder masks.

    The decoder self mask composes the segment gate with each member's own
    decoder mask (causal when ``None``) placed on its block of the diagonal.
    """
    enc_gate = (enc_segments[:, None] == enc_segments[None, :]) & (enc_segments[:, None] != PAD_SEGMENT)
    cross = (dec_segments[:, None] == enc_segments[None, :]) & (dec_segments[:, None] != PAD_SEGMENT)
    n = dec_segments.shape[0]
    dec = np.zeros((n, n), dtype=bool)
    pos = 0
    for i, m in enumerate(member_dec_masks):
        length = int((dec_segments == i).sum())
        if m is None:
            m = np.tril(np.ones((length, length), dtype=bool))
        if m.shape != (length, length):
            raise PackError(f"member {i} decoder mask {m.shape} does not match its {length} tokens")
        dec[pos:pos + length, pos:pos + length] = m
        pos += length
    return enc_gate, dec, cross


def pack(a: PackMember, b: Optional[PackMember] = None, budget: BudgetSet = PAPER_BUDGETS,
         unpacked: bool = False) -> PackedBatch:
    """Pack one or two examples, ``a`` first, padded to the packed budget.

    ``unpacked=True`` pads a single example to the full (unpacked) maxima
    instead; it is used for examples too large for the packed budget.
    """
    members = [a] if b is None else [a, b]
    if unpacked:
        if b is not None:
            raise PackError("unpacked budget only applies to a single example")
        enc_len, dec_len = budget.encoder_max, budget.decoder_max
    else:
        enc_len, dec_len = budget.packed_encoder, budget.packed_decoder
    el = tuple(len(m.enc) for m in members)
    dl = tuple(len(m.dec) for m in members)
    if sum(el) > enc_len or sum(dl) > dec_len:
        raise PackError(f"members need {sum(el)}/{sum(dl)} tokens, budget is {enc_len}/{dec_len}")
    p_enc = packing_matrix(el, enc_len)
    p_dec = packing_matrix(dl, dec_len)
    enc_seg = segment_ids(el, enc_len)
    dec_seg = segment_ids(dl, dec_len)
    enc_mask, dec_mask, cross = build_masks(enc_seg, dec_seg, [m.dec_mask for m in members])
    return PackedBatch(
        member_ids=tuple(m.id for m in members), enc_lengths=el, dec_lengths=dl,
        enc=_apply(p_enc, [m.enc for m in members]), dec=_apply(p_dec, [m.dec for m in members]),
        enc_segments=enc_seg, dec_segments=dec_seg, p_enc=p_enc, p_dec=p_dec,
        enc_mask=enc_mask, dec_mask=dec_mask, cross_mask=cross, unpacked_budget=unpacked,
    )


def unpack(batch: PackedBatch) -> list[tuple[np.ndarray, np.ndarray]]:
    """Recover each member's ``(enc, dec)`` blocks via the transposed packing matrices."""
    enc = batch.p_enc.T @ batch.enc
    dec = batch.p_dec.T @ batch.dec
    e_cuts = np.cumsum(batch.enc_lengths)[:-1]
    d_cuts = np.cumsum(batch.dec_lengths)[:-1]
    return list(zip(np.split(enc, e_cuts), np.split(dec, d_cuts)))


# --------------------------------------------------------------------------
# streaming heuristic


@dataclass(frozen=True)
class Emission:
    members: tuple[ExampleLens, ...]
    oversized: bool = False

    @property
    def is_pair(self) -> bool:
        return len(self.members) == 2

    def slots(self, budget: BudgetSet = PAPER_BUDGETS) -> int:
        return budget.unpacked_slots if self.oversized else budget.packed_slots

    def to_record(self) -> dict:
        return {"members": [m.id for m in self.members], "kind": "pair" if self.is_pair else "solo",
                "oversized": self.oversized}


@dataclass
class PackStats:
    examples: int = 0
    pairs: int = 0
    solos: int = 0
    oversized: int = 0
    real_tokens: int = 0
    slots: int = 0
    baseline_slots: int = 0
    max_pool: int = 0

    def merge(self, other: "PackStats") -> "PackStats":
        return PackStats(
            self.examples + other.examples, self.pairs + other.pairs, self.solos + other.solos,
            self.oversized + other.oversized, self.real_tokens + other.real_tokens, self.slots + other.slots,
            self.baseline_slots + other.baseline_slots, max(self.max_pool, other.max_pool),
        )

    def to_record(self) -> dict:
        return {"stats": {k: getattr(self, k) for k in self.__dataclass_fields__}}


class PackerPool:
    """Single-owner pool for one stream."""

    def __init__(self, budget: BudgetSet = PAPER_BUDGETS, capacity: int = POOL_CAPACITY):
        self.budget = budget
        self.capacity = capacity
        self.held: list[tuple[int, ExampleLens]] = []  # (insertion order, example)
        self.stats = PackStats()
        self._order = 0

    def _record(self, emission: Emission) -> Emission:
        s = self.stats
        if emission.is_pair:
            s.pairs += 1
        else:
            s.solos += 1
            s.oversized += int(emission.oversized)
        s.real_tokens += sum(m.size for m in emission.members)
        s.slots += emission.slots(self.budget)
        return emission

    def _largest(self, entries):
        # Largest total size; ties go to the earliest inserted.
        return max(entries, key=lambda e: (e[1].size, -e[0]))

    def push(self, ex: ExampleLens) -> list[Emission]:
        ex.validate(self.budget)
        self.stats.examples += 1
        self.stats.baseline_slots += self.budget.unpacked_slots
        if not ex.fits_alone(self.budget):
            return [self._record(Emission((ex,), oversized=True))]
        fits = [e for e in self.held if can_pack(e[1], ex, self.budget)]
        if fits:
            best = self._largest(fits)
            self.held.remove(best)
            return [self._record(Emission((best[1], ex)))]
        self.held.append((self._order, ex))
        self._order += 1
        out = []
        if len(self.held) > self.capacity:
            big = self._largest(self.held)
            self.held.remove(big)
            out.append(self._record(Emission((big[1],))))
        self.stats.max_pool = max(self.stats.max_pool, len(self.held))
        assert len(self.held) <= self.capacity
        return out

    def drain(self) -> list[Emission]:
        out = []
        while self.held:
            big = self._largest(self.held)
            self.held.remove(big)
            out.append(self._record(Emission((big[1],))))
        return out


def stream_pack(stream: Iterable[ExampleLens], budget: BudgetSet = PAPER_BUDGETS,
                capacity: int = POOL_CAPACITY, pool: Optional[PackerPool] = None) -> Iterator[Emission]:
    """Yield emissions for ``stream``; the pool's stats are complete once exhausted."""
    pool = PackerPool(budget, capacity) if pool is None else pool
    for ex in stream:
        yield from pool.push(ex)
    yield from pool.drain()


def run_stream(stream: Iterable[ExampleLens], budget: BudgetSet = PAPER_BUDGETS,
               capacity: int = POOL_CAPACITY) -> tuple[list[Emission], PackStats]:
    pool = PackerPool(budget, capacity)
    emissions = list(stream_pack(stream, budget, capacity, pool))
    return emissions, pool.stats


def utilization(stats: PackStats) -> dict[str, float]:
    """Slot utilization, solo rate and density gain over the pad-to-maxima baseline."""
    if stats.pairs + stats.solos == 0:
        raise PackError("no emissions")
    util = stats.real_tokens / stats.slots
    baseline = stats.real_tokens / stats.baseline_slots
    return {"slot_utilization": util, "solo_rate": stats.solos / stats.examples, "density_gain": util / baseline}


# --------------------------------------------------------------------------
# workloads


def short_heavy_workload(n: int = 20000, seed: int = 0, short_fraction: float = 0.8) -> list[ExampleLens]:
    """Synthetic stream where 80% of examples are short (<= 400 enc / 600 dec).

    Long examples stand in for image or audio targets: up to 760 encoder and
    1100 decoder tokens, so two long examples never share a sequence.
    """
    rng = np.random.default_rng(seed)
    short = rng.random(n) < short_fraction
    enc = np.where(short, rng.integers(16, 401, n), rng.integers(401, 761, n))
    dec = np.where(short, rng.integers(8, 601, n), rng.integers(601, 1101, n))
    return [ExampleLens(i, int(e), int(d)) for i, (e, d) in enumerate(zip(enc, dec))]


WORKLOADS = {"short-heavy": short_heavy_workload}


def read_workload(lines: Iterable[str]) -> list[ExampleLens]:
    out = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            out.append(ExampleLens(int(rec["id"]), int(rec["enc_len"]), int(rec["dec_len"])))
        except (ValueError, KeyError, TypeError) as e:
            raise PackError(f"line {n}: {e}") from None
    return out


def format_bench(stats: PackStats) -> str:
    u = utilization(stats)
    rows = [
        ("examples", f"{stats.examples:d}"),
        ("pairs", f"{stats.pairs:d}"),
        ("solos", f"{stats.solos:d}"),
        ("oversized", f"{stats.oversized:d}"),
        ("slot_utilization", f"{u['slot_utilization']:.4f}"),
        ("solo_rate", f"{u['solo_rate']:.4f}"),
        ("density_gain", f"{u['density_gain']:.4f}"),
    ]
    return "\n".join(f"{k:<18}{v:>12}" for k, v in rows) + "\n"


def emissions_jsonl(emissions: Iterable[Emission], stats: PackStats) -> str:
    lines = [canonical_dumps(e.to_record()) for e in emissions]
    lines.append(canonical_dumps(stats.to_record()))
    return "\n".join(lines) + "\n"
