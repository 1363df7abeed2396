import json
from collections import Counter

import numpy as np
import pytest

from mmkit.kernels import AttentionCase, softmax_attention
from mmkit.packer import (
    PAD_SEGMENT,
    ExampleLens,
    PackError,
    PackerPool,
    PackMember,
    PackStats,
    can_pack,
    emissions_jsonl,
    format_bench,
    pack,
    read_workload,
    run_stream,
    short_heavy_workload,
    stream_pack,
    unpack,
    utilization,
)
from mmkit.denoiser import dynamic_decoder_mask
from reference_packer import reference_trace


def lens(*pairs):
    return [ExampleLens(i, e, d) for i, (e, d) in enumerate(pairs)]


def ids(emissions):
    return [tuple(m.id for m in e.members) for e in emissions]


def test_can_pack_examples():
    a, b = ExampleLens(0, 500, 600), ExampleLens(1, 300, 600)
    assert can_pack(a, b)
    assert not can_pack(ExampleLens(0, 600, 10), ExampleLens(1, 300, 10))
    assert not can_pack(ExampleLens(0, 10, 700), ExampleLens(1, 10, 600))
    assert can_pack(ExampleLens(0, 432, 640), ExampleLens(1, 432, 640))


def test_lens_validation():
    with pytest.raises(PackError):
        ExampleLens(0, 0, 5).validate()
    with pytest.raises(PackError):
        ExampleLens(0, 5, 2049).validate()


def _random_member(rng, i, max_enc, max_dec, dim=None):
    e, d = int(rng.integers(1, max_enc + 1)), int(rng.integers(1, max_dec + 1))
    shape_e = (e,) if dim is None else (e, dim)
    shape_d = (d,) if dim is None else (d, dim)
    return PackMember(i, rng.standard_normal(shape_e), rng.standard_normal(shape_d))


def test_pack_solo_segments():
    m = PackMember(0, np.arange(5.0), np.arange(3.0))
    b = pack(m)
    assert b.enc_segments[:5].tolist() == [0] * 5 and np.all(b.enc_segments[5:] == PAD_SEGMENT)
    assert b.enc.shape == (864,) and b.dec.shape == (1280,)
    assert b.enc_mask[:5, :5].all() and not b.enc_mask[5:].any() and not b.enc_mask[:, 5:].any()


def test_pack_budget_error():
    big = PackMember(0, np.zeros(500), np.zeros(10))
    with pytest.raises(PackError):
        pack(big, PackMember(1, np.zeros(400), np.zeros(10)))
    b = pack(PackMember(0, np.zeros(1000), np.zeros(10)), unpacked=True)
    assert b.enc.shape == (1152,) and b.unpacked_budget


def test_pack_fuzz_round_trip_and_matrix_product():
    rng = np.random.default_rng(0)
    for t in range(200):
        dim = None if t % 2 else 3
        a = _random_member(rng, 0, 432, 640, dim)
        b = _random_member(rng, 1, 432, 640, dim)
        batch = pack(a, b)
        (ea, da), (eb, db) = unpack(batch)
        assert np.array_equal(ea, a.enc) and np.array_equal(da, a.dec)
        assert np.array_equal(eb, b.enc) and np.array_equal(db, b.dec)
        # elementwise: slot s holds token s of the concatenation, pads are zero
        cat = np.concatenate([a.enc, b.enc])
        assert np.array_equal(batch.p_enc @ cat, batch.enc)
        assert np.array_equal(batch.enc[:len(cat)], cat) and not batch.enc[len(cat):].any()
        assert np.all(batch.p_enc.sum(axis=1) <= 1) and np.all(batch.p_enc.sum(axis=0) == 1)
        assert np.all(batch.p_dec.sum(axis=1) <= 1) and np.all(batch.p_dec.sum(axis=0) == 1)


def test_masks_respect_segments():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a, b = _random_member(rng, 0, 50, 60), _random_member(rng, 1, 50, 60)
        batch = pack(a, b)
        es, ds = batch.enc_segments, batch.dec_segments
        for m, rows, cols in ((batch.enc_mask, es, es), (batch.dec_mask, ds, ds), (batch.cross_mask, ds, es)):
            r, c = np.nonzero(m)
            assert np.all(rows[r] == cols[c]) and np.all(rows[r] != PAD_SEGMENT)
        n = len(ds)
        assert not np.any(batch.dec_mask & ~np.tril(np.ones((n, n), dtype=bool)))


def test_decoder_mask_composes_member_masks():
    dm = dynamic_decoder_mask(4, [1]).allowed
    a = PackMember(0, np.zeros(3), np.zeros(4), dm)
    b = PackMember(1, np.zeros(2), np.zeros(3))
    batch = pack(a, b)
    assert np.array_equal(batch.dec_mask[:4, :4], dm)
    assert np.array_equal(batch.dec_mask[4:7, 4:7], np.tril(np.ones((3, 3), dtype=bool)))
    with pytest.raises(PackError):
        pack(PackMember(0, np.zeros(3), np.zeros(5), dm))


def test_zero_cross_segment_attention_mass():
    rng = np.random.default_rng(2)
    for _ in range(100):
        a, b = _random_member(rng, 0, 40, 40, 8), _random_member(rng, 1, 40, 40, 8)
        batch = pack(a, b)
        ne, nd = sum(batch.enc_lengths), sum(batch.dec_lengths)
        enc = batch.enc[:ne][None]
        dec = batch.dec[:nd][None]
        es, ds = batch.enc_segments[:ne], batch.dec_segments[:nd]
        checks = [
            (enc, enc, batch.enc_mask[:ne, :ne], es, es),
            (dec, dec, batch.dec_mask[:nd, :nd], ds, ds),
            (dec, enc, batch.cross_mask[:nd, :ne], ds, es),
        ]
        for q, kv, mask, rs, cs in checks:
            _, w = softmax_attention(AttentionCase(q, kv, kv, mask))
            cross = rs[:, None] != cs[None, :]
            assert w[0][cross].sum() == 0.0


# streaming


def test_trace_pair_on_second_arrival():
    em, stats = run_stream(lens((400, 10), (400, 10)))
    assert ids(em) == [(0, 1)] and stats.pairs == 1 and stats.solos == 0


def test_trace_no_pairs_fit():
    stream = lens(*[(800, 10)] * 15)
    pool = PackerPool()
    emitted_at = []
    for ex in stream:
        out = pool.push(ex)
        emitted_at.append(len(out))
        assert len(pool.held) <= 10
    assert emitted_at == [0] * 10 + [1] * 5
    assert len(pool.drain()) == 10
    assert pool.stats.solos == 15 and pool.stats.pairs == 0


def test_trace_alternating():
    stream = lens(*[(700, 10), (100, 10)] * 20)
    em, stats = run_stream(stream)
    assert ids(em) == [(2 * i, 2 * i + 1) for i in range(20)]
    assert utilization(stats)["solo_rate"] == 0.0


def test_oversized_goes_solo_unpacked():
    em, stats = run_stream(lens((1000, 10), (10, 10)))
    assert em[0].oversized and ids(em)[0] == (0,)
    assert stats.oversized == 1 and stats.slots == (1152 + 2048) + (864 + 1280)


def test_larger_partner_preferred_and_ties_by_insertion():
    stream = lens((300, 100), (800, 100), (500, 100), (500, 100), (60, 100))
    em, _ = run_stream(stream)
    # 300 pairs with 500 (id 2); 800 and the second 500 wait; 60 joins 800
    assert ids(em)[0] == (0, 2)
    assert ids(em)[1] == (1, 4)
    # equal-sized candidates: the earlier arrival wins
    em, _ = run_stream([ExampleLens(0, 600, 10), ExampleLens(1, 600, 10), ExampleLens(2, 200, 10)])
    assert ids(em)[0] == (0, 2)


def _random_stream(rng, n):
    out = []
    for i in range(n):
        if rng.random() < 0.05:
            out.append(ExampleLens(i, int(rng.integers(865, 1153)), int(rng.integers(1, 2049))))
        else:
            out.append(ExampleLens(i, int(rng.integers(1, 865)), int(rng.integers(1, 1281))))
    return out


def test_matches_reference_trace():
    rng = np.random.default_rng(3)
    for _ in range(100):
        stream = _random_stream(rng, int(rng.integers(0, 51)))
        em, _ = run_stream(stream)
        assert ids(em) == reference_trace([(e.id, e.enc_len, e.dec_len) for e in stream])


def test_stream_invariants():
    rng = np.random.default_rng(4)
    for _ in range(50):
        stream = _random_stream(rng, 200)
        pool = PackerPool()
        seen = Counter()
        for ex in stream:
            for e in pool.push(ex):
                seen.update(m.id for m in e.members)
                if e.is_pair:
                    assert can_pack(*e.members)
                elif not e.oversized:
                    assert not any(can_pack(e.members[0], h) for _, h in pool.held)
            assert len(pool.held) <= 10
        for e in pool.drain():
            seen.update(m.id for m in e.members)
        assert seen == Counter(ex.id for ex in stream)


def test_deterministic():
    stream = short_heavy_workload(500, seed=7)
    assert ids(run_stream(stream)[0]) == ids(run_stream(list(stream))[0])
    assert short_heavy_workload(50, 1) == short_heavy_workload(50, 1)


def test_utilization_examples():
    em, stats = run_stream(lens(*[(432, 640)] * 10))
    u = utilization(stats)
    assert u["slot_utilization"] == 1.0 and u["solo_rate"] == 0.0
    _, stats = run_stream(lens((10, 10)))
    assert utilization(stats)["solo_rate"] == 1.0
    with pytest.raises(PackError):
        utilization(PackStats())


def test_short_heavy_meets_targets():
    _, stats = run_stream(short_heavy_workload())
    u = utilization(stats)
    assert u["density_gain"] >= 1.9 and u["solo_rate"] <= 0.005


def test_stats_merge_is_sum():
    a = run_stream(short_heavy_workload(300, 0))[1]
    b = run_stream(short_heavy_workload(300, 1))[1]
    m = a.merge(b)
    assert m.examples == 600 and m.real_tokens == a.real_tokens + b.real_tokens
    assert m.to_record() == b.merge(a).to_record()


def test_workload_io():
    lines = [json.dumps({"id": i, "enc_len": 10 + i, "dec_len": 20}) for i in range(3)]
    assert read_workload(lines)[2] == ExampleLens(2, 12, 20)
    with pytest.raises(PackError, match="line 2"):
        read_workload([lines[0], "{not json"])
    em, stats = run_stream(read_workload(lines))
    text = emissions_jsonl(em, stats)
    assert json.loads(text.splitlines()[-1])["stats"]["examples"] == 3
    assert format_bench(stats) == format_bench(stats)
    assert "density_gain" in format_bench(stats)


def test_stream_pack_is_lazy():
    gen = stream_pack(iter(lens((400, 10), (400, 10), (900, 10))))
    assert ids([next(gen)]) == [(0, 1)]
