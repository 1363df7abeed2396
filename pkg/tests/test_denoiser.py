import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmkit.denoiser import (
    VALID_PARADIGMS,
    ConfigError,
    ContractError,
    DenoiserConfig,
    Paradigm,
    apply_spans,
    build_corruption_plan,
    causal_mask,
    choose_paradigm,
    dynamic_decoder_mask,
    layer_sparse_schedule,
    map_grid_mask,
    patch_mask,
    reconstruct,
    sparse_pattern,
    span_corrupt_text,
)
from mmkit.kernels import AttentionCase, cosine_attention, qk_norm_attention, softmax_attention
from mmkit.token_space import PAPER_SPACE as S


def test_paradigm_validity():
    assert len(VALID_PARADIGMS) == 7
    with pytest.raises(ConfigError):
        Paradigm("Image", "X")


def test_choose_paradigm_degenerate():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p, pre = choose_paradigm(rng, {"Text-R": 1.0})
        assert p == Paradigm("Text", "R") and pre == S.prefix_tokens("Text", "R")
    assert Paradigm("Image", "S").prefix() == S.prefix_tokens("Image", "S")
    with pytest.raises(ConfigError):
        choose_paradigm(rng, {"Text-R": 0.0})
    with pytest.raises(ConfigError):
        choose_paradigm(rng, {"Video-R": 1.0})


def test_choose_paradigm_frequencies():
    weights = {"Text-R": 2.0, "Text-S": 1.0, "Text-X": 1.0, "Image-R": 3.0, "Audio-S": 3.0}
    rng = np.random.default_rng(42)
    n = 100_000
    counts = {}
    for _ in range(n):
        p, _ = choose_paradigm(rng, weights)
        counts[p.name] = counts.get(p.name, 0) + 1
    total = sum(weights.values())
    for name, w in weights.items():
        assert abs(counts[name] / n - w / total) <= 0.01


def test_choose_paradigm_seeded():
    a = [choose_paradigm(np.random.default_rng(7), {"Text-R": 1, "Image-S": 1})[0] for _ in range(5)]
    assert len(set(a)) == 1


# spans


def test_hand_built_span():
    tokens = list(range(100, 110))
    inputs, targets = apply_spans(tokens, [(3, 5)])
    s0 = S.sentinel(0)
    assert inputs == [100, 101, 102, s0, 105, 106, 107, 108, 109]
    assert targets == [s0, 103, 104]
    assert reconstruct(inputs, targets) == tokens


def test_low_rate_passthrough():
    rng = np.random.default_rng(0)
    inputs, targets = span_corrupt_text([5, 6, 7], 0.01, 3.0, rng)
    assert inputs == [5, 6, 7] and targets == []
    inputs, targets = span_corrupt_text([5], 0.5, 3.0, rng)
    assert inputs == [5] and targets == []


def test_span_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        span_corrupt_text([1, 2, 3], 0.0, 3.0, rng)
    with pytest.raises(ConfigError):
        span_corrupt_text([1, 2, 3], 0.5, 0.5, rng)
    with pytest.raises(ValueError):
        apply_spans([1, 2, 3, 4], [(0, 2), (1, 3)])


def test_reconstruction_fuzz():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n = int(rng.integers(0, 300))
        tokens = rng.integers(3, 32000, n).tolist()
        rate = float(rng.uniform(0.01, 0.95))
        span = float(rng.uniform(1, 40))
        inputs, targets = span_corrupt_text(tokens, rate, span, rng)
        assert reconstruct(inputs, targets) == tokens
        sentinels = [t for t in targets if S.is_sentinel(t)]
        assert sentinels == [t for t in inputs if S.is_sentinel(t)]
        assert sentinels == [S.sentinel(i) for i in range(len(sentinels))]


def test_text_r_coverage():
    rng = np.random.default_rng(3)
    plan = build_corruption_plan({"text": list(range(200, 300))}, Paradigm("Text", "R"), rng)
    covered = sum(1 for t in plan.target_tokens if not S.is_sentinel(t))
    assert covered == 15
    assert int(plan.input_mask.sum()) == 15


# patch masks


def test_patch_mask_counts():
    rng = np.random.default_rng(0)
    assert not patch_mask((24, 24), 0.0, rng).any()
    assert patch_mask((24, 24), 1.0, rng).all()
    assert patch_mask((24, 24), 0.5, rng).sum() == 288
    a = patch_mask((8, 16), 0.3, np.random.default_rng(5))
    b = patch_mask((8, 16), 0.3, np.random.default_rng(5))
    assert np.array_equal(a, b)
    with pytest.raises(ConfigError):
        patch_mask((2, 2), 1.5, rng)


# dynamic decoder mask


def test_dynamic_mask_examples():
    assert np.array_equal(dynamic_decoder_mask(3, []).allowed, causal_mask(3))
    a = dynamic_decoder_mask(4, [1]).allowed
    assert a[1, 1] and not a[2, 1] and not a[3, 1]
    assert a[3, 0] and a[3, 2] and a[3, 3]
    with pytest.raises(ValueError):
        dynamic_decoder_mask(4, [4])


@settings(max_examples=200)
@given(st.integers(1, 40), st.data())
def test_dynamic_mask_formula(n, data):
    masked = data.draw(st.sets(st.integers(0, n - 1)))
    a = dynamic_decoder_mask(n, masked).allowed
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    inm = np.isin(j, list(masked))
    assert np.array_equal(a, (j <= i) & (~inm | (j == i)))
    assert not np.any(a & ~causal_mask(n))
    assert np.all(np.diag(a))


def _one_layer(x, mask, w, kind):
    q, k, v = (np.einsum("nd,hde->hne", x, wi) for wi in w)
    case = AttentionCase(q, k, v, mask)
    if kind == "qk_norm":
        return qk_norm_attention(case)[0]
    if kind == "cosine":
        return cosine_attention(case, 10.0)[0]
    return softmax_attention(case)[0]


def leak_trial(rng, kind):
    n = int(rng.integers(2, 33))
    masked = np.flatnonzero(rng.random(n) < 0.4)
    if masked.size == 0:
        masked = np.array([int(rng.integers(n))])
    mask = dynamic_decoder_mask(n, masked).allowed
    d, heads, hd = 12, 2, 8
    w = rng.standard_normal((3, heads, d, hd))
    x = rng.standard_normal((n, d))
    base = _one_layer(x, mask, w, kind)
    for j in masked:
        x2 = x.copy()
        x2[j] += rng.standard_normal(d) * 5.0
        out = _one_layer(x2, mask, w, kind)
        others = np.arange(n) != j
        if not np.array_equal(out[:, others], base[:, others]):
            return False
        if np.array_equal(out[:, j], base[:, j]):
            return False
    return True


@pytest.mark.parametrize("kind", ["plain", "qk_norm", "cosine"])
def test_leak_perturbation(kind):
    rng = np.random.default_rng(11)
    assert all(leak_trial(rng, kind) for _ in range(50))


def test_leak_without_dynamic_mask_is_visible():
    # control: under the plain causal mask a perturbation reaches later rows
    rng = np.random.default_rng(0)
    n, d = 6, 12
    w = rng.standard_normal((3, 2, d, 8))
    x = rng.standard_normal((n, d))
    base = _one_layer(x, causal_mask(n), w, "plain")
    x[2] += 1.0
    out = _one_layer(x, causal_mask(n), w, "plain")
    assert not np.array_equal(out[:, 3:], base[:, 3:])


# sparse patterns


def test_sparse_examples():
    assert np.array_equal(sparse_pattern((1, 5), "row"), causal_mask(5))
    col = sparse_pattern((2, 2), "column")
    assert np.flatnonzero(col[3]).tolist() == [1, 3]
    assert np.array_equal(sparse_pattern((3, 3), "conv", 3), causal_mask(9))
    with pytest.raises(ConfigError):
        sparse_pattern((3, 4), "conv", 4)
    with pytest.raises(ConfigError):
        sparse_pattern((3, 4), "diagonal")


@given(st.integers(1, 8), st.integers(1, 8), st.sampled_from(["row", "column", "conv"]), st.integers(1, 8))
def test_sparse_subset_of_causal(rows, cols, kind, window):
    window = min(window, rows, cols)
    a = sparse_pattern((rows, cols), kind, window)
    n = rows * cols
    assert not np.any(a & ~causal_mask(n))
    assert np.all(np.diag(a))


def test_layer_schedule():
    assert layer_sparse_schedule(4) == ["row", "column", "row", "conv"]
    assert layer_sparse_schedule(6)[-1] == "conv"


# plans


def test_plan_image_s():
    plan = build_corruption_plan({"image": True}, Paradigm("Image", "S"), np.random.default_rng(0))
    assert not plan.input_present and plan.input_mask is None
    assert plan.masked_targets == () and plan.target_length == 1024


def test_plan_image_r_masks_agree():
    cfg = DenoiserConfig()
    plan = build_corruption_plan({"image": True}, Paradigm("Image", "R"), np.random.default_rng(4), cfg)
    assert plan.input_mask.sum() == 288
    mapped = map_grid_mask(plan.input_mask, cfg.image_target_grid)
    assert np.flatnonzero(mapped.ravel()).tolist() == list(plan.masked_targets)
    # every masked target cell lies over a masked input patch
    r, c = np.divmod(np.array(plan.masked_targets), 32)
    assert plan.input_mask[(r * 24) // 32, (c * 24) // 32].all()
    assert abs(len(plan.masked_targets) / 1024 - 0.5) < 0.05


def test_plan_absent_target():
    with pytest.raises(ContractError):
        build_corruption_plan({"text": [1, 2]}, Paradigm("Audio", "R"), np.random.default_rng(0))


def test_plan_determinism():
    rec = {"text": list(range(50, 150)), "audio": True}
    for p in (Paradigm("Text", "X"), Paradigm("Audio", "R")):
        a = build_corruption_plan(rec, p, np.random.default_rng(9)).to_jsonl()
        b = build_corruption_plan(rec, p, np.random.default_rng(9)).to_jsonl()
        assert a == b


def test_plan_text_x_extreme():
    plan = build_corruption_plan({"text": list(range(64))}, Paradigm("Text", "X"), np.random.default_rng(0))
    assert plan.input_mask.sum() == 32
    assert reconstruct(plan.input_tokens, plan.target_tokens) == list(range(64))
