import numpy as np
import pytest
from hypothesis import given, strategies as st

from mmkit.modality import (
    PAPER_BUDGETS,
    PAPER_MODALITIES,
    BudgetError,
    BudgetSet,
    ShapeError,
    audio_segment,
    depth_to_gray,
    gray_to_depth,
    history_budget,
    input_shapes,
    max_encoder_tokens,
    normal_to_rgb,
    rgb_to_normal,
    subsample_count,
    subsample_patches,
    target_tokens,
    token_grid,
    validate_preset,
    vq_target_tokens,
)


def test_token_grids():
    s = token_grid("image_in", (384, 384), 16)
    assert (s.rows, s.cols, s.count) == (24, 24, 576)
    s = token_grid("audio_in", (128, 256), 16)
    assert (s.rows, s.cols, s.count) == (8, 16, 128)
    assert token_grid("image_history", (256, 256), 16).count == 256
    with pytest.raises(ShapeError):
        token_grid("image_in", (380, 384), 16)
    with pytest.raises(ShapeError):
        token_grid("video", (16, 16), 16)


def test_vq_targets():
    assert vq_target_tokens("image", (256, 256), 8) == 1024
    assert vq_target_tokens("audio", (256, 128), 8) == 512
    assert vq_target_tokens("image", (128, 128), 8) == 256
    with pytest.raises(ShapeError):
        vq_target_tokens("image", (100, 128), 8)


def test_audio_segment():
    seg = audio_segment(16000, 256, 256)
    assert seg.samples == 65536 and seg.seconds == 4.096
    assert seg.bounds(0) == (0, 65536)
    assert seg.bounds(2) == (131072, 196608)
    assert audio_segment(16000, 256, 128).seconds == 2.048


def test_segment_zero_pad():
    seg = audio_segment(100, 2, 5)
    x = np.arange(23, dtype=float)
    assert seg.count(23) == 3
    last = seg.extract(x, 2)
    assert last.shape == (10,)
    assert np.array_equal(last[:3], [20, 21, 22]) and not last[3:].any()


def test_history_budget():
    assert [history_budget(f, 32) for f in range(1, 5)] == [32, 64, 96, 128]
    assert [history_budget(f, 16) for f in range(1, 5)] == [16, 32, 48, 64]
    for bad in (0, 5):
        with pytest.raises(BudgetError):
            history_budget(bad, 32)


def test_subsample_examples():
    assert len(subsample_patches(576, 0.5, 0)) == 288
    assert len(subsample_patches(128, 0.5, 0)) == 64
    assert np.array_equal(subsample_patches(576, 1.0, 3), np.arange(576))
    assert subsample_count(7, 0.5) == 4
    assert subsample_count(576, 0.875) == 504
    with pytest.raises(ShapeError):
        subsample_patches(10, 0.0, 0)


@given(st.integers(1, 2000), st.floats(0.01, 1.0), st.integers(0, 2**32 - 1))
def test_subsample_properties(count, keep, seed):
    idx = subsample_patches(count, keep, seed)
    assert np.all(np.diff(idx) > 0)
    assert 0 <= idx[0] and idx[-1] < count
    assert np.array_equal(idx, subsample_patches(count, keep, seed))


def test_dense_label_conversions():
    assert depth_to_gray(0.0, 10.0) == 0.0
    d = np.random.default_rng(0).uniform(0, 10, 50)
    g = depth_to_gray(d, 10.0)
    assert np.array_equal(depth_to_gray(gray_to_depth(g, 10.0), 10.0), g)
    assert np.allclose(normal_to_rgb([0, 0, 1]), [0.5, 0.5, 1.0])
    n = np.random.default_rng(1).standard_normal((20, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    assert np.allclose(rgb_to_normal(normal_to_rgb(n)), n, atol=1e-15)
    with pytest.raises(ValueError):
        normal_to_rgb([0, 0, 2])
    with pytest.raises(ValueError):
        depth_to_gray(11.0, 10.0)


def test_budgets():
    b = PAPER_BUDGETS
    assert (b.encoder_max, b.decoder_max, b.packed_encoder, b.packed_decoder) == (1152, 2048, 864, 1280)
    with pytest.raises(BudgetError):
        BudgetSet(packed_encoder=1200)


def test_preset_shapes():
    shapes = input_shapes()
    assert shapes["image_in"].count == 576 and shapes["audio_in"].count == 128
    assert target_tokens() == {"image": 1024, "audio": 512, "text": 512}


def test_preset_validation():
    # pretrain subsampling: 512 + 288 + 64 + 128 + 64
    assert max_encoder_tokens(PAPER_MODALITIES, "pretrain") == 1056
    validate_preset(PAPER_MODALITIES, PAPER_BUDGETS, "pretrain")
    # instruction-stage keep rate with every modality present does not fit
    assert max_encoder_tokens(PAPER_MODALITIES, "instruct") == 1320
    with pytest.raises(BudgetError):
        validate_preset(PAPER_MODALITIES, PAPER_BUDGETS, "instruct")


def test_pure_functions():
    a = subsample_patches(576, 0.5, 11)
    b = subsample_patches(576, 0.5, 11)
    assert a.tobytes() == b.tobytes()
    assert audio_segment(16000, 256, 256) == audio_segment(16000, 256, 256)
