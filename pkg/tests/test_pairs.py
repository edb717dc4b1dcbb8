"""Pair construction, split determinism, and augmentation behavior."""

import numpy as np
import pytest

from mcdenoise import pairs
from mcdenoise.errors import ConfigurationError


def _stack(n_series=3, n_channels=5, size=8, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((n_series, n_channels, size, size)).astype(np.float32)


def _structured(seed=0, size=24):
    # smooth, high-contrast frame so consecutive-noise SSIM stays high
    y, x = np.mgrid[0:size, 0:size] / size
    base = 0.5 + 0.4 * np.sin(4 * x) * np.cos(3 * y)
    return base + np.random.default_rng(seed).normal(0, 0.01, base.shape)


# -- spectral pairs ---------------------------------------------------------------


def test_spectral_train_pair_layout():
    stack = _stack()
    samples = list(pairs.spectral_train_pairs(stack))
    assert len(samples) == 3 * (5 - 2)
    for s in samples:
        j = int(s.target_index)
        assert s.mode == "spectral-train"
        assert s.input_indices == (j - 1, j + 1)
        np.testing.assert_array_equal(s.inputs[0], stack[s.series_index, j - 1])
        np.testing.assert_array_equal(s.inputs[1], stack[s.series_index, j + 1])
        np.testing.assert_array_equal(s.target, stack[s.series_index, j])


def test_spectral_train_pairs_never_leak_target():
    # full scan: the predicted channel must not appear among the inputs,
    # neither by index nor by storage
    stack = _stack(n_series=2, n_channels=7)
    count = 0
    for s in pairs.spectral_train_pairs(stack):
        count += 1
        assert s.target_index not in s.input_indices
        for inp in s.inputs:
            assert not np.shares_memory(inp, s.target)
            assert not np.array_equal(inp, s.target)
    assert count == 2 * 5


def test_spectral_infer_pairs_half_grid():
    stack = _stack(n_series=2, n_channels=4)
    samples = list(pairs.spectral_infer_pairs(stack))
    assert len(samples) == 2 * 3
    assert [s.target_index for s in samples if s.series_index == 0] == [0.5, 1.5, 2.5]
    for s in samples:
        assert s.mode == "spectral-infer"
        lo, hi = s.input_indices
        assert hi - lo == 1
        np.testing.assert_array_equal(s.inputs[0], stack[s.series_index, lo])
        np.testing.assert_array_equal(s.inputs[1], stack[s.series_index, hi])


@pytest.mark.parametrize(
    "fn,min_ch",
    [(pairs.spectral_train_pairs, 3), (pairs.spectral_infer_pairs, 2)],
)
def test_spectral_pairs_validation(fn, min_ch):
    with pytest.raises(ConfigurationError, match="stack"):
        list(fn(np.zeros((4, 8, 8))))
    with pytest.raises(ConfigurationError, match=f">= {min_ch} channels"):
        list(fn(np.zeros((1, min_ch - 1, 8, 8))))


# -- temporal pairs ---------------------------------------------------------------


def test_temporal_pairs_filter_dissimilar_frames():
    base = _structured()
    rng = np.random.default_rng(1)
    frames = [base + rng.normal(0, 0.01, base.shape) for _ in range(6)]
    frames[3] = 1.0 - base  # inverted outlier: both adjacent pairs collapse
    series = np.stack(frames)

    kept = list(pairs.temporal_pairs(series, ssim_threshold=0.5))
    assert [s.target_index for s in kept] == [1.0, 2.0, 5.0]
    for s in kept:
        assert s.mode == "temporal"
        assert len(s.inputs) == 1
        assert s.input_indices == (int(s.target_index) - 1,)
        np.testing.assert_array_equal(s.inputs[0], series[s.input_indices[0]])
        np.testing.assert_array_equal(s.target, series[int(s.target_index)])


def test_temporal_pairs_zero_threshold_keeps_similar_frames():
    series = np.stack([_structured(seed=k) for k in range(4)])
    kept = list(pairs.temporal_pairs(series, ssim_threshold=0.0))
    assert len(kept) == 3


def test_temporal_pairs_validation():
    with pytest.raises(ConfigurationError, match="t >= 2"):
        list(pairs.temporal_pairs(np.zeros((1, 8, 8)), 0.5))
    with pytest.raises(ConfigurationError, match="series"):
        list(pairs.temporal_pairs(np.zeros((8, 8)), 0.5))
    with pytest.raises(ConfigurationError, match="ssim_threshold"):
        list(pairs.temporal_pairs(np.zeros((3, 8, 8)), 1.5))


def test_pair_ssim_sequence_matches_metric():
    from mcdenoise.metrics import ssim

    series = np.stack([_structured(seed=k) for k in range(4)])
    seq = pairs.pair_ssim_sequence(series)
    assert seq.shape == (3,)
    for j in range(1, 4):
        assert seq[j - 1] == pytest.approx(ssim(series[j - 1], series[j]))


# -- split ------------------------------------------------------------------------


def test_split_partitions_and_rounds():
    train, val = pairs.split(range(10), pairs.SplitSpec(ratio=0.8, seed=3))
    assert len(train) == 8 and len(val) == 2
    assert sorted(train + val) == list(range(10))
    assert train == sorted(train) and val == sorted(val)


def test_split_deterministic_and_seed_sensitive():
    idx = [3, 7, 11, 20, 21, 30]
    a = pairs.split(idx, pairs.SplitSpec(ratio=0.5, seed=9))
    b = pairs.split(idx, pairs.SplitSpec(ratio=0.5, seed=9))
    assert a == b
    seen = {tuple(pairs.split(idx, pairs.SplitSpec(ratio=0.5, seed=s))[0]) for s in range(20)}
    assert len(seen) > 1


def test_split_clamps_to_keep_both_sides():
    train, val = pairs.split([0, 1], pairs.SplitSpec(ratio=0.99, seed=0))
    assert len(train) == 1 and len(val) == 1
    train, val = pairs.split([0, 1], pairs.SplitSpec(ratio=0.01, seed=0))
    assert len(train) == 1 and len(val) == 1


def test_split_validation():
    with pytest.raises(ConfigurationError, match=">= 2 indices"):
        pairs.split([0], pairs.SplitSpec(ratio=0.5))
    with pytest.raises(ConfigurationError, match="ratio"):
        pairs.SplitSpec(ratio=1.0)
    with pytest.raises(ConfigurationError, match="ratio"):
        pairs.SplitSpec(ratio=0.0)


# -- augment ----------------------------------------------------------------------


def _sample(img=None, size=16, seed=5):
    if img is None:
        img = np.random.default_rng(seed).random((size, size))
    return pairs.PairSample(
        inputs=[img.copy(), img.copy()],
        target=img.copy(),
        series_index=0,
        target_index=2.0,
        input_indices=(1, 3),
        mode="spectral-train",
    )


def test_augment_geometry_is_shared():
    cfg = pairs.AugmentConfig(
        crop=8, flips=True, quarter_turns=True, max_shift_px=2, scale_range=(0.9, 1.1)
    )
    for seed in range(6):
        out = pairs.augment(_sample(), cfg, seed=seed)
        assert out.target.shape == (8, 8)
        # identical source images stay identical under shared geometry
        np.testing.assert_array_equal(out.inputs[0], out.inputs[1])
        np.testing.assert_array_equal(out.inputs[0], out.target)
        assert out.input_indices == (1, 3) and out.target_index == 2.0


def test_augment_blur_corrupts_inputs_only():
    cfg = pairs.AugmentConfig(blur_prob=1.0, blur_sigma_range=(1.0, 1.0))
    src = _sample()
    out = pairs.augment(src, cfg, seed=0)
    np.testing.assert_array_equal(out.target, src.target)
    for inp in out.inputs:
        assert not np.array_equal(inp, src.inputs[0])
        assert np.std(inp) < np.std(src.inputs[0])  # blur only smooths


def test_augment_identity_when_disabled():
    out = pairs.augment(_sample(), pairs.AugmentConfig(), seed=0)
    np.testing.assert_array_equal(out.target, _sample().target)
    np.testing.assert_array_equal(out.inputs[0], _sample().inputs[0])


def test_augment_deterministic_per_seed():
    cfg = pairs.AugmentConfig(crop=8, flips=True, max_shift_px=3, blur_prob=0.5)
    a = pairs.augment(_sample(), cfg, seed=11)
    b = pairs.augment(_sample(), cfg, seed=11)
    np.testing.assert_array_equal(a.target, b.target)
    np.testing.assert_array_equal(a.inputs[0], b.inputs[0])
    outputs = {pairs.augment(_sample(), cfg, seed=s).target.tobytes() for s in range(8)}
    assert len(outputs) > 1


def test_augment_shift_uses_reflected_content():
    img = np.arange(100, dtype=float).reshape(10, 10)
    cfg = pairs.AugmentConfig(max_shift_px=2)
    for seed in range(10):
        out = pairs.augment(_sample(img=img), cfg, seed=seed)
        assert out.target.shape == img.shape
        assert set(np.unique(out.target)) <= set(np.unique(img))  # reflect adds no values


def test_augment_quarter_turns_keep_rectangles():
    img = np.random.default_rng(0).random((8, 12))
    cfg = pairs.AugmentConfig(quarter_turns=True)
    seen_rotated = False
    for seed in range(12):
        out = pairs.augment(_sample(img=img), cfg, seed=seed)
        assert out.target.shape == (8, 12)
        if not np.array_equal(out.target, img):
            np.testing.assert_array_equal(out.target, np.rot90(img, 2))
            seen_rotated = True
    assert seen_rotated


def test_augment_crop_too_large():
    with pytest.raises(ConfigurationError, match="crop 32 larger"):
        pairs.augment(_sample(size=16), pairs.AugmentConfig(crop=32), seed=0)


def test_augment_config_validation():
    with pytest.raises(ConfigurationError, match="crop"):
        pairs.AugmentConfig(crop=2)
    with pytest.raises(ConfigurationError, match="max_shift_px"):
        pairs.AugmentConfig(max_shift_px=-1)
    with pytest.raises(ConfigurationError, match="blur_prob"):
        pairs.AugmentConfig(blur_prob=1.5)
    with pytest.raises(ConfigurationError, match="scale_range"):
        pairs.AugmentConfig(scale_range=(1.1, 0.9))
