"""Training and inference pair construction for self-supervised denoising.

Spectral mode pairs channels across a gap: inputs (j-1, j+1) predict
channel j during training, so the target channel is never part of the
input; at inference the gap closes, (j-1, j) predicting the half-step
j-0.5. Temporal mode pairs consecutive frames (j-1 -> j), keeping only
pairs similar enough (SSIM) to rule out large motion.
"""

import dataclasses

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError
from .metrics import ssim


@dataclasses.dataclass
class PairSample:
    inputs: list  # one or two 2D arrays
    target: np.ndarray
    series_index: int
    target_index: float
    input_indices: tuple
    mode: str  # spectral-train | spectral-infer | temporal


@dataclasses.dataclass(frozen=True)
class SplitSpec:
    ratio: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise ConfigurationError(f"split ratio must be in (0, 1), got {self.ratio}")


@dataclasses.dataclass(frozen=True)
class AugmentConfig:
    crop: int | None = None
    flips: bool = False
    quarter_turns: bool = False  # random k*90 deg; k in {0,2} for non-square
    max_shift_px: int = 0
    scale_range: tuple | None = None  # e.g. (0.9, 1.1)
    blur_prob: float = 0.0
    blur_sigma_range: tuple = (0.5, 1.5)

    def __post_init__(self):
        if self.crop is not None and self.crop < 4:
            raise ConfigurationError(f"crop must be >= 4, got {self.crop}")
        if self.max_shift_px < 0:
            raise ConfigurationError(f"max_shift_px must be >= 0, got {self.max_shift_px}")
        if not 0.0 <= self.blur_prob <= 1.0:
            raise ConfigurationError(f"blur_prob must be in [0, 1], got {self.blur_prob}")
        if self.scale_range is not None and not (
            0.0 < self.scale_range[0] <= self.scale_range[1]
        ):
            raise ConfigurationError(f"bad scale_range {self.scale_range}")


def _check_stack(stack, min_channels, what):
    arr = np.asarray(stack)
    if arr.ndim != 4:
        raise ConfigurationError(
            f"{what} expects a (series, channel, u, v) stack, got shape {arr.shape}"
        )
    if arr.shape[1] < min_channels:
        raise ConfigurationError(
            f"{what} needs >= {min_channels} channels, got {arr.shape[1]}"
        )
    return arr


def spectral_train_pairs(stack):
    """One sample per series index i and interior channel j.

    Inputs are channels (j-1, j+1), the target is channel j: the predicted
    channel never enters the input.
    """
    arr = _check_stack(stack, 3, "spectral_train_pairs")
    for i in range(arr.shape[0]):
        for j in range(1, arr.shape[1] - 1):
            yield PairSample(
                inputs=[arr[i, j - 1], arr[i, j + 1]],
                target=arr[i, j],
                series_index=i,
                target_index=float(j),
                input_indices=(j - 1, j + 1),
                mode="spectral-train",
            )


def spectral_infer_pairs(stack):
    """Gapless input pairs (j-1, j); the output sits at half index j-0.5."""
    arr = _check_stack(stack, 2, "spectral_infer_pairs")
    for i in range(arr.shape[0]):
        for j in range(1, arr.shape[1]):
            yield PairSample(
                inputs=[arr[i, j - 1], arr[i, j]],
                target=arr[i, j],
                series_index=i,
                target_index=j - 0.5,
                input_indices=(j - 1, j),
                mode="spectral-infer",
            )


def temporal_pairs(series, ssim_threshold):
    """Consecutive-frame pairs (j-1 -> j) whose SSIM clears the threshold."""
    arr = np.asarray(series)
    if arr.ndim != 3 or arr.shape[0] < 2:
        raise ConfigurationError(f"need a (t >= 2, y, x) series, got shape {arr.shape}")
    if not 0.0 <= ssim_threshold <= 1.0:
        raise ConfigurationError(f"ssim_threshold must be in [0, 1], got {ssim_threshold}")
    for j in range(1, arr.shape[0]):
        a, b = arr[j - 1], arr[j]
        if ssim(a, b) >= ssim_threshold:
            yield PairSample(
                inputs=[a],
                target=b,
                series_index=0,
                target_index=float(j),
                input_indices=(j - 1,),
                mode="temporal",
            )


def pair_ssim_sequence(series) -> np.ndarray:
    """SSIM of each consecutive frame pair, for threshold tuning."""
    arr = np.asarray(series)
    if arr.ndim != 3 or arr.shape[0] < 2:
        raise ConfigurationError(f"need a (t >= 2, y, x) series, got shape {arr.shape}")
    return np.array([ssim(arr[j - 1], arr[j]) for j in range(1, arr.shape[0])])


def split(indices, spec: SplitSpec):
    """Deterministic shuffle split into (train, val) index lists.

    Train size is round(ratio*n), clamped so both sides stay non-empty.
    """
    idx = list(indices)
    if len(idx) < 2:
        raise ConfigurationError(f"need >= 2 indices to split, got {len(idx)}")
    order = np.random.default_rng(spec.seed).permutation(len(idx))
    n_train = int(round(spec.ratio * len(idx)))
    n_train = min(max(n_train, 1), len(idx) - 1)
    train = sorted(idx[k] for k in order[:n_train])
    val = sorted(idx[k] for k in order[n_train:])
    return train, val


def _reflect_shift(img, dy, dx):
    pad = ((abs(dy), abs(dy)), (abs(dx), abs(dx)))
    padded = np.pad(img, pad, mode="reflect") if (dy or dx) else img
    y0 = abs(dy) - dy
    x0 = abs(dx) - dx
    return padded[y0 : y0 + img.shape[0], x0 : x0 + img.shape[1]]


def _rescale(img, factor):
    zoomed = ndimage.zoom(img, factor, order=1, mode="reflect", grid_mode=True)
    out = img.shape
    if zoomed.shape[0] >= out[0] and zoomed.shape[1] >= out[1]:
        y0 = (zoomed.shape[0] - out[0]) // 2
        x0 = (zoomed.shape[1] - out[1]) // 2
        return zoomed[y0 : y0 + out[0], x0 : x0 + out[1]]
    py = max(out[0] - zoomed.shape[0], 0)
    px = max(out[1] - zoomed.shape[1], 0)
    padded = np.pad(
        zoomed, ((py // 2, py - py // 2), (px // 2, px - px // 2)), mode="reflect"
    )
    return padded[: out[0], : out[1]]


def augment(sample: PairSample, config: AugmentConfig, seed: int) -> PairSample:
    """Apply one random transform draw to all images of the sample.

    Geometry (shift, scale, crop, flips, quarter turns) is shared by inputs
    and target; blur corrupts the inputs only.
    """
    rng = np.random.default_rng(seed)
    images = [np.asarray(x, dtype=np.float64) for x in sample.inputs] + [
        np.asarray(sample.target, dtype=np.float64)
    ]
    shape = images[0].shape

    if config.max_shift_px:
        dy = int(rng.integers(-config.max_shift_px, config.max_shift_px + 1))
        dx = int(rng.integers(-config.max_shift_px, config.max_shift_px + 1))
        images = [_reflect_shift(x, dy, dx) for x in images]
    if config.scale_range is not None:
        factor = float(rng.uniform(*config.scale_range))
        images = [_rescale(x, factor) for x in images]
    if config.crop is not None:
        c = config.crop
        if c > min(shape):
            raise ConfigurationError(f"crop {c} larger than image {shape}")
        y0 = int(rng.integers(0, shape[0] - c + 1))
        x0 = int(rng.integers(0, shape[1] - c + 1))
        images = [x[y0 : y0 + c, x0 : x0 + c] for x in images]
    if config.flips:
        if rng.random() < 0.5:
            images = [x[::-1, :] for x in images]
        if rng.random() < 0.5:
            images = [x[:, ::-1] for x in images]
    if config.quarter_turns:
        cur = images[0].shape
        k = int(rng.integers(0, 4))
        if cur[0] != cur[1]:
            k = 2 * (k % 2)
        images = [np.rot90(x, k) for x in images]
    if config.blur_prob and rng.random() < config.blur_prob:
        sigma = float(rng.uniform(*config.blur_sigma_range))
        images = [ndimage.gaussian_filter(x, sigma) for x in images[:-1]] + images[-1:]

    return PairSample(
        inputs=[np.ascontiguousarray(x) for x in images[:-1]],
        target=np.ascontiguousarray(images[-1]),
        series_index=sample.series_index,
        target_index=sample.target_index,
        input_indices=sample.input_indices,
        mode=sample.mode,
    )
