"""Single-parameter low-pass phase retrieval and a temporal flicker score.

The retrieval multiplies the intensity image by 1/(1 + alpha*|k|^2) in the
frequency domain (unit DC gain) and takes -ln of the result, mapping
propagation contrast to projected thickness. alpha lumps wavelength,
distance and the phase/absorption ratio into one length^2 knob.
"""

import dataclasses

import numpy as np

from .errors import ConfigurationError, DataError


@dataclasses.dataclass(frozen=True)
class PhaseConfig:
    alpha: float
    pixel_size_mm: float = 1.0
    # None: reject non-positive pixels; a float clamps them to that value
    clamp_floor: float | None = None
    pad_symmetric: bool = False

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigurationError(f"alpha must be >= 0, got {self.alpha}")
        if self.pixel_size_mm <= 0:
            raise ConfigurationError(f"pixel_size_mm must be > 0, got {self.pixel_size_mm}")


def lowpass_response(shape, config: PhaseConfig) -> np.ndarray:
    """Frequency response 1/(1 + alpha*|k|^2) on the FFT grid of `shape`."""
    ky = 2.0 * np.pi * np.fft.fftfreq(shape[0], d=config.pixel_size_mm)
    kx = 2.0 * np.pi * np.fft.fftfreq(shape[1], d=config.pixel_size_mm)
    k2 = ky[:, None] ** 2 + kx[None, :] ** 2
    return 1.0 / (1.0 + config.alpha * k2)


def paganin_filter(image, config: PhaseConfig) -> np.ndarray:
    """Low-pass the intensity image (unit DC gain) and return -ln of it."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ConfigurationError(f"expected a 2D image, got shape {img.shape}")
    if img.min() <= 0:
        if config.clamp_floor is None:
            raise DataError(
                f"{int((img <= 0).sum())} non-positive pixel(s); "
                "set clamp_floor to repair instead"
            )
        img = np.maximum(img, config.clamp_floor)
    if config.pad_symmetric:
        py, px = img.shape[0] // 2, img.shape[1] // 2
        padded = np.pad(img, ((py, py), (px, px)), mode="symmetric")
        resp = lowpass_response(padded.shape, config)
        filtered = np.real(np.fft.ifft2(np.fft.fft2(padded) * resp))
        filtered = filtered[py : py + img.shape[0], px : px + img.shape[1]]
    else:
        resp = lowpass_response(img.shape, config)
        filtered = np.real(np.fft.ifft2(np.fft.fft2(img) * resp))
    # the kernel is positive, so clamp only guards FFT round-off
    return -np.log(np.maximum(filtered, 1e-300))


def retrieve_series(series, config: PhaseConfig) -> np.ndarray:
    """paganin_filter applied frame by frame to a (t, y, x) stack."""
    stack = np.asarray(series, dtype=np.float64)
    if stack.ndim != 3:
        raise ConfigurationError(f"expected a (t, y, x) stack, got shape {stack.shape}")
    return np.stack([paganin_filter(frame, config) for frame in stack])


def flicker_score(series, background_mask) -> np.ndarray:
    """Frame-to-frame background variability.

    score_t = std over masked pixels of (frame_{t+1} - frame_t); identical
    frames score 0 and iid Gaussian(sigma) frames score about sigma*sqrt(2).
    """
    stack = np.asarray(series, dtype=np.float64)
    mask = np.asarray(background_mask, dtype=bool)
    if stack.ndim != 3 or stack.shape[0] < 2:
        raise ConfigurationError(f"need a (t >= 2, y, x) stack, got shape {stack.shape}")
    if mask.shape != stack.shape[1:]:
        raise ConfigurationError(f"mask shape {mask.shape} vs frames {stack.shape[1:]}")
    if not mask.any():
        raise ConfigurationError("background mask is empty")
    diffs = np.diff(stack, axis=0)
    return diffs[:, mask].std(axis=1)
