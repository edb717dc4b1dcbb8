"""Image and classification metrics: PSNR, windowed SSIM, per-material
AUPRC, confusion matrices, and SSIM between voxel spectra.

All metrics are implemented directly (no third-party metric calls) so the
test suite can cross-check them against independent references.
"""

import dataclasses
import math

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DataError

# documented sentinel for a zero-MSE comparison
PSNR_IDENTICAL = math.inf


def psnr(image, reference, data_range) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical inputs."""
    a = np.asarray(image, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigurationError(f"shape mismatch {a.shape} vs {b.shape}")
    if data_range <= 0:
        raise ConfigurationError(f"data_range must be > 0, got {data_range}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_IDENTICAL
    return 20.0 * math.log10(data_range) - 10.0 * math.log10(mse)


def _ssim_map(a, b, window, data_range, mean_filter):
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    n = window ** a.ndim
    cov_norm = n / (n - 1.0)  # sample covariance
    mu_a = mean_filter(a)
    mu_b = mean_filter(b)
    var_a = cov_norm * (mean_filter(a * a) - mu_a * mu_a)
    var_b = cov_norm * (mean_filter(b * b) - mu_b * mu_b)
    cov = cov_norm * (mean_filter(a * b) - mu_a * mu_b)
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(image, reference, window=7, data_range=None) -> float:
    """Mean windowed structural similarity with the standard constants.

    Uniform window, sample-covariance estimator, half-window edge crop, so
    values track the common reference implementation.
    """
    a = np.asarray(image, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigurationError(f"shape mismatch {a.shape} vs {b.shape}")
    if window % 2 == 0 or window < 3:
        raise ConfigurationError(f"window must be odd and >= 3, got {window}")
    if min(a.shape) < window:
        raise ConfigurationError(f"image {a.shape} smaller than window {window}")
    if data_range is None:
        lo = min(a.min(), b.min())
        hi = max(a.max(), b.max())
        data_range = hi - lo if hi > lo else 1.0

    def mean_filter(x):
        return ndimage.uniform_filter(x, size=window, mode="reflect")

    smap = _ssim_map(a, b, window, data_range, mean_filter)
    pad = window // 2
    core = smap[tuple(slice(pad, s - pad) for s in smap.shape)]
    return float(core.mean())


def spectral_ssim(volume, reference_spectra: dict, label_volume) -> dict:
    """1D SSIM between mean in-material voxel spectra and reference spectra.

    Returns {material_id: score or None}; None flags an empty material
    region. volume is a SpectralVolume, labels a LabelVolume of equal shape.
    """
    data = volume.data  # (channel, z, y, x)
    labels = label_volume.labels
    if data.shape[1:] != labels.shape:
        raise ConfigurationError(
            f"volume spatial shape {data.shape[1:]} vs labels {labels.shape}"
        )
    out = {}
    flat = data.reshape(data.shape[0], -1)
    lflat = labels.ravel()
    for mid, ref in reference_spectra.items():
        ref = np.asarray(ref, dtype=np.float64)
        if ref.shape != (data.shape[0],):
            raise ConfigurationError(
                f"reference spectrum for material {mid} has {ref.shape} bins, "
                f"volume has {data.shape[0]} channels"
            )
        mask = lflat == mid
        if not mask.any():
            out[mid] = None
            continue
        mean_spec = flat[:, mask].mean(axis=1)
        rng = max(float(np.ptp(ref)), float(np.ptp(mean_spec)), 1e-12)
        out[mid] = ssim(mean_spec, ref, window=7, data_range=rng)
    return out


def auprc_binary(scores, positive_mask) -> float:
    """Area under the precision-recall curve by step integration.

    Thresholds sweep the distinct scores in descending order; each step adds
    (recall gain) x (precision at that threshold). Ties are grouped.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    pos = np.asarray(positive_mask, dtype=bool).ravel()
    if s.shape != pos.shape:
        raise ConfigurationError(f"shape mismatch {s.shape} vs {pos.shape}")
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise DataError("no positive samples; AUPRC undefined")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    pos_sorted = pos[order]
    tp = np.cumsum(pos_sorted)
    fp = np.cumsum(~pos_sorted)
    # keep only the last index of each tied score block
    last = np.nonzero(np.diff(s_sorted))[0]
    idx = np.concatenate([last, [s.size - 1]])
    area = 0.0
    prev_tp = 0
    for i in idx:
        p = tp[i] / (tp[i] + fp[i])
        area += (tp[i] - prev_tp) / n_pos * p
        prev_tp = tp[i]
    return float(area)


def auprc(scores, true_labels, material_ids) -> dict:
    """Per-material AUPRC plus the mean over evaluable materials.

    scores: {material_id: array} or (n_materials, ...) array aligned with
    material_ids. Materials absent from true_labels get None (flagged).
    """
    labels = np.asarray(true_labels)
    result = {}
    values = []
    for k, mid in enumerate(material_ids):
        sc = scores[mid] if isinstance(scores, dict) else scores[k]
        sc = np.asarray(sc, dtype=np.float64)
        if sc.min() < 0 or sc.max() > 1:
            raise ConfigurationError(
                f"scores for material {mid} outside [0, 1]: "
                f"[{sc.min():.3g}, {sc.max():.3g}]"
            )
        mask = labels == mid
        if not mask.any():
            result[mid] = None
            continue
        result[mid] = auprc_binary(sc, mask)
        values.append(result[mid])
    result["mean"] = float(np.mean(values)) if values else None
    return result


@dataclasses.dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (true, predicted)
    rates: np.ndarray  # rows normalized to the true-class count
    material_ids: tuple


def confusion(true_labels, predicted_labels, material_ids):
    """Confusion counts/rates plus the binarized error map."""
    t = np.asarray(true_labels)
    p = np.asarray(predicted_labels)
    if t.shape != p.shape:
        raise ConfigurationError(f"shape mismatch {t.shape} vs {p.shape}")
    ids = list(material_ids)
    index = {mid: k for k, mid in enumerate(ids)}
    for arr, which in ((t, "true"), (p, "predicted")):
        extra = set(np.unique(arr).tolist()) - set(ids)
        if extra:
            raise DataError(f"{which} labels outside the material set: {sorted(extra)}")
    m = len(ids)
    ti = np.vectorize(index.get, otypes=[np.int64])(t.ravel())
    pi = np.vectorize(index.get, otypes=[np.int64])(p.ravel())
    counts = np.zeros((m, m), dtype=np.int64)
    np.add.at(counts, (ti, pi), 1)
    row = counts.sum(axis=1, keepdims=True)
    rates = np.divide(counts, row, out=np.zeros((m, m)), where=row > 0)
    error_map = t != p
    return ConfusionMatrix(counts=counts, rates=rates, material_ids=tuple(ids)), error_map
