"""Experiment configuration: JSON file + --key=value overrides + hashing.

A config is a plain nested dict. Overrides use dotted paths into that dict
("train.epochs=4", "acquisition.exposure_scale=100"); values parse as JSON
when possible and fall back to strings. The config hash is the sha256 of
the canonical (sorted, compact) JSON dump, so any field change shows up in
provenance.
"""

import copy
import hashlib
import json

from .errors import ConfigurationError, ParseError

DEFAULT_SPECTRAL_CONFIG = {
    "mode": "spectral",
    "domain": "projections",  # projections (N2N(P)) | slices (N2N(S))
    "seed": 1234,
    "phantom": {
        "shape": [64, 64, 64],
        "voxel_size_mm": 1.0,
        "clouds": [
            {
                "kind": "swiss_roll",
                "n_points": 2600,
                "point_radius_vox": 3,
                "priority": 1,
                "material_id": 1,
                "seed": 101,
                "offset": [0.0, 0.0, 0.0],
                "scale": [0.45, 1.0, 1.0],
            },
            {
                "kind": "swiss_roll",
                "n_points": 2600,
                "point_radius_vox": 3,
                "priority": 2,
                "material_id": 2,
                "seed": 202,
                "offset": [0.55, 0.0, 0.0],
                "scale": [0.45, 1.0, 1.0],
            },
            {
                "kind": "moons",
                "n_points": 2200,
                "point_radius_vox": 3,
                "priority": 3,
                "material_id": 3,
                "seed": 303,
                "offset": [0.0, 0.0, 0.0],
                "scale": [1.0, 0.44, 1.0],
            },
            {
                "kind": "moons",
                "n_points": 2200,
                "point_radius_vox": 3,
                "priority": 4,
                "material_id": 4,
                "seed": 404,
                "offset": [0.0, 0.56, 0.0],
                "scale": [1.0, 0.44, 1.0],
            },
            {
                "kind": "s_curve",
                "n_points": 2600,
                "point_radius_vox": 3,
                "priority": 5,
                "material_id": 5,
                "seed": 505,
                "offset": [0.0, 0.0, 0.0],
                "scale": [1.0, 1.0, 1.0],
            },
        ],
    },
    "materials": {
        "master_grid": {"start_keV": 15.0, "step_keV": 1.0, "n_bins": 135},
        "window_start_keV": 40.0,
        "window_n_bins": 46,
        "mac_table": None,
        "synth": [
            {"material_id": 1, "name": "eu_analog", "a": 0.045, "p": 3.0, "kedge_keV": 48.5, "jump": 5.0},
            {"material_id": 2, "name": "gd_analog", "a": 0.040, "p": 3.0, "kedge_keV": 50.2, "jump": 5.0},
            {"material_id": 3, "name": "yb_analog", "a": 0.050, "p": 3.0, "kedge_keV": 61.3, "jump": 5.0},
            {"material_id": 4, "name": "lu_analog", "a": 0.046, "p": 3.0, "kedge_keV": 63.3, "jump": 5.0},
            {"material_id": 5, "name": "u_analog", "a": 0.055, "p": 3.0, "kedge_keV": 115.6, "jump": 5.0},
        ],
    },
    "source": {"peak_keV": 55.0, "width_keV": 30.0, "peak_fluence": 175e3},
    "acquisition": {
        "n_angles": 120,
        "detector_count": None,  # null -> ceil(n * sqrt(2)), full coverage
        "pixel_size_mm": 1.0,
        # puts the noisy decomposition mid-range (mean AUPRC ~0.75) so both
        # the denoising gain and the x100-flux control have room to move
        "exposure_scale": 0.003,
        "count_floor": 1.0,
        "slice_start": 16,
        "slice_stop": 48,
        "noise_seed": 77,
    },
    "rebin": {"interval_sizes": None, "factors": None, "tail_policy": "drop"},
    "pairs": {"split_ratio": 0.8, "split_seed": 5},
    "model": {"base_width": 16, "depth": 2, "seed": 11},
    "train": {
        "epochs": 16,
        "batch_size": 8,
        "learning_rate": 3e-4,
        "seed": 21,
        "loss": "L1",
        "samples_per_epoch": 512,
        "augment": {
            "crop": 32,
            "flips": True,
            "quarter_turns": False,
            "max_shift_px": 2,
            "scale_range": None,
            "blur_prob": 0.2,
            "blur_sigma_range": [0.4, 0.9],
        },
    },
    "reconstruct": {"filter": "ramp", "slice_start": 24, "slice_stop": 40},
    "evaluate": {"kedge_flux_fraction": 0.5},
    "report": {"binning_factors": [1, 2, 4, 8]},
}

DEFAULT_TEMPORAL_CONFIG = {
    "mode": "temporal",
    "domain": "projections",
    "seed": 4321,
    "temporal": {
        "n_frames": 56,
        "static_frames": 16,  # trailing zero-motion segment, reference source
        "frame_shape": [64, 64],
        "exposure_photons": 60.0,
        "noise_seed": 88,
        "object": {
            "center": [0.42, 0.38],
            "radii_px": [15.0, 10.0],
            "angle0_deg": 20.0,
            "value": 0.85,
            "background": 0.35,
            "texture_amp": 0.3,
        },
        "velocity_px_per_frame": [0.22, 0.3],
        "rotation_deg_per_frame": 0.6,
        "series_seed": 7,
        # consecutive noisy pairs at this exposure score ~0.19; the threshold
        # only needs to reject motion outliers, not the Poisson floor
        "ssim_threshold": 0.15,
        "phase_alpha": 4.0,
        "median_draws": 5,
        "median_sigma": None,  # null -> estimated from the noisy series
    },
    "pairs": {"split_ratio": 0.8, "split_seed": 5},
    "model": {"base_width": 16, "depth": 2, "seed": 11},
    "train": {
        "epochs": 60,
        "batch_size": 8,
        "learning_rate": 3e-4,
        "seed": 21,
        "loss": "L1",
        "samples_per_epoch": None,
        "augment": {
            "crop": 32,
            "flips": True,
            "quarter_turns": False,
            "max_shift_px": 2,
            "scale_range": None,
            "blur_prob": 0.2,
            "blur_sigma_range": [0.4, 0.9],
        },
    },
}


def default_config(mode="spectral") -> dict:
    if mode == "spectral":
        return copy.deepcopy(DEFAULT_SPECTRAL_CONFIG)
    if mode == "temporal":
        return copy.deepcopy(DEFAULT_TEMPORAL_CONFIG)
    raise ConfigurationError(f"unknown mode {mode!r}")


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigurationError(f"config root must be an object, got {type(cfg).__name__}")
    base = default_config(cfg.get("mode", "spectral"))
    return _deep_merge(base, cfg)


def _deep_merge(base, update, path=""):
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}.{key}" if path else key
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply --key=value pairs; dotted keys descend into nested objects."""
    out = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        key = key.lstrip("-")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigurationError(f"override {key!r}: no config section {part!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigurationError(f"override {key!r}: unknown field {parts[-1]!r}")
        node[parts[-1]] = value
    return out


def config_hash(cfg: dict) -> str:
    dump = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(dump.encode("utf-8")).hexdigest()


def save_config(cfg: dict, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def require(cfg: dict, path: str):
    """Fetch a dotted path, raising a field-level error when absent."""
    node = cfg
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            raise ConfigurationError(f"config field {path!r} is missing")
        node = node[part]
    return node
