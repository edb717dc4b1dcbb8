"""Experiment pipeline stages operating on an output directory.

Each stage reads containers written by earlier stages, writes its own, and
records a manifest entry carrying the config hash, the seeds, the sha256 of
every input and output file, timing, and stage-specific numbers. Stage
dependencies are checked up front; a missing artifact names the stage that
produces it.
"""

import hashlib
import json
import os
import time

import numpy as np

from . import denoiser, metrics, pairs, phantom, phase, projector, spectra, store
from .config import config_hash, require, save_config
from .decompose import BACKGROUND_ID, MaterialLibrary
from .decompose import classify as classify_fractions
from .decompose import decompose as decompose_volume
from .errors import ConfigurationError, MissingDependencyError
from .rebin import IntervalScheme
from .rebin import rebin as rebin_channels

MANIFEST = "manifest.json"
RESULTS = "results.txt"

# artifact basename -> stage that writes it
PRODUCERS = {
    "labels.bin": "simulate",
    "counts_noisy.bin": "simulate",
    "flat.bin": "simulate",
    "sino_truth.bin": "simulate",
    "series_noisy.bin": "simulate",
    "series_clean.bin": "simulate",
    "counts_rebinned.bin": "rebin",
    "flat_rebinned.bin": "rebin",
    "checkpoint.pt": "train",
    "sino_denoised.bin": "denoise",
    "series_denoised.bin": "denoise",
    "recon_noisy.bin": "reconstruct",
    "recon_denoised.bin": "reconstruct",
    "fractions_noisy.bin": "decompose",
    "fractions_denoised.bin": "decompose",
    "labels_pred_noisy.bin": "decompose",
    "labels_pred_denoised.bin": "decompose",
    RESULTS: "evaluate",
}


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class Experiment:
    """Paths, manifest bookkeeping and config access for one run directory."""

    def __init__(self, out_dir, cfg):
        self.out_dir = out_dir
        self.cfg = cfg
        self.hash = config_hash(cfg)
        os.makedirs(out_dir, exist_ok=True)
        os.makedirs(os.path.join(out_dir, "plots"), exist_ok=True)

    def path(self, name):
        return os.path.join(self.out_dir, name)

    def need(self, name):
        """Path of a required artifact; error names the producing stage."""
        p = self.path(name)
        if not os.path.exists(p):
            stage = PRODUCERS.get(name, "an earlier stage")
            raise MissingDependencyError(
                f"missing artifact {name}; run `{stage}` first"
            )
        return p

    def provenance(self, seed, inputs=()):
        return {
            "seed": seed,
            "config_hash": self.hash,
            "inputs": {os.path.basename(p): file_sha256(p) for p in inputs},
        }

    def record(self, stage, seed, inputs, outputs, extra=None):
        manifest_path = self.path(MANIFEST)
        manifest = {}
        if os.path.exists(manifest_path):
            with open(manifest_path, encoding="utf-8") as fh:
                manifest = json.load(fh)
        manifest[stage] = {
            "config_hash": self.hash,
            "seed": seed,
            "inputs": {os.path.basename(p): file_sha256(p) for p in inputs},
            "outputs": {os.path.basename(p): file_sha256(p) for p in outputs},
            **(extra or {}),
        }
        tmp = manifest_path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, manifest_path)
        save_config(self.cfg, self.path("config.json"))

    # -- config materialization helpers ------------------------------------

    def master_grid(self) -> spectra.EnergyGrid:
        g = require(self.cfg, "materials.master_grid")
        return spectra.EnergyGrid(
            start_keV=g["start_keV"], step_keV=g["step_keV"], n_bins=g["n_bins"]
        )

    def window_grid(self) -> spectra.EnergyGrid:
        master = self.master_grid()
        start = require(self.cfg, "materials.window_start_keV")
        n = require(self.cfg, "materials.window_n_bins")
        return master.subgrid(master.locate_bin(start), n)

    def materials_on(self, grid) -> dict:
        mats = {}
        table = self.cfg["materials"].get("mac_table")
        if table:
            loaded, tab_grid = spectra.load_mac_table(table)
            ids = [s["material_id"] for s in require(self.cfg, "materials.synth")]
            if len(loaded) < len(ids):
                raise ConfigurationError(
                    f"mac table has {len(loaded)} materials, config names {len(ids)}"
                )
            for mid, spec in zip(ids, loaded):
                mats[int(mid)] = spec.restrict(grid)
            return mats
        master = self.master_grid()
        for entry in require(self.cfg, "materials.synth"):
            spec = spectra.synth_kedge_material(
                master,
                name=entry["name"],
                a=entry["a"],
                p=entry["p"],
                kedge_keV=entry["kedge_keV"],
                jump=entry["jump"],
            )
            mats[int(entry["material_id"])] = spec.restrict(grid)
        return mats

    def source_on(self, grid) -> spectra.SourceSpectrum:
        s = require(self.cfg, "source")
        full = spectra.synth_source(
            self.master_grid(),
            peak_keV=s["peak_keV"],
            width_keV=s["width_keV"],
            peak_fluence=s["peak_fluence"],
        )
        return full.restrict(grid)

    def angles(self) -> np.ndarray:
        n = require(self.cfg, "acquisition.n_angles")
        return np.linspace(0.0, 180.0, int(n), endpoint=False)

    def detector_count(self) -> int:
        n_det = self.cfg["acquisition"].get("detector_count")
        if n_det is not None:
            return int(n_det)
        n = require(self.cfg, "phantom.shape")[1]
        return int(np.ceil(n * np.sqrt(2.0)))

    def cloud_specs(self):
        return [
            phantom.PointCloudSpec(
                kind=c["kind"],
                n_points=c["n_points"],
                point_radius_vox=c["point_radius_vox"],
                priority=c["priority"],
                material_id=c["material_id"],
                seed=c["seed"],
                offset=tuple(c.get("offset", (0, 0, 0))),
                scale=tuple(c.get("scale", (1, 1, 1))),
            )
            for c in require(self.cfg, "phantom.clouds")
        ]

    def model_config(self) -> denoiser.ModelConfig:
        m = require(self.cfg, "model")
        in_channels = 2 if self.cfg["mode"] == "spectral" else 1
        return denoiser.ModelConfig(
            in_channels=in_channels,
            base_width=m["base_width"],
            depth=m["depth"],
            seed=m["seed"],
        )

    def train_config(self) -> denoiser.TrainConfig:
        t = require(self.cfg, "train")
        aug = t.get("augment")
        aug_cfg = None
        if aug is not None:
            aug_cfg = pairs.AugmentConfig(
                crop=aug.get("crop"),
                flips=aug.get("flips", False),
                quarter_turns=aug.get("quarter_turns", False),
                max_shift_px=aug.get("max_shift_px", 0),
                scale_range=tuple(aug["scale_range"]) if aug.get("scale_range") else None,
                blur_prob=aug.get("blur_prob", 0.0),
                blur_sigma_range=tuple(aug.get("blur_sigma_range", (0.5, 1.5))),
            )
        return denoiser.TrainConfig(
            epochs=t["epochs"],
            batch_size=t["batch_size"],
            learning_rate=t["learning_rate"],
            seed=t["seed"],
            loss=t.get("loss", "L1"),
            augment_config=aug_cfg,
            samples_per_epoch=t.get("samples_per_epoch"),
        )


def _spectral_only(exp, stage):
    if exp.cfg["mode"] != "spectral":
        raise ConfigurationError(f"stage `{stage}` applies to mode=spectral only")


def _load_counts(exp):
    """Noisy counts + flat (+ their paths), preferring the rebinned
    artifacts when the config declares a rebin scheme."""
    if exp.cfg.get("rebin", {}).get("factors"):
        names = ("counts_rebinned.bin", "flat_rebinned.bin")
    else:
        names = ("counts_noisy.bin", "flat.bin")
    paths = [exp.need(n) for n in names]
    return store.read(paths[0]), store.read(paths[1]), paths


def _attenuation(exp, counts_container, flat_container) -> np.ndarray:
    floor = require(exp.cfg, "acquisition.count_floor")
    counts = counts_container.data.astype(np.float64)  # (angle, channel, u, v)
    flat = flat_container.data.astype(np.float64)
    flat = np.maximum(flat, floor)
    return (-np.log(np.maximum(counts, floor) / flat[None, :, None, None])).astype(
        np.float32
    )


# -- stages ---------------------------------------------------------------


def stage_simulate(exp: Experiment) -> dict:
    t0 = time.monotonic()
    if exp.cfg["mode"] == "temporal":
        return _simulate_temporal(exp, t0)
    seed = require(exp.cfg, "acquisition.noise_seed")
    shape = tuple(require(exp.cfg, "phantom.shape"))
    voxel = require(exp.cfg, "phantom.voxel_size_mm")
    label_volume = phantom.rasterize(exp.cloud_specs(), shape, voxel)

    grid = exp.window_grid()
    mats = exp.materials_on(grid)
    source = exp.source_on(grid)
    angles = exp.angles()
    n_det = exp.detector_count()
    pixel = require(exp.cfg, "acquisition.pixel_size_mm")
    scale = require(exp.cfg, "acquisition.exposure_scale")
    z0 = require(exp.cfg, "acquisition.slice_start")
    z1 = require(exp.cfg, "acquisition.slice_stop")
    if not (0 <= z0 < z1 <= shape[0]):
        raise ConfigurationError(f"slice range [{z0}, {z1}) outside volume of {shape[0]}")

    present = sorted(int(v) for v in np.unique(label_volume.labels) if v)
    missing = [m for m in present if m not in mats]
    if missing:
        raise ConfigurationError(f"phantom labels {missing} lack material definitions")

    n_z = z1 - z0
    counts = np.empty((angles.size, grid.n_bins, n_det, n_z), dtype=np.uint32)
    truth = np.empty((angles.size, grid.n_bins, n_det, n_z), dtype=np.float32)
    flat = projector.flat_field(source, pixel, scale)
    for k in range(n_z):
        expected = projector.forward_spectral(
            label_volume.labels[z0 + k],
            mats,
            source,
            angles,
            detector_count=n_det,
            pixel_size_mm=pixel,
            exposure_scale=scale,
        )
        noisy = projector.poissonize(expected, seed, indices=(z0 + k,))
        counts[..., k] = noisy.data
        truth[..., k] = -np.log(expected.data / flat[None, :, None])

    grid_meta = grid.to_meta()
    common_meta = {
        "grid": grid_meta,
        "angles_deg": angles.tolist(),
        "pixel_size_mm": pixel,
        "slice_start": z0,
        "slice_stop": z1,
        "exposure_scale": scale,
        "channel_offset": 0,
    }
    prov = exp.provenance(seed)
    outputs = []
    for name, data, axes, units, meta in (
        ("labels.bin", label_volume.labels.astype(np.uint16), ("z", "y", "x"), "material_id",
         {"voxel_size_mm": voxel, "material_ids": present}),
        ("counts_noisy.bin", counts, ("angle", "channel", "u", "v"), "photons", common_meta),
        ("flat.bin", flat.astype(np.float32), ("channel",), "photons", {"grid": grid_meta}),
        ("sino_truth.bin", truth, ("angle", "channel", "u", "v"), "attenuation", common_meta),
    ):
        store.write(
            store.ArrayContainer(
                data=data, axis_names=axes, units=units, meta=meta, provenance=prov
            ),
            exp.path(name),
        )
        outputs.append(exp.path(name))
    extra = {
        "wall_time_s": time.monotonic() - t0,
        "n_slices": n_z,
        "label_counts": {str(m): int((label_volume.labels == m).sum()) for m in present},
    }
    exp.record("simulate", seed, [], outputs, extra)
    return extra


def _simulate_temporal(exp: Experiment, t0) -> dict:
    tcfg = require(exp.cfg, "temporal")
    seed = tcfg["noise_seed"]
    n_frames = tcfg["n_frames"]
    n_static = tcfg["static_frames"]
    if not 2 <= n_static < n_frames:
        raise ConfigurationError(
            f"static_frames must be in [2, n_frames), got {n_static} of {n_frames}"
        )
    shape = tuple(tcfg["frame_shape"])
    obj = phantom.EllipseSpec(
        center=tuple(tcfg["object"]["center"]),
        radii_px=tuple(tcfg["object"]["radii_px"]),
        angle0_deg=tcfg["object"]["angle0_deg"],
        value=tcfg["object"]["value"],
        background=tcfg["object"]["background"],
        texture_amp=tcfg["object"]["texture_amp"],
    )
    n_moving = n_frames - n_static
    moving = phantom.generate_motion_series(
        phantom.MotionSeriesSpec(
            n_frames=n_moving,
            object=obj,
            velocity_px_per_frame=tuple(tcfg["velocity_px_per_frame"]),
            rotation_deg_per_frame=tcfg["rotation_deg_per_frame"],
            seed=tcfg["series_seed"],
        ),
        shape,
    )
    vel = np.asarray(tcfg["velocity_px_per_frame"], dtype=np.float64)
    end_center = (
        np.asarray(obj.center) * np.asarray(shape, dtype=np.float64)
        + (n_moving - 1) * vel
    ) / np.asarray(shape, dtype=np.float64)
    static_obj = phantom.EllipseSpec(
        center=tuple(end_center),
        radii_px=obj.radii_px,
        angle0_deg=obj.angle0_deg + (n_moving - 1) * tcfg["rotation_deg_per_frame"],
        value=obj.value,
        background=obj.background,
        texture_amp=obj.texture_amp,
    )
    static = phantom.generate_motion_series(
        phantom.MotionSeriesSpec(
            n_frames=n_static,
            object=static_obj,
            velocity_px_per_frame=(0.0, 0.0),
            rotation_deg_per_frame=0.0,
            seed=tcfg["series_seed"],
        ),
        shape,
    )
    clean = np.concatenate([moving, static]).astype(np.float32)

    exposure = float(tcfg["exposure_photons"])
    if exposure <= 0:
        raise ConfigurationError(f"exposure_photons must be > 0, got {exposure}")
    noisy = np.empty_like(clean)
    for t in range(clean.shape[0]):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(t,)))
        noisy[t] = rng.poisson(clean[t] * exposure).astype(np.float32) / exposure

    meta = {
        "exposure_photons": exposure,
        "static_start": n_moving,
        "n_frames": n_frames,
    }
    prov = exp.provenance(seed)
    outputs = []
    for name, data in (("series_clean.bin", clean), ("series_noisy.bin", noisy)):
        store.write(
            store.ArrayContainer(
                data=data, axis_names=("t", "y", "x"), units="intensity", meta=meta,
                provenance=prov,
            ),
            exp.path(name),
        )
        outputs.append(exp.path(name))
    extra = {"wall_time_s": time.monotonic() - t0, "static_start": n_moving}
    exp.record("simulate", seed, [], outputs, extra)
    return extra


def stage_rebin(exp: Experiment) -> dict:
    _spectral_only(exp, "rebin")
    t0 = time.monotonic()
    rb = exp.cfg.get("rebin") or {}
    if not rb.get("factors"):
        raise ConfigurationError("rebin stage requires rebin.factors in the config")
    counts_path = exp.need("counts_noisy.bin")
    flat_path = exp.need("flat.bin")
    counts = store.read(counts_path)
    flat = store.read(flat_path)
    sizes = rb.get("interval_sizes") or [counts.data.shape[1]]
    scheme = IntervalScheme(
        interval_sizes=tuple(sizes),
        factors=tuple(rb["factors"]),
        tail_policy=rb.get("tail_policy", "drop"),
    )
    res = rebin_channels(np.moveaxis(counts.data, 1, 0), scheme)
    out_counts = np.moveaxis(res.data, 0, 1)
    out_flat = rebin_channels(flat.data, scheme).data

    centers = np.asarray(
        spectra.EnergyGrid(**counts.meta["grid"]).centers
    )
    group_centers = [float(centers[a:b].mean()) for a, b in res.spans]
    meta = dict(counts.meta)
    meta.pop("grid", None)
    meta["energy_centers_keV"] = group_centers
    meta["spans"] = [list(s) for s in res.spans]
    meta["dropped"] = [list(d) for d in res.dropped]
    prov = exp.provenance(require(exp.cfg, "acquisition.noise_seed"), [counts_path, flat_path])
    store.write(
        store.ArrayContainer(
            data=out_counts.astype(np.uint32), axis_names=("angle", "channel", "u", "v"),
            units="photons", meta=meta, provenance=prov,
        ),
        exp.path("counts_rebinned.bin"),
    )
    store.write(
        store.ArrayContainer(
            data=out_flat.astype(np.float32), axis_names=("channel",), units="photons",
            meta={"energy_centers_keV": group_centers}, provenance=prov,
        ),
        exp.path("flat_rebinned.bin"),
    )
    extra = {
        "wall_time_s": time.monotonic() - t0,
        "output_channels": len(res.spans),
        "dropped_channels": int(sum(b - a for a, b in res.dropped)),
    }
    exp.record(
        "rebin",
        require(exp.cfg, "acquisition.noise_seed"),
        [counts_path, flat_path],
        [exp.path("counts_rebinned.bin"), exp.path("flat_rebinned.bin")],
        extra,
    )
    return extra


def _training_stack(exp: Experiment):
    """(series, channel, u, v) float32 stack in the configured domain."""
    if exp.cfg["mode"] == "temporal":
        series = store.read(exp.need("series_noisy.bin"))
        return series.data.astype(np.float32), [exp.path("series_noisy.bin")]
    if exp.cfg.get("domain", "projections") == "slices":
        recon = store.read(exp.need("recon_noisy.bin"))
        # (channel, z, y, x) -> (z, channel, y, x)
        return np.moveaxis(recon.data, 0, 1).astype(np.float32), [exp.path("recon_noisy.bin")]
    counts, flat, paths = _load_counts(exp)
    return _attenuation(exp, counts, flat), paths


def stage_train(exp: Experiment) -> dict:
    t0 = time.monotonic()
    stack, inputs = _training_stack(exp)
    split_spec = pairs.SplitSpec(
        ratio=require(exp.cfg, "pairs.split_ratio"),
        seed=require(exp.cfg, "pairs.split_seed"),
    )
    if exp.cfg["mode"] == "spectral":
        train_idx, val_idx = pairs.split(range(stack.shape[0]), split_spec)
        train_pairs = list(pairs.spectral_train_pairs(stack[train_idx]))
        val_pairs = list(pairs.spectral_train_pairs(stack[val_idx]))
    else:
        threshold = require(exp.cfg, "temporal.ssim_threshold")
        all_pairs = list(pairs.temporal_pairs(stack, threshold))
        if len(all_pairs) < 2:
            raise ConfigurationError(
                f"only {len(all_pairs)} temporal pairs survive the SSIM threshold"
            )
        train_sel, val_sel = pairs.split(range(len(all_pairs)), split_spec)
        train_pairs = [all_pairs[k] for k in train_sel]
        val_pairs = [all_pairs[k] for k in val_sel]

    trained, report = denoiser.train(
        exp.model_config(), train_pairs, val_pairs, exp.train_config()
    )
    denoiser.save_checkpoint(trained, exp.path("checkpoint.pt"))
    extra = {
        "wall_time_s": time.monotonic() - t0,
        "train_pairs": len(train_pairs),
        "val_pairs": len(val_pairs),
        "train_loss": report.train_loss,
        "val_loss": report.val_loss,
        "identity_val_loss": report.identity_val_loss,
        "backend": report.backend,
        "nondeterministic_backend": False,
    }
    exp.record(
        "train", require(exp.cfg, "train.seed"), inputs, [exp.path("checkpoint.pt")], extra
    )
    return extra


def stage_denoise(exp: Experiment) -> dict:
    t0 = time.monotonic()
    trained = denoiser.load_checkpoint(exp.need("checkpoint.pt"))
    stack, inputs = _training_stack(exp)
    inputs = [exp.need("checkpoint.pt")] + inputs
    seed = require(exp.cfg, "train.seed")

    if exp.cfg["mode"] == "temporal":
        frames = [denoiser.predict(trained, [stack[t]]) for t in range(stack.shape[0])]
        out = np.stack(frames).astype(np.float32)
        src_meta = store.read(exp.need("series_noisy.bin")).meta
        store.write(
            store.ArrayContainer(
                data=out, axis_names=("t", "y", "x"), units="intensity",
                meta=src_meta, provenance=exp.provenance(seed, inputs),
            ),
            exp.path("series_denoised.bin"),
        )
        outputs = [exp.path("series_denoised.bin")]
        extra = {"wall_time_s": time.monotonic() - t0, "frames": int(out.shape[0])}
        exp.record("denoise", seed, inputs, outputs, extra)
        return extra

    n_series, n_ch = stack.shape[:2]
    denoised = np.empty((n_series, n_ch - 2, stack.shape[2], stack.shape[3]), np.float32)
    for i in range(n_series):
        batch = [[stack[i, j - 1], stack[i, j]] for j in range(1, n_ch)]
        half = np.stack(denoiser.predict_batch(trained, batch))  # (J-1, u, v)
        denoised[i] = denoiser.shift_compensate(half, channel_axis=0)

    if exp.cfg.get("domain", "projections") == "slices":
        # the stack is (z, channel, y, x): write the denoised reconstruction
        recon_meta = dict(store.read(exp.need("recon_noisy.bin")).meta)
        recon_meta["channel_offset"] = recon_meta.get("channel_offset", 0) + 1
        store.write(
            store.ArrayContainer(
                data=np.moveaxis(denoised, 0, 1), axis_names=("channel", "z", "y", "x"),
                units="attenuation_per_mm", meta=recon_meta,
                provenance=exp.provenance(seed, inputs),
            ),
            exp.path("recon_denoised.bin"),
        )
        outputs = [exp.path("recon_denoised.bin")]
    else:
        counts, _, _ = _load_counts(exp)
        meta = dict(counts.meta)
        meta["channel_offset"] = meta.get("channel_offset", 0) + 1
        store.write(
            store.ArrayContainer(
                data=denoised, axis_names=("angle", "channel", "u", "v"),
                units="attenuation", meta=meta, provenance=exp.provenance(seed, inputs),
            ),
            exp.path("sino_denoised.bin"),
        )
        outputs = [exp.path("sino_denoised.bin")]
    extra = {
        "wall_time_s": time.monotonic() - t0,
        "series": int(n_series),
        "channels_out": int(n_ch - 2),
    }
    exp.record("denoise", seed, inputs, outputs, extra)
    return extra


def _recon_slice_range(exp, n_sim_slices):
    r0 = exp.cfg.get("reconstruct", {}).get("slice_start")
    r1 = exp.cfg.get("reconstruct", {}).get("slice_stop")
    z0 = require(exp.cfg, "acquisition.slice_start")
    z1 = require(exp.cfg, "acquisition.slice_stop")
    if r0 is None or r1 is None:
        return z0, z1
    if not (z0 <= r0 < r1 <= z1):
        raise ConfigurationError(
            f"reconstruct slice range [{r0}, {r1}) outside simulated [{z0}, {z1})"
        )
    return int(r0), int(r1)


def _fbp_stack(data4d, angles, filter_name, output_size, pixel):
    """(angle, channel, u, v) -> (channel, v, y, x) via per-slice FBP."""
    n_ch, n_v = data4d.shape[1], data4d.shape[3]
    out = np.empty((n_ch, n_v, output_size, output_size), dtype=np.float32)
    for k in range(n_v):
        for j in range(n_ch):
            out[j, k] = projector.fbp(
                data4d[:, j, :, k], angles, filter_name, output_size, pixel
            )
    return out


def stage_reconstruct(exp: Experiment) -> dict:
    _spectral_only(exp, "reconstruct")
    t0 = time.monotonic()
    domain = exp.cfg.get("domain", "projections")
    counts, flat, inputs = _load_counts(exp)
    atten = _attenuation(exp, counts, flat)
    angles = np.asarray(counts.meta["angles_deg"])
    pixel = counts.meta["pixel_size_mm"]
    n = require(exp.cfg, "phantom.shape")[1]
    filter_name = exp.cfg.get("reconstruct", {}).get("filter", "ramp")
    z0_sim = counts.meta["slice_start"]
    r0, r1 = _recon_slice_range(exp, atten.shape[3])
    sl = slice(r0 - z0_sim, r1 - z0_sim)
    seed = require(exp.cfg, "acquisition.noise_seed")
    inputs = list(inputs)
    outputs = []

    axis_meta = {
        k: counts.meta[k]
        for k in ("grid", "spans", "energy_centers_keV")
        if k in counts.meta
    }

    if domain == "slices":
        # noisy volume on the full channel set; feeds slice-domain training
        vol = _fbp_stack(atten[..., sl], angles, filter_name, n, pixel)
        meta = {
            "slice_start": r0, "slice_stop": r1, "channel_offset": 0,
            "voxel_size_mm": pixel, "filter": filter_name, **axis_meta,
        }
        store.write(
            store.ArrayContainer(
                data=vol, axis_names=("channel", "z", "y", "x"),
                units="attenuation_per_mm", meta=meta,
                provenance=exp.provenance(seed, inputs),
            ),
            exp.path("recon_noisy.bin"),
        )
        outputs.append(exp.path("recon_noisy.bin"))
    else:
        sino_d = store.read(exp.need("sino_denoised.bin"))
        inputs.append(exp.path("sino_denoised.bin"))
        offset = sino_d.meta.get("channel_offset", 1)
        n_ch_d = sino_d.data.shape[1]
        # restrict the noisy stack to the channels the denoiser produced
        noisy_matched = atten[:, offset : offset + n_ch_d]
        vol_noisy = _fbp_stack(noisy_matched[..., sl], angles, filter_name, n, pixel)
        vol_den = _fbp_stack(sino_d.data[..., sl], angles, filter_name, n, pixel)
        meta = {
            "slice_start": r0, "slice_stop": r1, "channel_offset": offset,
            "voxel_size_mm": pixel, "filter": filter_name, **axis_meta,
        }
        for name, vol in (("recon_noisy.bin", vol_noisy), ("recon_denoised.bin", vol_den)):
            store.write(
                store.ArrayContainer(
                    data=vol, axis_names=("channel", "z", "y", "x"),
                    units="attenuation_per_mm", meta=meta,
                    provenance=exp.provenance(seed, inputs),
                ),
                exp.path(name),
            )
            outputs.append(exp.path(name))
    extra = {"wall_time_s": time.monotonic() - t0, "slices": int(r1 - r0)}
    exp.record("reconstruct", seed, inputs, outputs, extra)
    return extra


def channel_view(exp, meta, n_channels):
    """Energy centers and material spectra matching a container's channels.

    Containers carry either the acquisition grid ("grid") or rebinned group
    descriptors ("spans" + "energy_centers_keV"), always describing the full
    original channel axis; "channel_offset" plus the data shape select the
    view. Returns (centers, {mid: mu}, {mid: kedge_keV or None}, grid) where
    the grid is nominal bookkeeping for container types that demand one.
    """
    offset = int(meta.get("channel_offset", 0))
    window = exp.window_grid()
    mats = exp.materials_on(window)
    if "spans" in meta:
        spans = [tuple(map(int, s)) for s in meta["spans"]][offset : offset + n_channels]
        centers = np.asarray(meta["energy_centers_keV"], dtype=np.float64)[
            offset : offset + n_channels
        ]
        mu = {mid: np.array([m.mu[a:b].mean() for a, b in spans]) for mid, m in mats.items()}
        kedges = {
            mid: m.kedge_keV
            if m.kedge_keV is not None and centers[0] < m.kedge_keV <= centers[-1]
            else None
            for mid, m in mats.items()
        }
        step = float(centers[1] - centers[0]) if centers.size > 1 else window.step_keV
        grid = spectra.EnergyGrid(start_keV=float(centers[0]), step_keV=step, n_bins=len(spans))
    else:
        grid = window.subgrid(offset, n_channels)
        restricted = {mid: m.restrict(grid) for mid, m in mats.items()}
        centers = grid.centers
        mu = {mid: m.mu for mid, m in restricted.items()}
        kedges = {mid: m.kedge_keV for mid, m in restricted.items()}
    return centers, mu, kedges, grid


def stage_decompose(exp: Experiment) -> dict:
    _spectral_only(exp, "decompose")
    t0 = time.monotonic()
    seed = require(exp.cfg, "acquisition.noise_seed")
    names = {int(s["material_id"]): s["name"] for s in require(exp.cfg, "materials.synth")}
    inputs, outputs = [], []
    extra = {"unconverged": {}}
    for tag in ("noisy", "denoised"):
        path = exp.need(f"recon_{tag}.bin")
        inputs.append(path)
        cont = store.read(path)
        meta = dict(cont.meta)
        _, mu, _, grid = channel_view(exp, meta, cont.data.shape[0])
        ids = sorted(mu)
        library = MaterialLibrary(
            material_ids=(BACKGROUND_ID, *ids),
            names=("background", *[names.get(i, str(i)) for i in ids]),
            columns=np.column_stack([np.zeros(grid.n_bins)] + [mu[i] for i in ids]),
            grid=grid,
        )
        volume = projector.SpectralVolume(
            data=cont.data, voxel_size_mm=meta.get("voxel_size_mm", 1.0), grid=grid
        )
        fm = decompose_volume(volume, library)
        labels = classify_fractions(fm, voxel_size_mm=meta.get("voxel_size_mm", 1.0))
        prov = exp.provenance(seed, [path])
        fr_meta = {
            "material_ids": list(library.material_ids),
            "material_names": list(library.names),
            "slice_start": meta.get("slice_start"),
            "slice_stop": meta.get("slice_stop"),
        }
        store.write(
            store.ArrayContainer(
                data=fm.fractions.astype(np.float32),
                axis_names=("material", "z", "y", "x"),
                units="fraction", meta=fr_meta, provenance=prov,
            ),
            exp.path(f"fractions_{tag}.bin"),
        )
        store.write(
            store.ArrayContainer(
                data=labels.labels.astype(np.uint16), axis_names=("z", "y", "x"),
                units="material_id", meta=fr_meta, provenance=prov,
            ),
            exp.path(f"labels_pred_{tag}.bin"),
        )
        outputs += [exp.path(f"fractions_{tag}.bin"), exp.path(f"labels_pred_{tag}.bin")]
        extra["unconverged"][tag] = int(fm.unconverged.sum())
    extra["wall_time_s"] = time.monotonic() - t0
    exp.record("decompose", seed, inputs, outputs, extra)
    return extra


def _write_results(exp, values: dict):
    lines = []
    for key in sorted(values):
        v = values[key]
        if isinstance(v, float):
            text = repr(v)
        else:
            text = str(v)
        lines.append(f"{key}={text}")
    tmp = exp.path(RESULTS + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, exp.path(RESULTS))


def stage_evaluate(exp: Experiment) -> dict:
    t0 = time.monotonic()
    if exp.cfg["mode"] == "temporal":
        return _evaluate_temporal(exp, t0)
    seed = require(exp.cfg, "acquisition.noise_seed")
    labels_cont = store.read(exp.need("labels.bin"))
    inputs = [exp.path("labels.bin")]
    material_names = {
        int(s["material_id"]): s["name"] for s in require(exp.cfg, "materials.synth")
    }
    values = {}
    per_tag = {}
    for tag in ("noisy", "denoised"):
        fr = store.read(exp.need(f"fractions_{tag}.bin"))
        pred = store.read(exp.need(f"labels_pred_{tag}.bin"))
        inputs += [exp.path(f"fractions_{tag}.bin"), exp.path(f"labels_pred_{tag}.bin")]
        ids = [int(v) for v in fr.meta["material_ids"]]
        z0, z1 = fr.meta["slice_start"], fr.meta["slice_stop"]
        truth = labels_cont.data[z0:z1]
        scores = {mid: np.clip(fr.data[k], 0.0, 1.0) for k, mid in enumerate(ids)}
        ap = metrics.auprc(scores, truth, ids)
        non_air = [mid for mid in ids if mid != 0 and ap[mid] is not None]
        mean_ap = float(np.mean([ap[mid] for mid in non_air]))
        values[f"auprc_{tag}_mean"] = mean_ap
        for mid in ids:
            if ap[mid] is not None:
                name = material_names.get(mid, "air" if mid == 0 else str(mid))
                values[f"auprc_{tag}_{name}"] = ap[mid]
        cm, err_map = metrics.confusion(truth, pred.data, ids)
        for a, mid_a in enumerate(ids):
            for b, mid_b in enumerate(ids):
                values[f"confusion_{tag}_{mid_a}_{mid_b}"] = float(cm.rates[a, b])
        values[f"error_fraction_{tag}"] = float(err_map.mean())
        per_tag[tag] = {"ap": ap, "ids": ids, "truth": truth}

    # spectral fidelity + k-edge localization on the denoised volume
    recon_d = store.read(exp.need("recon_denoised.bin"))
    inputs.append(exp.path("recon_denoised.bin"))
    meta = dict(recon_d.meta)
    centers, mu, kedges, grid = channel_view(exp, meta, recon_d.data.shape[0])
    truth = per_tag["denoised"]["truth"]
    vol = projector.SpectralVolume(
        data=recon_d.data, voxel_size_mm=meta.get("voxel_size_mm", 1.0), grid=grid
    )
    label_vol = phantom.LabelVolume(labels=truth, voxel_size_mm=meta.get("voxel_size_mm", 1.0))
    sp_ssim = metrics.spectral_ssim(vol, mu, label_vol)
    for mid, score in sp_ssim.items():
        if score is not None:
            values[f"spectral_ssim_denoised_{material_names[mid]}"] = float(score)

    # channel flux on the same view; the flat field is proportional to source fluence
    flat_name = "flat_rebinned.bin" if "spans" in meta else "flat.bin"
    flat = store.read(exp.need(flat_name)).data.astype(np.float64)
    offset = int(meta.get("channel_offset", 0))
    flux = flat[offset : offset + recon_d.data.shape[0]]
    flux_threshold = float(flux.max()) * require(exp.cfg, "evaluate.kedge_flux_fraction")
    flat_vol = recon_d.data.reshape(recon_d.data.shape[0], -1)
    lflat = truth.ravel()
    for mid, kedge in kedges.items():
        if kedge is None:
            continue
        edge_bin = int(np.argmin(np.abs(centers - kedge)))
        if flux[edge_bin] < flux_threshold:
            continue
        mask = lflat == mid
        if mask.sum() < 100:
            continue
        mean_spec = flat_vol[:, mask].mean(axis=1)
        jump_at = int(np.argmax(np.diff(mean_spec)))  # boundary between jump_at, jump_at+1
        # the true edge sits between the last center below it and the first at/above
        true_boundary = int(np.searchsorted(centers, kedge)) - 1
        values[f"kedge_offset_bins_{material_names[mid]}"] = int(jump_at - true_boundary)
        values[f"kedge_voxels_{material_names[mid]}"] = int(mask.sum())

    values["auprc_gain_mean"] = values["auprc_denoised_mean"] - values["auprc_noisy_mean"]
    values["unconverged_noisy"] = 0
    values["unconverged_denoised"] = 0
    manifest_path = exp.path(MANIFEST)
    if os.path.exists(manifest_path):
        with open(manifest_path, encoding="utf-8") as fh:
            man = json.load(fh)
        unc = man.get("decompose", {}).get("unconverged", {})
        values["unconverged_noisy"] = int(unc.get("noisy", 0))
        values["unconverged_denoised"] = int(unc.get("denoised", 0))

    _write_results(exp, values)
    extra = {"wall_time_s": time.monotonic() - t0, "keys": len(values)}
    exp.record("evaluate", seed, inputs, [exp.path(RESULTS)], extra)
    return extra


def _evaluate_temporal(exp: Experiment, t0) -> dict:
    tcfg = require(exp.cfg, "temporal")
    seed = tcfg["noise_seed"]
    clean = store.read(exp.need("series_clean.bin"))
    noisy = store.read(exp.need("series_noisy.bin"))
    den = store.read(exp.need("series_denoised.bin"))
    inputs = [exp.path(p) for p in ("series_clean.bin", "series_noisy.bin", "series_denoised.bin")]
    s0 = noisy.meta["static_start"]
    reference = noisy.data[s0:].mean(axis=0)  # static-segment average
    data_range = float(np.ptp(clean.data))

    pcfg = phase.PhaseConfig(alpha=tcfg["phase_alpha"], clamp_floor=1e-6)
    ref_phase = phase.paganin_filter(np.maximum(reference, 1e-6), pcfg)
    phase_range = float(np.ptp(ref_phase)) or 1.0

    values = {}
    for tag, series in (("noisy", noisy.data), ("denoised", den.data)):
        pre = [
            metrics.psnr(series[t], reference, data_range) for t in range(s0, series.shape[0])
        ]
        post = [
            metrics.psnr(
                phase.paganin_filter(np.maximum(series[t], 1e-6), pcfg),
                ref_phase,
                phase_range,
            )
            for t in range(s0, series.shape[0])
        ]
        values[f"psnr_pre_retrieval_{tag}"] = float(np.mean(pre))
        values[f"psnr_post_retrieval_{tag}"] = float(np.mean(post))

    mask = np.abs(clean.data[-1] - clean.data[-1].mean()) < 0.25 * np.ptp(clean.data[-1])
    if not mask.any():
        mask = np.ones(clean.data.shape[1:], dtype=bool)
    values["flicker_noisy"] = float(np.mean(phase.flicker_score(noisy.data[s0:], mask)))
    values["flicker_denoised"] = float(np.mean(phase.flicker_score(den.data[s0:], mask)))

    draws = int(tcfg["median_draws"])
    sigma = tcfg.get("median_sigma")
    if sigma is None:
        sigma = float(np.diff(noisy.data[s0:], axis=0).std() / np.sqrt(2.0))
    trained = denoiser.load_checkpoint(exp.need("checkpoint.pt"))
    inputs.append(exp.path("checkpoint.pt"))
    ensemble = np.stack(
        [
            denoiser.median_ensemble(trained, noisy.data[t], draws, sigma, seed=seed + t)
            for t in range(s0, noisy.data.shape[0])
        ]
    )
    values["flicker_median_ensemble"] = float(np.mean(phase.flicker_score(ensemble, mask)))
    values["psnr_pre_retrieval_gain"] = (
        values["psnr_pre_retrieval_denoised"] - values["psnr_pre_retrieval_noisy"]
    )
    values["psnr_post_retrieval_gain"] = (
        values["psnr_post_retrieval_denoised"] - values["psnr_post_retrieval_noisy"]
    )
    _write_results(exp, values)
    extra = {"wall_time_s": time.monotonic() - t0, "keys": len(values)}
    exp.record("evaluate", seed, inputs, [exp.path(RESULTS)], extra)
    return extra


def read_results(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            key, _, raw = line.partition("=")
            try:
                out[key] = float(raw)
            except ValueError:
                out[key] = raw
    return out
