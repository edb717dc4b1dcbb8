"""Plot generation from completed pipeline runs.

Writes PNG figures into <out_dir>/plots/. Requires the evaluate stage's
results file so every figure is backed by recorded numbers.
"""

import os
import time

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import metrics, pipeline, projector, store
from .config import require
from .errors import ConfigurationError
from .rebin import rebin as rebin_channels
from .rebin import uniform_scheme


def _save(fig, path):
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path


def _white_beam_slices(exp, z_index=None):
    noisy = store.read(exp.need("recon_noisy.bin"))
    den = store.read(exp.need("recon_denoised.bin"))
    k = noisy.data.shape[1] // 2 if z_index is None else z_index
    wb_noisy = noisy.data[:, k].mean(axis=0)
    wb_den = den.data[:, k].mean(axis=0)
    return wb_noisy, wb_den, noisy.meta, k


def _plot_slices(exp):
    wb_noisy, wb_den, meta, k = _white_beam_slices(exp)
    truth_sino = store.read(exp.need("sino_truth.bin"))
    angles = np.asarray(truth_sino.meta["angles_deg"])
    pixel = truth_sino.meta["pixel_size_mm"]
    n = wb_noisy.shape[0]
    z = meta["slice_start"] + k - truth_sino.meta["slice_start"]
    # truth sinogram keeps all acquisition channels; match the recon's view
    # (rebinned runs just average everything - display only)
    if "spans" in meta:
        sino = truth_sino.data[:, :, :, z].mean(axis=1)
    else:
        offset = meta.get("channel_offset", 0)
        n_ch = store.read(exp.need("recon_noisy.bin")).data.shape[0]
        sino = truth_sino.data[:, offset : offset + n_ch, :, z].mean(axis=1)
    wb_truth = projector.fbp(sino, angles, meta.get("filter", "ramp"), n, pixel)

    fig, axes = plt.subplots(1, 3, figsize=(10.5, 3.6))
    vmin, vmax = np.percentile(wb_truth, [1, 99])
    for ax, img, title in zip(
        axes, [wb_noisy, wb_den, wb_truth], ["noisy", "denoised", "noise-free"]
    ):
        ax.imshow(img, cmap="gray", vmin=vmin, vmax=vmax)
        ax.set_title(title)
        ax.axis("off")
    fig.suptitle(f"white-beam reconstruction, slice {meta['slice_start'] + k}")
    return _save(fig, os.path.join(exp.out_dir, "plots", "slices.png"))


def _plot_spectra(exp):
    recon = store.read(exp.need("recon_denoised.bin"))
    labels = store.read(exp.need("labels.bin"))
    meta = dict(recon.meta)
    centers, mu, _, _ = pipeline.channel_view(exp, meta, recon.data.shape[0])
    names = {int(s["material_id"]): s["name"] for s in require(exp.cfg, "materials.synth")}
    z0, z1 = meta["slice_start"], meta["slice_stop"]
    truth = labels.data[z0:z1]
    flat = recon.data.reshape(recon.data.shape[0], -1)
    lflat = truth.ravel()

    fig, ax = plt.subplots(figsize=(7.5, 4.6))
    colors = plt.cm.tab10(np.linspace(0, 1, 10))
    for i, mid in enumerate(sorted(mu)):
        mask = lflat == mid
        if not mask.any():
            continue
        ax.plot(centers, mu[mid], "--", color=colors[i % 10], lw=1.0)
        ax.plot(
            centers,
            flat[:, mask].mean(axis=1),
            color=colors[i % 10],
            lw=1.6,
            label=names.get(mid, str(mid)),
        )
    ax.set_xlabel("energy (keV)")
    ax.set_ylabel("attenuation (1/mm)")
    ax.set_title("mean voxel spectra (solid) vs reference (dashed)")
    ax.legend(fontsize=8)
    return _save(fig, os.path.join(exp.out_dir, "plots", "spectra.png"))


def _plot_confusion(exp, results):
    names = {int(s["material_id"]): s["name"] for s in require(exp.cfg, "materials.synth")}
    names[0] = "air"
    fr = store.read(exp.need("fractions_noisy.bin"))
    ids = [int(v) for v in fr.meta["material_ids"]]
    fig, axes = plt.subplots(1, 2, figsize=(10.5, 4.6))
    for ax, tag in zip(axes, ("noisy", "denoised")):
        mat = np.array(
            [[results[f"confusion_{tag}_{a}_{b}"] for b in ids] for a in ids]
        )
        im = ax.imshow(mat, cmap="viridis", vmin=0, vmax=1)
        ax.set_xticks(range(len(ids)), [names.get(i, str(i)) for i in ids], rotation=45, fontsize=7)
        ax.set_yticks(range(len(ids)), [names.get(i, str(i)) for i in ids], fontsize=7)
        for a in range(len(ids)):
            for b in range(len(ids)):
                ax.text(b, a, f"{mat[a, b]:.2f}", ha="center", va="center",
                        color="white" if mat[a, b] < 0.6 else "black", fontsize=6)
        ax.set_title(tag)
    fig.colorbar(im, ax=axes, shrink=0.8)
    return _save(fig, os.path.join(exp.out_dir, "plots", "confusion.png"))


def _plot_auprc(exp, results):
    keys = sorted(k for k in results if k.startswith("auprc_noisy_") and not k.endswith("_mean"))
    labels = [k[len("auprc_noisy_"):] for k in keys]
    noisy = [results[k] for k in keys]
    den = [results[k.replace("noisy", "denoised")] for k in keys]
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(7.5, 4.2))
    ax.bar(x - 0.18, noisy, width=0.36, label="noisy")
    ax.bar(x + 0.18, den, width=0.36, label="denoised")
    ax.set_xticks(x, labels, rotation=30, fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("AUPRC")
    ax.axhline(1.0, color="gray", lw=0.6, ls=":")
    ax.legend()
    ax.set_title("per-material AUPRC")
    return _save(fig, os.path.join(exp.out_dir, "plots", "auprc.png"))


def _plot_binning_curve(exp):
    """Single-energy slice SSIM against the noise-free reconstruction as the
    spectral binning factor grows (trades energy resolution for statistics)."""
    factors = exp.cfg.get("report", {}).get("binning_factors") or [1, 2, 4, 8]
    counts = store.read(exp.need("counts_noisy.bin"))
    flat = store.read(exp.need("flat.bin"))
    truth = store.read(exp.need("sino_truth.bin"))
    angles = np.asarray(counts.meta["angles_deg"])
    pixel = counts.meta["pixel_size_mm"]
    n = require(exp.cfg, "phantom.shape")[1]
    floor = require(exp.cfg, "acquisition.count_floor")
    k = counts.data.shape[3] // 2
    n_ch = counts.data.shape[1]

    scores = []
    for f in factors:
        if f > n_ch:
            raise ConfigurationError(f"binning factor {f} exceeds {n_ch} channels")
        scheme = uniform_scheme(n_ch, f)
        rb_counts = rebin_channels(np.moveaxis(counts.data[..., k], 1, 0), scheme)
        rb_flat = rebin_channels(flat.data, scheme).data
        j = rb_counts.data.shape[0] // 2  # middle surviving channel
        atten = -np.log(np.maximum(rb_counts.data[j], floor) / max(rb_flat[j], floor))
        # matching noise-free projection: same transform on expected counts
        a, b = rb_counts.spans[j]
        expected = flat.data[a:b, None, None] * np.exp(-np.moveaxis(truth.data[..., k], 1, 0)[a:b])
        ref_atten = -np.log(expected.sum(axis=0) / flat.data[a:b].sum())
        img = projector.fbp(atten, angles, "ramp", n, pixel)
        ref = projector.fbp(ref_atten, angles, "ramp", n, pixel)
        rng = float(np.ptp(ref))
        scores.append(metrics.ssim(img, ref, data_range=rng if rng else 1.0))

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(factors, scores, "o-")
    ax.set_xscale("log", base=2)
    ax.set_xticks(factors, [str(f) for f in factors])
    ax.set_xlabel("binning factor")
    ax.set_ylabel("SSIM vs noise-free slice")
    ax.set_title("energy binning vs single-channel fidelity")
    ax.grid(alpha=0.3)
    return _save(fig, os.path.join(exp.out_dir, "plots", "binning.png")), dict(
        zip((str(f) for f in factors), (float(s) for s in scores))
    )


def _plot_frames(exp):
    noisy = store.read(exp.need("series_noisy.bin"))
    den = store.read(exp.need("series_denoised.bin"))
    clean = store.read(exp.need("series_clean.bin"))
    t = noisy.meta["static_start"]
    fig, axes = plt.subplots(1, 3, figsize=(10.5, 3.6))
    vmin, vmax = np.percentile(clean.data[t], [1, 99])
    for ax, img, title in zip(
        axes, [noisy.data[t], den.data[t], clean.data[t]], ["noisy", "denoised", "noise-free"]
    ):
        ax.imshow(img, cmap="gray", vmin=vmin, vmax=vmax)
        ax.set_title(title)
        ax.axis("off")
    fig.suptitle(f"frame {t} (first static frame)")
    return _save(fig, os.path.join(exp.out_dir, "plots", "frames.png"))


def _plot_psnr_table(exp, results):
    rows = [
        ("pre-retrieval", results["psnr_pre_retrieval_noisy"], results["psnr_pre_retrieval_denoised"]),
        ("post-retrieval", results["psnr_post_retrieval_noisy"], results["psnr_post_retrieval_denoised"]),
    ]
    fig, ax = plt.subplots(figsize=(5.5, 2.2))
    ax.axis("off")
    table = ax.table(
        cellText=[[r[0], f"{r[1]:.2f}", f"{r[2]:.2f}", f"{r[2] - r[1]:+.2f}"] for r in rows],
        colLabels=["stage", "noisy (dB)", "denoised (dB)", "gain"],
        loc="center",
    )
    table.scale(1.0, 1.5)
    ax.set_title("PSNR around phase retrieval")
    return _save(fig, os.path.join(exp.out_dir, "plots", "psnr.png"))


def _plot_flicker(exp, results):
    bars = {
        "noisy": results["flicker_noisy"],
        "denoised": results["flicker_denoised"],
        "median ensemble": results["flicker_median_ensemble"],
    }
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    ax.bar(list(bars), list(bars.values()), color=["#888", "#4878b0", "#2a9d64"])
    ax.set_ylabel("flicker score")
    ax.set_title("frame-to-frame flicker, static segment")
    return _save(fig, os.path.join(exp.out_dir, "plots", "flicker.png"))


def stage_report(exp: pipeline.Experiment) -> dict:
    t0 = time.monotonic()
    results_path = exp.need(pipeline.RESULTS)
    results = pipeline.read_results(results_path)
    outputs = []
    extra = {}
    if exp.cfg["mode"] == "spectral":
        outputs.append(_plot_slices(exp))
        outputs.append(_plot_spectra(exp))
        outputs.append(_plot_confusion(exp, results))
        outputs.append(_plot_auprc(exp, results))
        path, curve = _plot_binning_curve(exp)
        outputs.append(path)
        extra["binning_ssim"] = curve
    else:
        outputs.append(_plot_frames(exp))
        outputs.append(_plot_psnr_table(exp, results))
        outputs.append(_plot_flicker(exp, results))
    extra["wall_time_s"] = time.monotonic() - t0
    seed = (
        require(exp.cfg, "acquisition.noise_seed")
        if exp.cfg["mode"] == "spectral"
        else require(exp.cfg, "temporal.noise_seed")
    )
    exp.record("report", seed, [results_path], outputs, extra)
    return extra
