"""End-to-end pipeline stages on scaled-down runs: artifacts, manifest, results."""

import json

import numpy as np
import pytest

from conftest import run_spectral_chain, tiny_spectral_config, tiny_temporal_config
from mcdenoise import pipeline, spectra, store
from mcdenoise.errors import ConfigurationError, MissingDependencyError


# -- spectral chain artifacts -------------------------------------------------------


def test_simulate_containers(spectral_run):
    exp = spectral_run
    labels = store.read(exp.path("labels.bin"))
    assert labels.data.shape == (32, 32, 32)
    assert labels.data.dtype == np.uint16
    assert list(labels.axis_names) == ["z", "y", "x"]
    assert set(np.unique(labels.data)) <= {0, 1, 2, 3, 4, 5}

    counts = store.read(exp.path("counts_noisy.bin"))
    n_det = int(np.ceil(32 * np.sqrt(2)))
    assert counts.data.shape == (24, 10, n_det, 8)
    assert counts.data.dtype == np.uint32
    assert list(counts.axis_names) == ["angle", "channel", "u", "v"]
    assert counts.meta["channel_offset"] == 0
    assert counts.meta["slice_start"] == 12 and counts.meta["slice_stop"] == 20
    assert len(counts.meta["angles_deg"]) == 24
    grid = spectra.EnergyGrid(**counts.meta["grid"])
    assert grid.n_bins == 10 and grid.start_keV == 40.0

    flat = store.read(exp.path("flat.bin"))
    assert flat.data.shape == (10,)
    assert (flat.data > 0).all()

    truth = store.read(exp.path("sino_truth.bin"))
    assert truth.data.shape == counts.data.shape
    assert truth.data.dtype == np.float32


def test_denoise_and_reconstruct_containers(spectral_run):
    exp = spectral_run
    sino_d = store.read(exp.path("sino_denoised.bin"))
    assert sino_d.data.shape == (24, 8, 46, 8)  # two edge channels consumed
    assert sino_d.meta["channel_offset"] == 1
    assert sino_d.units == "attenuation"

    noisy = store.read(exp.path("recon_noisy.bin"))
    den = store.read(exp.path("recon_denoised.bin"))
    for vol in (noisy, den):
        assert vol.data.shape == (8, 4, 32, 32)  # recon slices [14, 18)
        assert vol.meta["channel_offset"] == 1
        assert vol.meta["slice_start"] == 14 and vol.meta["slice_stop"] == 18
        assert list(vol.axis_names) == ["channel", "z", "y", "x"]


def test_decompose_containers_stay_on_simplex(spectral_run):
    exp = spectral_run
    for tag in ("noisy", "denoised"):
        fr = store.read(exp.path(f"fractions_{tag}.bin"))
        assert fr.data.shape == (6, 4, 32, 32)
        assert fr.meta["material_ids"] == [0, 1, 2, 3, 4, 5]
        assert fr.meta["material_names"][0] == "background"
        assert float(fr.data.min()) >= -1e-6
        np.testing.assert_allclose(fr.data.sum(axis=0), 1.0, atol=1e-5)

        pred = store.read(exp.path(f"labels_pred_{tag}.bin"))
        assert pred.data.shape == (4, 32, 32)
        assert pred.data.dtype == np.uint16
        assert set(np.unique(pred.data)) <= {0, 1, 2, 3, 4, 5}


def test_manifest_records_all_stages_and_hashes(spectral_run):
    exp = spectral_run
    with open(exp.path(pipeline.MANIFEST), encoding="utf-8") as fh:
        manifest = json.load(fh)
    for stage in ("simulate", "train", "denoise", "reconstruct", "decompose", "evaluate"):
        entry = manifest[stage]
        assert entry["config_hash"] == exp.hash
        assert entry["wall_time_s"] >= 0
        for name, digest in entry["outputs"].items():
            assert pipeline.file_sha256(exp.path(name)) == digest
    assert manifest["train"]["val_loss"]
    assert manifest["train"]["identity_val_loss"] > 0
    assert manifest["train"]["nondeterministic_backend"] is False
    assert manifest["decompose"]["unconverged"].keys() == {"noisy", "denoised"}
    # denoise consumed the checkpoint written by train
    assert "checkpoint.pt" in manifest["denoise"]["inputs"]
    assert (
        manifest["denoise"]["inputs"]["checkpoint.pt"]
        == manifest["train"]["outputs"]["checkpoint.pt"]
    )


def test_sidecar_provenance(spectral_run):
    exp = spectral_run
    with open(exp.path("counts_noisy.bin.json"), encoding="utf-8") as fh:
        sidecar = json.load(fh)
    assert sidecar["provenance"]["config_hash"] == exp.hash
    assert sidecar["provenance"]["seed"] == 77
    with open(exp.path("config.json"), encoding="utf-8") as fh:
        assert json.load(fh) == exp.cfg


def test_results_file_keys_and_reparse(spectral_run):
    exp = spectral_run
    res = pipeline.read_results(exp.path(pipeline.RESULTS))
    for key in (
        "auprc_noisy_mean",
        "auprc_denoised_mean",
        "auprc_gain_mean",
        "auprc_noisy_air",
        "error_fraction_noisy",
        "error_fraction_denoised",
        "unconverged_noisy",
        "unconverged_denoised",
    ):
        assert key in res, key
    assert res["auprc_gain_mean"] == pytest.approx(
        res["auprc_denoised_mean"] - res["auprc_noisy_mean"], abs=1e-15
    )
    assert 0.0 <= res["error_fraction_noisy"] <= 1.0
    # confusion rows are rates
    for tag in ("noisy", "denoised"):
        for a in range(6):
            row = sum(res[f"confusion_{tag}_{a}_{b}"] for b in range(6))
            assert row == pytest.approx(1.0, abs=1e-6) or row == 0.0


def test_evaluate_rerun_is_byte_identical(spectral_run):
    exp = spectral_run
    path = exp.path(pipeline.RESULTS)
    with open(path, "rb") as fh:
        before = fh.read()
    pipeline.stage_evaluate(exp)
    with open(path, "rb") as fh:
        after = fh.read()
    assert before == after


def test_simulate_reruns_byte_identical(tmp_path):
    cfg = tiny_spectral_config()
    a = pipeline.Experiment(str(tmp_path / "a"), cfg)
    b = pipeline.Experiment(str(tmp_path / "b"), cfg)
    pipeline.stage_simulate(a)
    pipeline.stage_simulate(b)
    for name in ("labels.bin", "counts_noisy.bin", "flat.bin", "sino_truth.bin"):
        with open(a.path(name), "rb") as fh:
            bytes_a = fh.read()
        with open(b.path(name), "rb") as fh:
            bytes_b = fh.read()
        assert bytes_a == bytes_b, name


def test_noise_seed_changes_counts_only(tmp_path, spectral_run):
    cfg = tiny_spectral_config(("acquisition.noise_seed=78",))
    exp = pipeline.Experiment(str(tmp_path / "seed78"), cfg)
    pipeline.stage_simulate(exp)
    base = spectral_run
    with open(base.path("counts_noisy.bin"), "rb") as fh:
        counts_77 = fh.read()
    with open(exp.path("counts_noisy.bin"), "rb") as fh:
        counts_78 = fh.read()
    assert counts_77 != counts_78
    np.testing.assert_array_equal(
        store.read(exp.path("labels.bin")).data, store.read(base.path("labels.bin")).data
    )
    np.testing.assert_array_equal(
        store.read(exp.path("sino_truth.bin")).data,
        store.read(base.path("sino_truth.bin")).data,
    )


# -- alternate routes ---------------------------------------------------------------


def test_rebinned_chain(tmp_path):
    # wider window so the rebinned-then-denoised volume keeps >= 7 channels
    # (the spectral-fidelity check needs full SSIM windows over the spectrum);
    # the second interval ends in a partial group to exercise keep_partial
    cfg = tiny_spectral_config(
        (
            "materials.window_n_bins=23",
            "rebin.interval_sizes=[16,7]",
            "rebin.factors=[2,4]",
            "rebin.tail_policy=keep_partial",
        )
    )
    exp = run_spectral_chain(tmp_path / "rebin", cfg, rebin=True)

    counts_rb = store.read(exp.path("counts_rebinned.bin"))
    assert counts_rb.data.shape == (24, 10, 46, 8)
    expected_spans = [[2 * k, 2 * k + 2] for k in range(8)] + [[16, 20], [20, 23]]
    assert counts_rb.meta["spans"] == expected_spans
    assert counts_rb.meta["dropped"] == []
    # group centers average the window grid points 40..62
    np.testing.assert_allclose(
        counts_rb.meta["energy_centers_keV"],
        [40.5, 42.5, 44.5, 46.5, 48.5, 50.5, 52.5, 54.5, 57.5, 61.0],
    )
    # every input channel lands in some group: photons are conserved exactly
    counts = store.read(exp.path("counts_noisy.bin"))
    assert counts_rb.data.sum(dtype=np.uint64) == counts.data.sum(dtype=np.uint64)

    flat_rb = store.read(exp.path("flat_rebinned.bin"))
    assert flat_rb.data.shape == (10,)

    sino_d = store.read(exp.path("sino_denoised.bin"))
    assert sino_d.data.shape == (24, 8, 46, 8)
    assert sino_d.meta["channel_offset"] == 1
    assert "spans" in sino_d.meta and "grid" not in sino_d.meta

    for tag in ("noisy", "denoised"):
        fr = store.read(exp.path(f"fractions_{tag}.bin"))
        assert fr.data.shape[0] == 6
        np.testing.assert_allclose(fr.data.sum(axis=0), 1.0, atol=1e-5)
    res = pipeline.read_results(exp.path(pipeline.RESULTS))
    assert "auprc_gain_mean" in res


def test_slices_domain_chain(tmp_path):
    cfg = tiny_spectral_config(("domain=slices",))
    exp = run_spectral_chain(tmp_path / "slices", cfg)
    noisy = store.read(exp.path("recon_noisy.bin"))
    assert noisy.data.shape == (10, 4, 32, 32)  # full channel set, offset 0
    assert noisy.meta["channel_offset"] == 0
    den = store.read(exp.path("recon_denoised.bin"))
    assert den.data.shape == (8, 4, 32, 32)
    assert den.meta["channel_offset"] == 1
    assert not (tmp_path / "slices" / "sino_denoised.bin").exists()
    res = pipeline.read_results(exp.path(pipeline.RESULTS))
    assert "auprc_gain_mean" in res


# -- channel metadata resolution ------------------------------------------------------


def test_channel_view_integer_grid(tmp_path):
    exp = pipeline.Experiment(str(tmp_path / "view"), tiny_spectral_config())
    window = exp.window_grid()
    mats = exp.materials_on(window)
    meta = {"grid": window.to_meta(), "channel_offset": 2}
    centers, mu, kedges, grid = pipeline.channel_view(exp, meta, 5)
    np.testing.assert_allclose(centers, window.centers[2:7])
    assert grid.n_bins == 5 and grid.start_keV == 42.0
    for mid in mats:
        np.testing.assert_allclose(mu[mid], mats[mid].mu[2:7])
    # eu_analog's 48.5 keV edge falls outside (42, 47]
    assert kedges[1] is None


def test_channel_view_spans(tmp_path):
    exp = pipeline.Experiment(str(tmp_path / "spans"), tiny_spectral_config())
    window = exp.window_grid()
    mats = exp.materials_on(window)
    meta = {
        "spans": [[0, 2], [2, 4], [4, 6], [6, 10]],
        "energy_centers_keV": [41.0, 43.0, 45.0, 48.0],
        "channel_offset": 1,
    }
    centers, mu, kedges, grid = pipeline.channel_view(exp, meta, 3)
    np.testing.assert_allclose(centers, [43.0, 45.0, 48.0])
    for mid in mats:
        expected = [mats[mid].mu[2:4].mean(), mats[mid].mu[4:6].mean(), mats[mid].mu[6:10].mean()]
        np.testing.assert_allclose(mu[mid], expected)
    assert grid.n_bins == 3
    # eu_analog's 48.5 keV edge exceeds the last group center 48.0
    assert kedges[1] is None


# -- guards and failure modes ---------------------------------------------------------


def test_missing_artifact_names_producing_stage(tmp_path):
    exp = pipeline.Experiment(str(tmp_path / "empty"), tiny_spectral_config())
    with pytest.raises(MissingDependencyError, match="run `simulate` first"):
        pipeline.stage_train(exp)
    with pytest.raises(MissingDependencyError, match="run `train` first"):
        exp.need("checkpoint.pt")
    with pytest.raises(MissingDependencyError, match="run `decompose` first"):
        exp.need("fractions_noisy.bin")


def test_spectral_only_stages_reject_temporal(tmp_path):
    exp = pipeline.Experiment(str(tmp_path / "t"), tiny_temporal_config())
    for stage in (pipeline.stage_rebin, pipeline.stage_reconstruct, pipeline.stage_decompose):
        with pytest.raises(ConfigurationError, match="mode=spectral only"):
            stage(exp)


def test_rebin_stage_requires_factors(tmp_path):
    exp = pipeline.Experiment(str(tmp_path / "nofactors"), tiny_spectral_config())
    with pytest.raises(ConfigurationError, match="rebin.factors"):
        pipeline.stage_rebin(exp)


def test_reconstruct_range_must_be_simulated(spectral_run):
    cfg = tiny_spectral_config(("reconstruct.slice_start=0", "reconstruct.slice_stop=18"))
    exp = pipeline.Experiment(spectral_run.out_dir, cfg)
    with pytest.raises(ConfigurationError, match="outside simulated"):
        pipeline.stage_reconstruct(exp)


def test_simulate_rejects_bad_slice_range(tmp_path):
    cfg = tiny_spectral_config(("acquisition.slice_start=30", "acquisition.slice_stop=20"))
    exp = pipeline.Experiment(str(tmp_path / "badrange"), cfg)
    with pytest.raises(ConfigurationError, match="outside volume"):
        pipeline.stage_simulate(exp)


def test_simulate_rejects_undefined_materials(tmp_path):
    synth = json.dumps(
        [{"material_id": 1, "name": "only", "a": 0.05, "p": 3.0, "kedge_keV": 48.5, "jump": 5.0}]
    )
    cfg = tiny_spectral_config((f"materials.synth={synth}",))
    exp = pipeline.Experiment(str(tmp_path / "missingmat"), cfg)
    with pytest.raises(ConfigurationError, match="lack material definitions"):
        pipeline.stage_simulate(exp)


# -- temporal chain -------------------------------------------------------------------


def test_temporal_series_containers(temporal_run):
    exp = temporal_run
    clean = store.read(exp.path("series_clean.bin"))
    noisy = store.read(exp.path("series_noisy.bin"))
    den = store.read(exp.path("series_denoised.bin"))
    for cont in (clean, noisy, den):
        assert cont.data.shape == (14, 32, 32)
        assert list(cont.axis_names) == ["t", "y", "x"]
    assert noisy.meta["static_start"] == 8
    assert noisy.meta["exposure_photons"] == 60.0
    # Poisson counts scaled back to intensity: non-negative multiples of 1/60
    assert float(noisy.data.min()) >= 0.0
    scaled = noisy.data.astype(np.float64) * 60.0
    np.testing.assert_allclose(scaled, np.round(scaled), atol=1e-3)
    # the static tail really is static in the clean series
    np.testing.assert_array_equal(clean.data[8], clean.data[13])
    assert not np.array_equal(clean.data[0], clean.data[7])


def test_temporal_results_keys(temporal_run):
    res = pipeline.read_results(temporal_run.path(pipeline.RESULTS))
    for key in (
        "psnr_pre_retrieval_noisy",
        "psnr_pre_retrieval_denoised",
        "psnr_post_retrieval_noisy",
        "psnr_post_retrieval_denoised",
        "psnr_pre_retrieval_gain",
        "psnr_post_retrieval_gain",
        "flicker_noisy",
        "flicker_denoised",
        "flicker_median_ensemble",
    ):
        assert key in res, key
    assert res["psnr_pre_retrieval_gain"] == pytest.approx(
        res["psnr_pre_retrieval_denoised"] - res["psnr_pre_retrieval_noisy"], abs=1e-12
    )
    assert res["flicker_noisy"] > 0


def test_temporal_manifest(temporal_run):
    with open(temporal_run.path(pipeline.MANIFEST), encoding="utf-8") as fh:
        manifest = json.load(fh)
    assert set(manifest) == {"simulate", "train", "denoise", "evaluate"}
    assert manifest["simulate"]["static_start"] == 8
    assert manifest["denoise"]["frames"] == 14


def test_temporal_static_frames_validation(tmp_path):
    cfg = tiny_temporal_config(("temporal.static_frames=14",))
    exp = pipeline.Experiment(str(tmp_path / "badstatic"), cfg)
    with pytest.raises(ConfigurationError, match="static_frames"):
        pipeline.stage_simulate(exp)
