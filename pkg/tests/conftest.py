"""Shared fixtures: scaled-down end-to-end runs reused across test modules.

The tiny configs shrink the volume, angle count and training budget until a
full chain takes seconds; they exercise every stage but prove nothing about
quality (test_acceptance runs the real protocol).
"""

import pytest

from mcdenoise import config as cfgmod
from mcdenoise import pipeline

TINY_SPECTRAL = (
    "phantom.shape=[32,32,32]",
    "acquisition.n_angles=24",
    "acquisition.slice_start=12",
    "acquisition.slice_stop=20",
    "reconstruct.slice_start=14",
    "reconstruct.slice_stop=18",
    "materials.window_n_bins=10",
    "train.epochs=1",
    "train.samples_per_epoch=16",
    "train.augment=null",  # 46x8 projection images are below the default crop
)

TINY_TEMPORAL = (
    "temporal.n_frames=14",
    "temporal.static_frames=6",
    "temporal.frame_shape=[32,32]",
    "temporal.object.radii_px=[8,5]",
    "temporal.median_draws=3",
    "train.epochs=2",
    "train.augment.crop=16",
)


def tiny_spectral_config(extra=()):
    cfg = cfgmod.default_config("spectral")
    return cfgmod.apply_overrides(cfg, TINY_SPECTRAL + tuple(extra))


def tiny_temporal_config(extra=()):
    cfg = cfgmod.default_config("temporal")
    return cfgmod.apply_overrides(cfg, TINY_TEMPORAL + tuple(extra))


def run_spectral_chain(out_dir, cfg, rebin=False):
    exp = pipeline.Experiment(str(out_dir), cfg)
    pipeline.stage_simulate(exp)
    if rebin:
        pipeline.stage_rebin(exp)
    if cfg.get("domain") == "slices":
        pipeline.stage_reconstruct(exp)
        pipeline.stage_train(exp)
        pipeline.stage_denoise(exp)
    else:
        pipeline.stage_train(exp)
        pipeline.stage_denoise(exp)
        pipeline.stage_reconstruct(exp)
    pipeline.stage_decompose(exp)
    pipeline.stage_evaluate(exp)
    return exp


def run_temporal_chain(out_dir, cfg):
    exp = pipeline.Experiment(str(out_dir), cfg)
    pipeline.stage_simulate(exp)
    pipeline.stage_train(exp)
    pipeline.stage_denoise(exp)
    pipeline.stage_evaluate(exp)
    return exp


@pytest.fixture(scope="session")
def spectral_run(tmp_path_factory):
    """Full tiny spectral chain (projections domain), simulate..evaluate."""
    out = tmp_path_factory.mktemp("spectral_run")
    return run_spectral_chain(out, tiny_spectral_config())


@pytest.fixture(scope="session")
def temporal_run(tmp_path_factory):
    """Full tiny temporal chain, simulate..evaluate."""
    out = tmp_path_factory.mktemp("temporal_run")
    return run_temporal_chain(out, tiny_temporal_config())
