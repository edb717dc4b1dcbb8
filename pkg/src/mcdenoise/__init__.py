"""Multi-channel radiographic simulation and self-supervised denoising benchmark."""

from .config import apply_overrides, config_hash, default_config, load_config
from .decompose import FractionMap, MaterialLibrary, build_library, classify, decompose
from .denoiser import (
    DenoiseNet,
    ModelConfig,
    TrainConfig,
    TrainedDenoiser,
    load_checkpoint,
    median_ensemble,
    predict,
    predict_batch,
    save_checkpoint,
    shift_compensate,
    train,
)
from .errors import (
    ConfigurationError,
    DataError,
    InvariantViolation,
    McdenoiseError,
    MissingDependencyError,
    ParseError,
    TrainingError,
)
from .metrics import ConfusionMatrix, auprc, auprc_binary, confusion, psnr, spectral_ssim, ssim
from .pairs import (
    AugmentConfig,
    PairSample,
    SplitSpec,
    augment,
    spectral_infer_pairs,
    spectral_train_pairs,
    split,
    temporal_pairs,
)
from .phantom import (
    EllipseSpec,
    LabelVolume,
    MotionSeriesSpec,
    PointCloudSpec,
    generate_motion_series,
    generate_point_cloud,
    rasterize,
)
from .phase import PhaseConfig, flicker_score, paganin_filter, retrieve_series
from .projector import (
    SpectralSinogram,
    SpectralVolume,
    backproject,
    fbp,
    forward_spectral,
    neg_log_normalize,
    poissonize,
    radon,
    reconstruct,
    white_beam,
)
from .rebin import IntervalScheme, RebinResult, rebin, uniform_scheme
from .spectra import (
    EnergyGrid,
    MaterialSpectrum,
    SourceSpectrum,
    load_mac_table,
    synth_kedge_material,
    synth_source,
    write_mac_table,
)
from .store import ArrayContainer, read, write

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
