"""Trainable fully-convolutional denoiser plus classical baselines.

The model is a small encoder-decoder with skip connections trained with an
L1 objective on noisy-to-noisy pairs (Adam, fixed learning rate, no
scheduling). Helpers cover half-channel shift compensation of gapless
spectral inference, a median ensemble against temporal flicker, checkpoint
I/O, and gaussian/median/NLM/TV reference filters.
"""

import dataclasses
import time

import numpy as np
import torch
import torch.nn as nn
from scipy import ndimage
from skimage import restoration

from .errors import ConfigurationError, TrainingError
from .pairs import AugmentConfig, PairSample, augment

CHECKPOINT_VERSION = 1


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    in_channels: int
    base_width: int = 16
    depth: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.in_channels not in (1, 2):
            raise ConfigurationError(f"in_channels must be 1 or 2, got {self.in_channels}")
        if self.base_width < 2:
            raise ConfigurationError(f"base_width must be >= 2, got {self.base_width}")
        if not 1 <= self.depth <= 4:
            raise ConfigurationError(f"depth must be in [1, 4], got {self.depth}")


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 8
    learning_rate: float = 3e-4
    seed: int = 0
    loss: str = "L1"
    augment_config: AugmentConfig | None = None
    samples_per_epoch: int | None = None  # subsample big epochs, deterministic

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if self.loss.upper() != "L1":
            raise ConfigurationError(f"only the L1 loss is supported, got {self.loss!r}")


@dataclasses.dataclass
class TrainReport:
    train_loss: list
    val_loss: list
    wall_time_s: float
    identity_val_loss: float | None = None
    backend: dict = dataclasses.field(default_factory=dict)


class _Block(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, padding=1, padding_mode="reflect"),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_out, c_out, 3, padding=1, padding_mode="reflect"),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(x)


class DenoiseNet(nn.Module):
    """Encoder-decoder with skip connections; output shape = input shape."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        torch.manual_seed(config.seed)
        w = config.base_width
        self.depth = config.depth
        widths = [w * 2**k for k in range(config.depth + 1)]
        self.encoders = nn.ModuleList()
        c_prev = config.in_channels
        for c in widths:
            self.encoders.append(_Block(c_prev, c))
            c_prev = c
        self.pool = nn.MaxPool2d(2)
        self.up = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        self.decoders = nn.ModuleList()
        for k in range(config.depth - 1, -1, -1):
            self.decoders.append(_Block(widths[k + 1] + widths[k], widths[k]))
        self.head = nn.Conv2d(w, 1, 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        mult = 2**self.depth
        ph = (-h) % mult
        pw = (-w) % mult
        if ph or pw:
            x = nn.functional.pad(x, (0, pw, 0, ph), mode="reflect")
        skips = []
        for k, enc in enumerate(self.encoders):
            x = enc(x)
            if k < len(self.encoders) - 1:
                skips.append(x)
                x = self.pool(x)
        for dec, skip in zip(self.decoders, reversed(skips)):
            x = self.up(x)
            x = dec(torch.cat([x, skip], dim=1))
        x = self.head(x)
        return x[..., :h, :w]


@dataclasses.dataclass
class TrainedDenoiser:
    net: DenoiseNet
    config: ModelConfig
    norm_mean: float
    norm_std: float


def _as_batch(samples, trained_or_cfg_in_channels):
    arrays = []
    for s in samples:
        if len(s.inputs) != trained_or_cfg_in_channels:
            raise ConfigurationError(
                f"sample has {len(s.inputs)} input channels, "
                f"model expects {trained_or_cfg_in_channels}"
            )
        arrays.append(np.stack(s.inputs))
    x = torch.from_numpy(np.stack(arrays).astype(np.float32))
    y = torch.from_numpy(
        np.stack([s.target for s in samples])[:, None].astype(np.float32)
    )
    return x, y


def identity_val_loss(val_pairs) -> float:
    """Mean L1 of the copy-first-input predictor, the floor to beat."""
    losses = [np.abs(s.inputs[0] - s.target).mean() for s in val_pairs]
    if not losses:
        raise ConfigurationError("no validation pairs")
    return float(np.mean(losses))


def train(model_config: ModelConfig, train_pairs, val_pairs, train_config: TrainConfig):
    """L1-train the denoiser; returns (TrainedDenoiser, TrainReport).

    Inputs and targets are normalized by the training split's mean/std
    (inverted inside predict). Epoch order, subsampling and augmentation
    draws are all derived from train_config.seed, so the loss trajectory is
    reproducible up to backend numerics.
    """
    train_list = list(train_pairs)
    val_list = list(val_pairs)
    if not train_list or not val_list:
        raise ConfigurationError("train and validation pair sets must be non-empty")
    for s in train_list[:1] + val_list[:1]:
        if len(s.inputs) != model_config.in_channels:
            raise ConfigurationError(
                f"pair arity {len(s.inputs)} != model in_channels {model_config.in_channels}"
            )

    stats_src = np.concatenate(
        [np.stack(s.inputs).ravel() for s in train_list]
        + [np.asarray(s.target).ravel() for s in train_list]
    )
    mean = float(stats_src.mean())
    std = float(stats_src.std())
    if std == 0:
        std = 1.0

    torch.set_num_threads(1)
    torch.manual_seed(train_config.seed)
    net = DenoiseNet(model_config)
    trained = TrainedDenoiser(net=net, config=model_config, norm_mean=mean, norm_std=std)
    report = TrainReport(
        train_loss=[],
        val_loss=[],
        wall_time_s=0.0,
        identity_val_loss=identity_val_loss(val_list),
        backend={
            "torch_version": torch.__version__,
            "threads": torch.get_num_threads(),
            "device": "cpu",
        },
    )
    if train_config.epochs == 0:
        net.eval()
        return trained, report

    optimizer = torch.optim.Adam(net.parameters(), lr=train_config.learning_rate)
    loss_fn = nn.L1Loss()
    t0 = time.monotonic()
    for epoch in range(train_config.epochs):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=train_config.seed, spawn_key=(epoch,))
        )
        order = rng.permutation(len(train_list))
        if train_config.samples_per_epoch is not None:
            order = order[: train_config.samples_per_epoch]
        net.train()
        total, count = 0.0, 0
        for start in range(0, len(order), train_config.batch_size):
            chunk = order[start : start + train_config.batch_size]
            samples = [train_list[k] for k in chunk]
            if train_config.augment_config is not None:
                samples = [
                    augment(
                        s,
                        train_config.augment_config,
                        seed=int(rng.integers(0, 2**63 - 1)),
                    )
                    for s in samples
                ]
            for s in samples:
                if s.mode == "spectral-train" and s.target_index in s.input_indices:
                    raise TrainingError(
                        f"target channel {s.target_index} leaked into inputs"
                    )
            x, y = _as_batch(samples, model_config.in_channels)
            x = (x - mean) / std
            y = (y - mean) / std
            optimizer.zero_grad()
            loss = loss_fn(net(x), y)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {start // train_config.batch_size}"
                )
            loss.backward()
            optimizer.step()
            total += float(loss.item()) * len(samples)
            count += len(samples)
        report.train_loss.append(total / count * std)  # back to data units
        report.val_loss.append(validation_loss(trained, val_list))
    report.wall_time_s = time.monotonic() - t0
    net.eval()
    return trained, report


def validation_loss(trained: TrainedDenoiser, val_pairs) -> float:
    """Mean L1 between predictions and targets, in data units."""
    losses = []
    with torch.no_grad():
        trained.net.eval()
        for s in val_pairs:
            pred = predict(trained, s.inputs)
            losses.append(float(np.abs(pred - np.asarray(s.target)).mean()))
    return float(np.mean(losses))


def predict(trained: TrainedDenoiser, inputs) -> np.ndarray:
    """Denoise one sample (list of 2D input arrays) into one 2D array."""
    if len(inputs) != trained.config.in_channels:
        raise ConfigurationError(
            f"{len(inputs)} inputs vs model in_channels {trained.config.in_channels}"
        )
    shapes = {np.asarray(a).shape for a in inputs}
    if len(shapes) != 1 or any(len(s) != 2 for s in shapes):
        raise ConfigurationError(f"inputs must share one 2D shape, got {shapes}")
    x = torch.from_numpy(np.stack(inputs)[None].astype(np.float32))
    x = (x - trained.norm_mean) / trained.norm_std
    with torch.no_grad():
        trained.net.eval()
        out = trained.net(x)
    return out[0, 0].numpy().astype(np.float64) * trained.norm_std + trained.norm_mean


def predict_batch(trained: TrainedDenoiser, samples) -> list:
    """predict() over a list of input-lists in one forward pass."""
    if not samples:
        return []
    xs = [np.stack(s) for s in samples]
    x = torch.from_numpy(np.stack(xs).astype(np.float32))
    x = (x - trained.norm_mean) / trained.norm_std
    with torch.no_grad():
        trained.net.eval()
        out = trained.net(x)
    arr = out[:, 0].numpy().astype(np.float64) * trained.norm_std + trained.norm_mean
    return [arr[k] for k in range(arr.shape[0])]


def shift_compensate(half_grid_stack, channel_axis=0) -> np.ndarray:
    """Interpolate half-grid channels back onto integer channel centers.

    Channel j+0.5 and j+1.5 average to channel j+1, so J-1 half-grid
    channels become J-2 integer ones; exact for signals linear in channel.
    """
    arr = np.asarray(half_grid_stack, dtype=np.float64)
    arr = np.moveaxis(arr, channel_axis, 0)
    if arr.shape[0] < 2:
        raise ConfigurationError(
            f"shift compensation needs >= 2 half-grid channels, got {arr.shape[0]}"
        )
    out = 0.5 * (arr[:-1] + arr[1:])
    return np.moveaxis(out, 0, channel_axis)


def median_ensemble(trained: TrainedDenoiser, frame, n_draws, noise_sigma, seed) -> np.ndarray:
    """Median of denoised re-noised copies; damps frame-to-frame flicker."""
    if n_draws < 1 or n_draws % 2 == 0:
        raise ConfigurationError(f"n_draws must be odd and >= 1, got {n_draws}")
    if noise_sigma < 0:
        raise ConfigurationError(f"noise_sigma must be >= 0, got {noise_sigma}")
    base = np.asarray(frame, dtype=np.float64)
    rng = np.random.default_rng(seed)
    stack = [
        predict(trained, [base + rng.normal(0.0, noise_sigma, base.shape)])
        for _ in range(n_draws)
    ]
    return np.median(np.stack(stack), axis=0)


def save_checkpoint(trained: TrainedDenoiser, path):
    """Single-file checkpoint: config echo + normalization + weights."""
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "model_config": dataclasses.asdict(trained.config),
            "norm_mean": trained.norm_mean,
            "norm_std": trained.norm_std,
            "state_dict": trained.net.state_dict(),
        },
        path,
    )


def load_checkpoint(path) -> TrainedDenoiser:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigurationError(
            f"checkpoint version {blob.get('format_version')} != {CHECKPOINT_VERSION}"
        )
    config = ModelConfig(**blob["model_config"])
    net = DenoiseNet(config)
    net.load_state_dict(blob["state_dict"])
    net.eval()
    return TrainedDenoiser(
        net=net, config=config, norm_mean=blob["norm_mean"], norm_std=blob["norm_std"]
    )


def baseline(method: str, image, params: dict | None = None) -> np.ndarray:
    """Classical per-image references: gaussian | median | nlm | tv."""
    img = np.asarray(image, dtype=np.float64)
    params = dict(params or {})
    if method == "gaussian":
        sigma = params.pop("sigma", 1.0)
        if sigma < 0:
            raise ConfigurationError(f"gaussian sigma must be >= 0, got {sigma}")
        out = ndimage.gaussian_filter(img, sigma)
    elif method == "median":
        size = params.pop("size", 3)
        if size < 1 or size % 2 == 0:
            raise ConfigurationError(f"median size must be odd and >= 1, got {size}")
        out = ndimage.median_filter(img, size=size)
    elif method == "nlm":
        h = params.pop("h", 0.1)
        patch_size = params.pop("patch_size", 5)
        patch_distance = params.pop("patch_distance", 6)
        if h <= 0:
            raise ConfigurationError(f"nlm h must be > 0, got {h}")
        out = restoration.denoise_nl_means(
            img, h=h, patch_size=patch_size, patch_distance=patch_distance
        )
    elif method == "tv":
        weight = params.pop("weight", 0.1)
        if weight <= 0:
            raise ConfigurationError(f"tv weight must be > 0, got {weight}")
        out = restoration.denoise_tv_chambolle(
            img, weight=weight, eps=params.pop("eps", 2e-4), max_num_iter=params.pop("max_num_iter", 200)
        )
    else:
        raise ConfigurationError(f"unknown baseline {method!r}")
    if params:
        raise ConfigurationError(f"unused baseline params: {sorted(params)}")
    return out
