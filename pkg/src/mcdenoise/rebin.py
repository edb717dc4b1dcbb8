"""Interval-wise spectral rebinning.

Groups of adjacent channels are summed to trade spectral resolution for
per-channel counts. The spectrum is divided into intervals, each with its
own grouping factor; trailing channels that do not fill a group are either
dropped (reported) or kept as a partial sum.
"""

import dataclasses
import logging

import numpy as np

from .errors import ConfigurationError

log = logging.getLogger(__name__)

TAIL_POLICIES = ("drop", "keep_partial")


@dataclasses.dataclass(frozen=True)
class IntervalScheme:
    interval_sizes: tuple
    factors: tuple
    tail_policy: str = "drop"

    def __post_init__(self):
        object.__setattr__(self, "interval_sizes", tuple(int(s) for s in self.interval_sizes))
        object.__setattr__(self, "factors", tuple(int(f) for f in self.factors))
        if len(self.interval_sizes) != len(self.factors):
            raise ConfigurationError(
                f"{len(self.interval_sizes)} intervals vs {len(self.factors)} factors"
            )
        if not self.interval_sizes:
            raise ConfigurationError("scheme needs at least one interval")
        if any(s < 1 for s in self.interval_sizes):
            raise ConfigurationError(f"interval sizes must be >= 1: {self.interval_sizes}")
        if any(f < 1 for f in self.factors):
            raise ConfigurationError(f"factors must be >= 1: {self.factors}")
        if self.tail_policy not in TAIL_POLICIES:
            raise ConfigurationError(f"tail_policy must be one of {TAIL_POLICIES}")

    @property
    def n_input_channels(self):
        return sum(self.interval_sizes)

    def groups(self):
        """Output channel -> (start, stop) input ranges, plus dropped ranges."""
        spans, dropped = [], []
        c0 = 0
        for size, factor in zip(self.interval_sizes, self.factors):
            n_full = size // factor
            for g in range(n_full):
                spans.append((c0 + g * factor, c0 + (g + 1) * factor))
            rem = size - n_full * factor
            if rem:
                if self.tail_policy == "keep_partial":
                    spans.append((c0 + n_full * factor, c0 + size))
                else:
                    dropped.append((c0 + n_full * factor, c0 + size))
            c0 += size
        return spans, dropped


@dataclasses.dataclass
class RebinResult:
    data: np.ndarray
    spans: list  # (start, stop) input-channel range per output channel
    dropped: list  # (start, stop) ranges discarded by tail_policy=drop


def rebin(stack, scheme: IntervalScheme) -> RebinResult:
    """Sum channel groups of a channel-major array per the scheme."""
    arr = np.asarray(stack)
    if arr.ndim < 1:
        raise ConfigurationError("stack must have a leading channel axis")
    if arr.shape[0] != scheme.n_input_channels:
        raise ConfigurationError(
            f"scheme covers {scheme.n_input_channels} channels, stack has {arr.shape[0]}"
        )
    spans, dropped = scheme.groups()
    out = np.stack([arr[a:b].sum(axis=0) for a, b in spans])
    if dropped:
        lost = sum(b - a for a, b in dropped)
        log.info("rebin dropped %d trailing channel(s): %s", lost, dropped)
    return RebinResult(data=out, spans=spans, dropped=dropped)


def uniform_scheme(n_channels: int, factor: int, tail_policy="drop") -> IntervalScheme:
    """Single-interval scheme summing every `factor` channels."""
    return IntervalScheme(
        interval_sizes=(n_channels,), factors=(factor,), tail_policy=tail_policy
    )
