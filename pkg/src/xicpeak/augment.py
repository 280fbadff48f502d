"""Weak/strong augmentation policies and 1D CowMix mixing.

All operations touch trace channels only; metadata channels (the position
ramp in particular) pass through untouched.  Everything is a deterministic
function of (input, parameters, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import XIC


@dataclass(frozen=True)
class AugPolicy:
    kind: str = "strong"  # weak | strong
    scale_min: float = 0.5
    scale_max: float = 2.0  # scale factor drawn log-uniform in [scale_min, scale_max]
    jitter_amplitude: float = 0.05  # relative to each channel's max
    time_mask_fraction: float = 0.2
    channel_mask_fraction: float = 0.2
    op_probability: float = 0.5  # strong only: per-op firing probability
    group_size: int = 1  # trace channels per fragment group (for shuffling)

    def validate(self):
        if self.kind not in ("weak", "strong"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if not 0 <= self.op_probability <= 1:
            raise ValueError("op_probability must be in [0, 1]")
        if self.scale_min <= 0 or self.scale_max < self.scale_min:
            raise ValueError("need 0 < scale_min <= scale_max")
        return self


@dataclass(frozen=True)
class CowMaskParams:
    proportion_min: float = 0.3
    proportion_max: float = 0.7
    smoothing_scale: float = 8.0

    def validate(self):
        if not 0 < self.proportion_min <= self.proportion_max < 1:
            raise ValueError("mask proportions must satisfy 0 < min <= max < 1")
        if self.smoothing_scale < 1:
            raise ValueError("smoothing_scale must be >= 1")
        return self


def _with_values(x, values):
    return XIC(values=values.astype(x.values.dtype), trace_channels=x.trace_channels,
               meta_channels=x.meta_channels, id=x.id)


def scale_intensity(x, factor):
    """Multiply trace channels by a positive factor; metadata unchanged."""
    if factor <= 0:
        raise ValueError(f"scale factor must be > 0, got {factor}")
    values = x.values.copy()
    values[: x.trace_channels] *= factor
    return _with_values(x, values)


def jitter(x, amplitude, seed):
    """Add zero-mean gaussian noise with std = amplitude * channel max, clipped at 0."""
    if amplitude < 0:
        raise ValueError("jitter amplitude must be >= 0")
    if amplitude == 0:
        return x
    rng = np.random.default_rng(seed)
    values = x.values.copy()
    traces = values[: x.trace_channels]
    std = amplitude * traces.max(axis=1, keepdims=True)
    traces += std * rng.standard_normal(traces.shape).astype(values.dtype)
    np.clip(traces, 0, None, out=traces)
    return _with_values(x, values)


def channel_shuffle(x, seed, group_size=1):
    """Permute fragment trace-channel groups; precursor group and metadata fixed."""
    n_groups = x.trace_channels // group_size
    shuffleable = n_groups - 1  # group 0 is the precursor
    if shuffleable < 2:
        return x
    rng = np.random.default_rng(seed)
    perm = rng.permutation(shuffleable) + 1
    values = x.values.copy()
    for dst, src in enumerate(perm, start=1):
        values[dst * group_size : (dst + 1) * group_size] = \
            x.values[src * group_size : (src + 1) * group_size]
    return _with_values(x, values)


def mask_stretch(x, axis, max_fraction, seed):
    """Zero one contiguous block along time or trace-channel axis."""
    if not 0 < max_fraction <= 1:
        raise ValueError("max_fraction must be in (0, 1]")
    if axis not in ("time", "channel"):
        raise ValueError(f"axis must be 'time' or 'channel', got {axis!r}")
    rng = np.random.default_rng(seed)
    extent = x.length if axis == "time" else x.trace_channels
    width = int(rng.integers(1, max(1, int(max_fraction * extent)) + 1))
    start = int(rng.integers(0, extent - width + 1))
    values = x.values.copy()
    if axis == "time":
        values[: x.trace_channels, start : start + width] = 0
    else:
        values[start : start + width] = 0
    return _with_values(x, values)


def apply_policy(x, policy, seed):
    """Weak: one drawn scale factor.  Strong: each op fires with probability
    op_probability, in the fixed order scale, jitter, shuffle, time mask,
    channel mask."""
    policy.validate()
    rng = np.random.default_rng(seed)

    def draw_scale():
        return float(np.exp(rng.uniform(np.log(policy.scale_min), np.log(policy.scale_max))))

    if policy.kind == "weak":
        return scale_intensity(x, draw_scale())

    fire = rng.random(5) < policy.op_probability
    sub_seeds = rng.integers(0, 2**63, size=5)
    if fire[0]:
        x = scale_intensity(x, draw_scale())
    if fire[1]:
        x = jitter(x, policy.jitter_amplitude, int(sub_seeds[1]))
    if fire[2]:
        x = channel_shuffle(x, int(sub_seeds[2]), policy.group_size)
    if fire[3]:
        x = mask_stretch(x, "time", policy.time_mask_fraction, int(sub_seeds[3]))
    if fire[4]:
        x = mask_stretch(x, "channel", policy.channel_mask_fraction, int(sub_seeds[4]))
    return x


def generate_cow_mask(length, params, seed):
    """Smoothed-noise-threshold binary mask with a drawn positive proportion."""
    params.validate()
    rng = np.random.default_rng(seed)
    p = rng.uniform(params.proportion_min, params.proportion_max)
    noise = rng.standard_normal(length)
    radius = int(np.ceil(3 * params.smoothing_scale))
    kernel = np.exp(-0.5 * (np.arange(-radius, radius + 1) / params.smoothing_scale) ** 2)
    kernel /= kernel.sum()
    smooth = np.convolve(np.pad(noise, radius, mode="reflect"), kernel, mode="same")[radius:-radius]
    # threshold at the quantile whose positive fraction is closest to p
    threshold = np.quantile(smooth, 1.0 - p)
    return (smooth >= threshold).astype(np.uint8)


def cowmix(x1, x2, mask):
    """Splice trace channels of x1 (where mask=1) and x2 (where mask=0);
    metadata comes from x1."""
    if x1.values.shape != x2.values.shape:
        raise ValueError(f"shape mismatch: {x1.values.shape} vs {x2.values.shape}")
    if len(mask) != x1.length:
        raise ValueError(f"mask length {len(mask)} != T {x1.length}")
    keep = np.asarray(mask, dtype=bool)
    values = x1.values.copy()
    values[: x1.trace_channels, ~keep] = x2.values[: x2.trace_channels, ~keep]
    return _with_values(x1, values)


def cowmix_labels(labels1, labels2, mask):
    """Mix any per-time-point label/weight vectors with the same cow mask."""
    keep = np.asarray(mask, dtype=bool)
    return np.where(keep, labels1, labels2)
