"""XIC data model, synthetic generator, dataset splitting, and binary exchange format.

An XIC is stored as a dense C x T float32 matrix.  Channel layout:
trace channels first (precursor trace at index 0, fragment traces after),
then metadata channels (relative-position ramp first, constant library
placeholder channels after).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

MAGIC = b"XIC1"
FORMAT_VERSION = 1


class FormatError(Exception):
    """Raised for malformed XIC exchange files, with the failing byte offset."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass(frozen=True)
class XIC:
    values: np.ndarray  # (C, T) float32
    trace_channels: int
    meta_channels: int
    id: str

    @property
    def n_channels(self):
        return self.values.shape[0]

    @property
    def length(self):
        return self.values.shape[1]

    @property
    def position_channel(self):
        """The relative-position ramp, first metadata channel."""
        return self.values[self.trace_channels]

    def validate(self):
        c, t = self.values.shape
        if c != self.trace_channels + self.meta_channels:
            raise ValueError(f"channel count {c} != trace {self.trace_channels} + meta {self.meta_channels}")
        if self.meta_channels < 1 or c < 2:
            raise ValueError("need at least one trace and one metadata channel")
        if t < 8:
            raise ValueError(f"length {t} < 8")
        traces = self.values[: self.trace_channels]
        if not np.all(np.isfinite(traces)) or np.any(traces < 0):
            raise ValueError("trace channels must be finite and non-negative")
        pos = self.position_channel
        if pos[0] != 0.0 or pos[-1] != 1.0 or np.any(np.diff(pos) <= 0):
            raise ValueError("position channel must increase strictly from 0 to 1")
        return self


@dataclass(frozen=True)
class Annotation:
    left: int
    right: int

    def validate(self, length):
        if not (0 <= self.left <= self.right < length):
            raise ValueError(f"annotation ({self.left}, {self.right}) out of range for T={length}")
        return self


@dataclass
class SynthConfig:
    length: int = 175
    trace_channels: int = 7
    meta_channels: int = 2
    p_pos: float = 0.5
    sigma_min: float = 2.0
    sigma_max: float = 6.0
    amp_min: float = 0.5
    amp_max: float = 20.0  # amplitudes log-uniform in [amp_min, amp_max]
    noise_floor: float = 0.5
    noise_scale: float = 1.5
    p_interferent: float = 0.6
    interferent_fraction: float = 0.5  # fraction of trace channels hit by an interferent
    label_halfwidth: float = 2.0  # mask spans center +/- label_halfwidth * sigma
    seed: int = 0

    def validate(self):
        if self.sigma_min < 1:
            raise ValueError("sigma_min must be >= 1")
        if self.sigma_max < self.sigma_min:
            raise ValueError("sigma_max < sigma_min")
        if self.label_halfwidth <= 0:
            raise ValueError("label_halfwidth must be > 0")
        for name in ("p_pos", "p_interferent", "interferent_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.length - 1 < 4 * self.sigma_max:
            raise ValueError(f"length {self.length} too small for sigma_max {self.sigma_max}")
        if self.trace_channels < 1 or self.meta_channels < 1 or self.length < 8:
            raise ValueError("need trace_channels >= 1, meta_channels >= 1, length >= 8")
        return self


@dataclass(frozen=True)
class Dataset:
    """Immutable container for one split of labeled + unlabeled samples."""

    labeled: tuple  # tuple of (XIC, mask) pairs
    unlabeled: tuple = ()  # tuple of XIC
    split: str = "train"

    def __len__(self):
        return len(self.labeled) + len(self.unlabeled)


def make_position_channel(length):
    """Relative-position ramp: v[i] = i / (T - 1)."""
    if length < 2:
        raise ValueError(f"position channel needs T >= 2, got {length}")
    return np.arange(length, dtype=np.float32) / np.float32(length - 1)


def annotation_to_mask(annotation, length):
    annotation.validate(length)
    mask = np.zeros(length, dtype=np.uint8)
    mask[annotation.left : annotation.right + 1] = 1
    return mask


def mask_to_annotations(mask):
    """Maximal runs of ones as inclusive intervals, sorted by left edge."""
    mask = np.asarray(mask).astype(bool)
    padded = np.concatenate([[False], mask, [False]])
    edges = np.diff(padded.astype(np.int8))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    return [Annotation(int(s), int(e)) for s, e in zip(starts, ends)]


def gaussian_peak(length, center, sigma):
    t = np.arange(length, dtype=np.float64)
    return np.exp(-((t - center) ** 2) / (2.0 * sigma**2))


def synth_generate(cfg, n, id_prefix="xic"):
    """Generate n synthetic (XIC, mask) samples; deterministic for a fixed seed.

    Positive samples share one Gaussian elution shape across all trace
    channels (co-elution) with per-channel amplitudes.  Interferent peaks
    hit only a random subset of trace channels and are never labeled.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    t_len, n_trace = cfg.length, cfg.trace_channels
    pos = make_position_channel(t_len)
    samples = []
    for i in range(n):
        traces = np.zeros((n_trace, t_len), dtype=np.float64)
        mask = np.zeros(t_len, dtype=np.uint8)

        has_peak = rng.random() < cfg.p_pos
        if has_peak:
            sigma = rng.uniform(cfg.sigma_min, cfg.sigma_max)
            center = rng.uniform(2 * sigma, t_len - 1 - 2 * sigma)
            amps = np.exp(rng.uniform(np.log(cfg.amp_min), np.log(cfg.amp_max), size=n_trace))
            traces += amps[:, None] * gaussian_peak(t_len, center, sigma)[None, :]
            lo = max(0, round(center - cfg.label_halfwidth * sigma))
            hi = min(t_len - 1, round(center + cfg.label_halfwidth * sigma))
            mask[lo : hi + 1] = 1

        if rng.random() < cfg.p_interferent:
            sigma_i = rng.uniform(cfg.sigma_min, cfg.sigma_max)
            center_i = rng.uniform(2 * sigma_i, t_len - 1 - 2 * sigma_i)
            n_hit = max(1, round(cfg.interferent_fraction * n_trace))
            hit = rng.choice(n_trace, size=n_hit, replace=False)
            amps_i = np.exp(rng.uniform(np.log(cfg.amp_min), np.log(cfg.amp_max), size=n_hit))
            traces[hit] += amps_i[:, None] * gaussian_peak(t_len, center_i, sigma_i)[None, :]

        traces += cfg.noise_floor + cfg.noise_scale * np.abs(rng.standard_normal(traces.shape))

        meta = np.zeros((cfg.meta_channels, t_len), dtype=np.float64)
        meta[0] = pos
        meta[1:] = 1.0  # constant library-information placeholders
        values = np.concatenate([traces, meta]).astype(np.float32)
        values[n_trace] = pos  # keep the ramp exact after the float32 cast
        xic = XIC(values=values, trace_channels=n_trace, meta_channels=cfg.meta_channels, id=f"{id_prefix}-{i:06d}")
        samples.append((xic, mask))
    return samples


def split_dataset(samples, ratios=(0.7, 0.2, 0.1), seed=0):
    """Shuffle and split into train/val/test; deterministic and exhaustive."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    n = len(samples)
    order = np.random.default_rng(seed).permutation(n)
    n_train = round(n * ratios[0])
    n_val = round(n * ratios[1])
    n_val = min(n_val, n - n_train)
    parts = (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])
    tags = ("train", "val", "test")
    return tuple(
        Dataset(labeled=tuple(samples[i] for i in idx), split=tag)
        for idx, tag in zip(parts, tags)
    )


def write_xic_file(path, samples):
    """Write samples to the binary exchange format.

    samples: iterable of (XIC, mask-or-None) pairs or bare XICs.
    """
    normalized = []
    for s in samples:
        xic, mask = s if isinstance(s, tuple) else (s, None)
        xic.validate()
        if mask is not None and len(mask) != xic.length:
            raise ValueError(f"mask length {len(mask)} != T {xic.length} for {xic.id}")
        normalized.append((xic, mask))
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(normalized)))
        for xic, mask in normalized:
            ident = xic.id.encode("utf-8")
            f.write(struct.pack("<I", len(ident)))
            f.write(ident)
            f.write(struct.pack("<IIIB", xic.n_channels, xic.trace_channels, xic.length, 1 if mask is not None else 0))
            f.write(np.ascontiguousarray(xic.values, dtype="<f4").tobytes())
            if mask is not None:
                f.write(np.asarray(mask, dtype=np.uint8).tobytes())


def read_xic_file(path):
    """Read the binary exchange format; returns list of (XIC, mask-or-None)."""
    with open(path, "rb") as f:
        data = f.read()

    def need(offset, count, what):
        if offset + count > len(data):
            raise FormatError(f"truncated file while reading {what}", offset)
        return data[offset : offset + count]

    if need(0, 4, "magic") != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}", 0)
    version, count = struct.unpack("<II", need(4, 8, "header"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    offset = 12
    samples = []
    for _ in range(count):
        (id_len,) = struct.unpack("<I", need(offset, 4, "id length"))
        offset += 4
        ident = need(offset, id_len, "id").decode("utf-8")
        offset += id_len
        c, trace_c, t_len, has_mask = struct.unpack("<IIIB", need(offset, 13, "sample header"))
        offset += 13
        if trace_c >= c:
            raise FormatError(f"trace channel count {trace_c} >= total channels {c}", offset - 13)
        values = np.frombuffer(need(offset, 4 * c * t_len, "values"), dtype="<f4").reshape(c, t_len).copy()
        offset += 4 * c * t_len
        mask = None
        if has_mask:
            mask = np.frombuffer(need(offset, t_len, "mask"), dtype=np.uint8).copy()
            offset += t_len
        xic = XIC(values=values, trace_channels=trace_c, meta_channels=c - trace_c, id=ident)
        try:
            xic.validate()
        except ValueError as exc:
            raise FormatError(f"invalid sample {ident!r}: {exc}") from exc
        samples.append((xic, mask))
    return samples


def write_annotation_sidecar(path, samples):
    """JSON-lines sidecar: one {"id", "left", "right"} object per annotation run."""
    with open(path, "w") as f:
        for xic, mask in samples:
            if mask is None:
                continue
            for ann in mask_to_annotations(mask):
                f.write(json.dumps({"id": xic.id, "left": ann.left, "right": ann.right}) + "\n")


def read_annotation_sidecar(path):
    """Returns dict: id -> list of Annotation."""
    out = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out.setdefault(obj["id"], []).append(Annotation(int(obj["left"]), int(obj["right"])))
    return out
