"""The three architectures: baseline CNN, baseline Transformer, and the
Conformer (Transformer with gated convolutional Q/K/V projections).

All take (B, C, T) inputs and emit (B, T) per-time-point peak probabilities.
Order information enters only through the relative-position input channel;
there is no positional embedding.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from .nn import layers as L


@dataclass(frozen=True)
class ArchSpec:
    kind: str  # cnn | transformer | conformer
    in_channels: int
    blocks: int = 6
    d_model: int = 64
    heads: int = 1
    dropout: float = 0.1
    ffn_mult: int = 4
    conv_kernels: tuple = (3, 15)
    cnn_filters: tuple = (256, 128, 64, 32, 16, 8)
    cnn_kernels: tuple = (13, 11, 9, 7, 5, 3)

    def validate(self):
        if self.kind not in ("cnn", "transformer", "conformer"):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if self.heads != 1:
            raise ValueError("only single-head attention is supported")
        if self.in_channels < 1 or self.blocks < 0:
            raise ValueError("in_channels must be >= 1 and blocks >= 0")
        if self.kind == "cnn":
            if len(self.cnn_filters) != self.blocks or len(self.cnn_kernels) != self.blocks:
                raise ValueError("cnn filter/kernel schedules must have one entry per block")
            if any(k % 2 == 0 for k in self.cnn_kernels):
                raise ValueError("cnn kernel sizes must be odd")
        if any(k % 2 == 0 for k in self.conv_kernels):
            raise ValueError("conv projection kernel sizes must be odd")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("conv_kernels", "cnn_filters", "cnn_kernels"):
            d[key] = tuple(d[key])
        return cls(**d)


class TransformerBlock(L.Layer):
    """Post-norm encoder block: attention and FFN sublayers, each wrapped in
    residual + dropout + normalization."""

    def __init__(self, spec, rng, dtype, make_projection, make_norm):
        self.attn = L.SelfAttention(make_projection(rng), make_projection(rng), make_projection(rng))
        self.drop_attn = L.Dropout(spec.dropout)
        self.norm_attn = make_norm()
        self.ffn = L.PositionWiseFFN(spec.d_model, spec.ffn_mult, rng=rng, dtype=dtype)
        self.drop_ffn = L.Dropout(spec.dropout)
        self.norm_ffn = make_norm()

    def forward(self, x):
        h = self.norm_attn(x + self.drop_attn(self.attn(x)))
        return self.norm_ffn(h + self.drop_ffn(self.ffn(h)))

    def backward(self, dy):
        dh = self.norm_ffn.backward(dy)
        dh = dh + self.ffn.backward(self.drop_ffn.backward(dh))
        dx = self.norm_attn.backward(dh)
        return dx + self.attn.backward(self.drop_attn.backward(dx))


class Model:
    """An architecture instance: spec, net, and named parameters."""

    def __init__(self, spec, net, seed):
        self.spec = spec
        self.net = net
        self.seed = seed
        self.training = False
        for name, p in net.named_parameters():
            p.name = name
        for name, b in net.named_buffers():
            b.name = name
        names = [p.name for p in self.parameters()]
        assert len(names) == len(set(names)), "parameter names must be unique"
        self.net.seed_rngs(seed)

    def parameters(self):
        return self.net.parameters()

    def buffers(self):
        return [b for _, b in self.net.named_buffers()]

    def set_training(self, flag):
        self.training = flag
        self.net.set_training(flag)

    def seed_step(self, base_seed, step):
        """Derive fresh per-layer dropout streams for one training step."""
        self.net.seed_rngs((int(base_seed) << 20) ^ int(step))

    def zero_grad(self):
        self.net.zero_grad()

    def forward(self, x):
        x = np.asarray(x)
        if x.ndim != 3 or x.shape[1] != self.spec.in_channels:
            raise ValueError(
                f"expected input of shape (B, {self.spec.in_channels}, T), got {x.shape}"
            )
        return self.net.forward(x)

    def backward(self, dy):
        return self.net.backward(dy)

    def __call__(self, x):
        return self.forward(x)

    def attention_layers(self):
        out = []

        def walk(layer):
            if isinstance(layer, L.SelfAttention):
                out.append(layer)
            for _, child in layer.children():
                walk(child)

        walk(self.net)
        return out


def build_model(spec, seed=0, dtype=np.float32):
    """Deterministic construction + initialization of one architecture."""
    spec.validate()
    rng = np.random.default_rng(seed)
    c = spec.in_channels
    if spec.blocks == 0:  # degenerate head-only model, used by tests
        return Model(spec, L.Sequential([L.SigmoidHead(c, dtype=dtype)]), seed)
    parts = [L.AdaptiveInputNorm(c, dtype=dtype)]

    if spec.kind == "cnn":
        for filters, kernel in zip(spec.cnn_filters, spec.cnn_kernels):
            parts.append(L.Conv1d(c, filters, kernel, rng=rng, dtype=dtype))
            parts.append(L.BatchNorm1d(filters, dtype=dtype))
            parts.append(L.ReLU())
            c = filters
        parts.append(L.SigmoidHead(c, dtype=dtype, rng=rng))
        return Model(spec, L.Sequential(parts), seed)

    d = spec.d_model
    if spec.kind == "transformer":
        def make_projection(r):
            # plain projection matrices, no bias
            return L.PointwiseConv(d, d, rng=r, dtype=dtype, bias=False)

        def make_norm():
            return L.LayerNorm(d, dtype=dtype)
    else:
        def make_projection(r):
            return L.GatedConvProjection(d, d, spec.conv_kernels, rng=r, dtype=dtype)

        def make_norm():
            return L.InstanceNorm(d, dtype=dtype)

    parts.append(L.PointwiseConv(c, d, rng=rng, dtype=dtype))  # input embedding
    for _ in range(spec.blocks):
        parts.append(TransformerBlock(spec, rng, dtype, make_projection, make_norm))
    parts.append(L.SigmoidHead(d, dtype=dtype))
    return Model(spec, L.Sequential(parts), seed)


def count_params(model):
    return sum(p.value.size for p in model.parameters())


def model_summary(model):
    rows = [(p.name, "x".join(map(str, p.value.shape)) or "scalar", p.value.size) for p in model.parameters()]
    width = max(len(r[0]) for r in rows) if rows else 4
    lines = [f"{'name':<{width}}  {'shape':>12}  {'count':>10}"]
    for name, shape, size in rows:
        lines.append(f"{name:<{width}}  {shape:>12}  {size:>10}")
    lines.append(f"{'total':<{width}}  {'':>12}  {count_params(model):>10}")
    return "\n".join(lines)


def _write_tensor(f, name, arr):
    encoded = name.encode("utf-8")
    f.write(struct.pack("<I", len(encoded)))
    f.write(encoded)
    arr = np.asarray(arr)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: {what}")
    return data


def _read_tensor(f):
    raw = f.read(4)
    if not raw:
        return None
    if len(raw) != 4:
        raise CheckpointError("truncated tensor record")
    (name_len,) = struct.unpack("<I", raw)
    name = _read_exact(f, name_len, "tensor name").decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(f, 4, f"rank of {name!r}"))
    shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, f"shape of {name!r}"))
    count = int(np.prod(shape)) if rank else 1
    data = f.read(4 * count)
    if len(data) != 4 * count:
        raise CheckpointError(f"truncated tensor data for {name!r}")
    return name, np.frombuffer(data, dtype="<f4").reshape(shape).copy()


class CheckpointError(Exception):
    pass


def save_checkpoint(model, path, step=0, extra_tensors=None, metadata=None):
    """Metadata JSON + named float32 little-endian tensors, ordered by name."""
    tensors = {p.name: p.value for p in model.parameters()}
    tensors.update({b.name: b.value for _, b in model.net.named_buffers()})
    if extra_tensors:
        tensors.update(extra_tensors)
    meta = {
        "arch": model.spec.to_dict(),
        "seed": model.seed,
        "step": int(step),
        "has_optimizer_state": bool(extra_tensors),
    }
    if metadata:
        meta.update(metadata)
    header = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for name in sorted(tensors):
            _write_tensor(f, name, tensors[name])


def load_checkpoint(path):
    """Returns (model, metadata dict, extra tensors not owned by the model)."""
    with open(path, "rb") as f:
        raw = f.read(4)
        if len(raw) != 4:
            raise CheckpointError("truncated checkpoint header")
        (header_len,) = struct.unpack("<I", raw)
        header = f.read(header_len)
        if len(header) != header_len:
            raise CheckpointError("truncated checkpoint metadata")
        try:
            meta = json.loads(header.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"bad checkpoint metadata: {exc}") from exc
        tensors = {}
        while True:
            item = _read_tensor(f)
            if item is None:
                break
            tensors[item[0]] = item[1]
    spec = ArchSpec.from_dict(meta["arch"])
    model = build_model(spec, seed=meta.get("seed", 0))
    for p in model.parameters():
        if p.name not in tensors:
            raise CheckpointError(f"checkpoint missing parameter {p.name!r}")
        arr = tensors.pop(p.name)
        if arr.shape != p.value.shape:
            raise CheckpointError(
                f"shape mismatch for {p.name!r}: checkpoint {arr.shape}, model {p.value.shape}"
            )
        p.value[...] = arr
    for _, b in model.net.named_buffers():
        if b.name in tensors:
            b.value[...] = tensors.pop(b.name)
    return model, meta, tensors
