"""Neural-network layers with explicit forward and backward passes.

Every layer implements `forward(x)` caching whatever its `backward(dy)`
needs; `backward` accumulates parameter gradients and returns the input
gradient.  Tensors are (B, C, T) float arrays unless noted.  Only the
layers used by the three architectures exist here.
"""

from __future__ import annotations

import math

import numpy as np

from .backend import dwconv_backward, dwconv_forward


class Parameter:
    """Named value tensor with a gradient accumulator of identical shape."""

    def __init__(self, value, name=""):
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)
        self.name = name

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Buffer:
    """Non-trainable named state (e.g. batch-norm running statistics)."""

    def __init__(self, value, name=""):
        self.value = np.asarray(value)
        self.name = name


class Layer:
    training = False

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def children(self):
        for key, val in vars(self).items():
            if isinstance(val, Layer):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Layer):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield (prefix + key if prefix else key), val
        for key, child in self.children():
            yield from child.named_parameters(prefix + key + ".")

    def named_buffers(self, prefix=""):
        for key, val in vars(self).items():
            if isinstance(val, Buffer):
                yield (prefix + key if prefix else key), val
        for key, child in self.children():
            yield from child.named_buffers(prefix + key + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def set_training(self, flag):
        self.training = flag
        for _, child in self.children():
            child.set_training(flag)

    def seed_rngs(self, seed):
        """Give every stochastic sublayer its own counter-derived RNG stream."""
        counter = [0]
        self._seed_rngs(seed, counter)

    def _seed_rngs(self, seed, counter):
        if isinstance(self, Dropout):
            self.rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(counter[0],)))
            counter[0] += 1
        for _, child in self.children():
            child._seed_rngs(seed, counter)


def _uniform_init(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class PointwiseConv(Layer):
    """1x1 convolution: per-time-step linear map over channels."""

    def __init__(self, c_in, c_out, rng=None, dtype=np.float32, bias=True, zero_init=False):
        self.c_in, self.c_out = c_in, c_out
        if zero_init:
            w = np.zeros((c_out, c_in), dtype=dtype)
        else:
            w = _uniform_init(rng, (c_out, c_in), c_in, dtype)
        self.w = Parameter(w)
        self.b = Parameter(np.zeros(c_out, dtype=dtype)) if bias else None

    def forward(self, x):
        if x.shape[1] != self.c_in:
            raise ValueError(f"expected {self.c_in} channels, got {x.shape[1]}")
        self._x = x
        y = np.matmul(self.w.value, x)  # (o,i) @ (b,i,t) -> (b,o,t)
        if self.b is not None:
            y += self.b.value[:, None]
        return y

    def backward(self, dy):
        b, o, t = dy.shape
        dy2 = dy.transpose(1, 0, 2).reshape(o, b * t)
        x2 = self._x.transpose(1, 0, 2).reshape(self.c_in, b * t)
        self.w.grad += dy2 @ x2.T
        if self.b is not None:
            self.b.grad += dy.sum(axis=(0, 2))
        return np.matmul(self.w.value.T, dy)  # (i,o) @ (b,o,t) -> (b,i,t)


class DepthwiseConv(Layer):
    """Per-channel 1D convolution with zero 'same' padding, no bias."""

    def __init__(self, channels, kernel_size, rng=None, dtype=np.float32):
        if kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {kernel_size}")
        self.channels, self.kernel_size = channels, kernel_size
        self.w = Parameter(_uniform_init(rng, (channels, kernel_size), kernel_size, dtype))

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        self._x = np.ascontiguousarray(x)
        return dwconv_forward(self._x, np.ascontiguousarray(self.w.value))

    def backward(self, dy):
        dx, dw = dwconv_backward(self._x, np.ascontiguousarray(self.w.value), np.ascontiguousarray(dy))
        self.w.grad += dw
        return dx


def _conv_windows(x, k):
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    return np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)


class Conv1d(Layer):
    """Full C_in -> C_out 1D convolution, zero 'same' padding (CNN baseline)."""

    def __init__(self, c_in, c_out, kernel_size, rng=None, dtype=np.float32):
        if kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {kernel_size}")
        self.c_in, self.c_out, self.kernel_size = c_in, c_out, kernel_size
        self.w = Parameter(_uniform_init(rng, (c_out, c_in, kernel_size), c_in * kernel_size, dtype))
        self.b = Parameter(np.zeros(c_out, dtype=dtype))

    def forward(self, x):
        if x.shape[1] != self.c_in:
            raise ValueError(f"expected {self.c_in} channels, got {x.shape[1]}")
        self._x = x
        b, _, t = x.shape
        o, i, k = self.w.value.shape
        win = _conv_windows(x, k)  # (b, i, t, k)
        x2 = win.transpose(0, 2, 1, 3).reshape(b, t, i * k)
        y = x2 @ self.w.value.reshape(o, i * k).T  # (b, t, o)
        return y.transpose(0, 2, 1) + self.b.value[:, None]

    def backward(self, dy):
        b, o, t = dy.shape
        _, i, k = self.w.value.shape
        win = _conv_windows(self._x, k)
        x2 = win.transpose(0, 2, 1, 3).reshape(b * t, i * k)
        dy2 = dy.transpose(1, 0, 2).reshape(o, b * t)
        self.w.grad += (dy2 @ x2).reshape(o, i, k)
        self.b.grad += dy.sum(axis=(0, 2))
        dywin = _conv_windows(dy, k).transpose(0, 2, 1, 3).reshape(b, t, o * k)
        wflip = self.w.value[:, :, ::-1].transpose(1, 0, 2).reshape(i, o * k)
        return (dywin @ wflip.T).transpose(0, 2, 1)


class GatedConvProjection(Layer):
    """Pointwise conv into parallel depthwise convs, blended by softmax gates.

    Gate logits are per (branch, channel); softmax over branches gives
    positive weights summing to 1 per channel.
    """

    def __init__(self, c_in, c_mid, kernel_sizes=(3, 15), rng=None, dtype=np.float32):
        self.pointwise = PointwiseConv(c_in, c_mid, rng=rng, dtype=dtype)
        self.branches = [DepthwiseConv(c_mid, k, rng=rng, dtype=dtype) for k in kernel_sizes]
        self.gates = Parameter(np.zeros((len(kernel_sizes), c_mid), dtype=dtype))

    def branch_weights(self):
        return softmax(self.gates.value, axis=0)

    def forward(self, x):
        z = self.pointwise(x)
        self._branch_out = [br(z) for br in self.branches]
        self._s = self.branch_weights()
        y = np.zeros_like(self._branch_out[0])
        for i, out in enumerate(self._branch_out):
            y += self._s[i][None, :, None] * out
        return y

    def backward(self, dy):
        ds = np.stack([np.sum(dy * out, axis=(0, 2)) for out in self._branch_out])
        self.gates.grad += self._s * (ds - np.sum(self._s * ds, axis=0, keepdims=True))
        dz = np.zeros_like(self._branch_out[0])
        for i, br in enumerate(self.branches):
            dz += br.backward(self._s[i][None, :, None] * dy)
        return self.pointwise.backward(dz)


def scaled_dot_product_attention(q, k, v):
    """q, k: (B, T, d_k), v: (B, T, d_v) -> (output, attention weights).

    Logits are q . k / sqrt(d_k); weight rows sum to 1.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[1] != v.shape[1]:
        raise ValueError(f"key count {k.shape[1]} != value count {v.shape[1]}")
    scale = 1.0 / math.sqrt(q.shape[-1])  # python float: keeps the input dtype
    weights = softmax(np.matmul(q, k.transpose(0, 2, 1)) * scale, axis=-1)
    return np.matmul(weights, v), weights


class SelfAttention(Layer):
    """Single-head self-attention; Q/K/V producers are channel-mapping layers.

    `identity_weights` freezes the attention matrix to the identity
    (diagnostic mode for translation-covariance checks).
    """

    def __init__(self, proj_q, proj_k, proj_v, identity_weights=False):
        self.proj_q, self.proj_k, self.proj_v = proj_q, proj_k, proj_v
        self.identity_weights = identity_weights

    def forward(self, x):
        q = self.proj_q(x).transpose(0, 2, 1)
        k = self.proj_k(x).transpose(0, 2, 1)
        v = self.proj_v(x).transpose(0, 2, 1)
        self._scale = 1.0 / math.sqrt(q.shape[-1])
        if self.identity_weights:
            b, t, _ = q.shape
            a = np.broadcast_to(np.eye(t, dtype=q.dtype), (b, t, t))
        else:
            a = softmax(np.matmul(q, k.transpose(0, 2, 1)) * self._scale, axis=-1)
        self._q, self._k, self._v, self._a = q, k, v, a
        return np.matmul(a, v).transpose(0, 2, 1)

    def backward(self, dy):
        do = dy.transpose(0, 2, 1)
        dv = np.matmul(self._a.transpose(0, 2, 1), do)
        dx = self.proj_v.backward(dv.transpose(0, 2, 1))
        if not self.identity_weights:
            da = np.matmul(do, self._v.transpose(0, 2, 1))
            ds = self._a * (da - np.sum(da * self._a, axis=-1, keepdims=True))
            dq = np.matmul(ds, self._k) * self._scale
            dk = np.matmul(ds.transpose(0, 2, 1), self._q) * self._scale
            dx = dx + self.proj_q.backward(dq.transpose(0, 2, 1))
            dx = dx + self.proj_k.backward(dk.transpose(0, 2, 1))
        return dx


class ReLU(Layer):
    def forward(self, x):
        self._pos = x > 0  # subgradient at 0 is 0
        return np.where(self._pos, x, 0)

    def backward(self, dy):
        return np.where(self._pos, dy, 0)


class PositionWiseFFN(Layer):
    """Two pointwise convolutions with a ReLU between, applied at each position."""

    def __init__(self, channels, mult=4, rng=None, dtype=np.float32):
        self.up = PointwiseConv(channels, channels * mult, rng=rng, dtype=dtype)
        self.act = ReLU()
        self.down = PointwiseConv(channels * mult, channels, rng=rng, dtype=dtype)

    def forward(self, x):
        return self.down(self.act(self.up(x)))

    def backward(self, dy):
        return self.up.backward(self.act.backward(self.down.backward(dy)))


def _norm_stats(x, axis, eps):
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv


def _norm_backward(dxhat, xhat, inv, axis):
    n = xhat.shape[axis]
    return (inv / n) * (
        n * dxhat
        - dxhat.sum(axis=axis, keepdims=True)
        - xhat * np.sum(dxhat * xhat, axis=axis, keepdims=True)
    )


class InstanceNorm(Layer):
    """Affine normalization over the time axis, per sample per channel."""

    def __init__(self, channels, eps=1e-5, dtype=np.float32):
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))

    def forward(self, x):
        if x.shape[2] < 2:
            raise ValueError("instance norm needs T >= 2")
        self._xhat, self._inv = _norm_stats(x, 2, self.eps)
        return self.gamma.value[None, :, None] * self._xhat + self.beta.value[None, :, None]

    def backward(self, dy):
        self.gamma.grad += np.sum(dy * self._xhat, axis=(0, 2))
        self.beta.grad += dy.sum(axis=(0, 2))
        return _norm_backward(dy * self.gamma.value[None, :, None], self._xhat, self._inv, 2)


class LayerNorm(Layer):
    """Affine normalization over the channel axis, per sample per time step."""

    def __init__(self, channels, eps=1e-5, dtype=np.float32):
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))

    def forward(self, x):
        if x.shape[1] < 2:
            raise ValueError("layer norm needs C >= 2")
        self._xhat, self._inv = _norm_stats(x, 1, self.eps)
        return self.gamma.value[None, :, None] * self._xhat + self.beta.value[None, :, None]

    def backward(self, dy):
        self.gamma.grad += np.sum(dy * self._xhat, axis=(0, 2))
        self.beta.grad += dy.sum(axis=(0, 2))
        return _norm_backward(dy * self.gamma.value[None, :, None], self._xhat, self._inv, 1)


class BatchNorm1d(Layer):
    """Per-channel normalization over (batch, time) with running statistics."""

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = Buffer(np.zeros(channels, dtype=dtype))
        self.running_var = Buffer(np.ones(channels, dtype=dtype))
        self.initialized = Buffer(np.zeros(1, dtype=dtype))

    def forward(self, x):
        if self.training:
            b, _, t = x.shape
            if b * t < 2:
                raise ValueError("batch norm training needs B*T >= 2")
            mu = x.mean(axis=(0, 2))
            xc = x - mu[None, :, None]
            var = np.mean(xc * xc, axis=(0, 2))
            self._inv = 1.0 / np.sqrt(var + self.eps)[None, :, None]
            self._xhat = xc * self._inv
            m = self.momentum
            self.running_mean.value = ((1 - m) * self.running_mean.value + m * mu).astype(x.dtype)
            self.running_var.value = ((1 - m) * self.running_var.value + m * var).astype(x.dtype)
            self.initialized.value[...] = 1
            return self.gamma.value[None, :, None] * self._xhat + self.beta.value[None, :, None]
        if not self.initialized.value[0]:
            raise RuntimeError("batch norm evaluated before any training step initialized running stats")
        inv = 1.0 / np.sqrt(self.running_var.value + self.eps)
        xhat = (x - self.running_mean.value[None, :, None]) * inv[None, :, None]
        self._eval_scale = (self.gamma.value * inv)[None, :, None]
        self._xhat = xhat
        return self.gamma.value[None, :, None] * xhat + self.beta.value[None, :, None]

    def backward(self, dy):
        self.gamma.grad += np.sum(dy * self._xhat, axis=(0, 2))
        self.beta.grad += dy.sum(axis=(0, 2))
        if self.training:
            dxhat = dy * self.gamma.value[None, :, None]
            b, c, t = dxhat.shape
            n = b * t
            return (self._inv / n) * (
                n * dxhat
                - dxhat.sum(axis=(0, 2), keepdims=True)
                - self._xhat * np.sum(dxhat * self._xhat, axis=(0, 2), keepdims=True)
            )
        return dy * self._eval_scale


class AdaptiveInputNorm(Layer):
    """Two-stage adaptive normalization: learned shift from per-channel means,
    then learned scale from per-channel RMS; both maps initialized to identity."""

    def __init__(self, channels, eps=1e-8, dtype=np.float32):
        self.eps = eps
        self.w_shift = Parameter(np.eye(channels, dtype=dtype))
        self.w_scale = Parameter(np.eye(channels, dtype=dtype))

    def forward(self, x):
        t = x.shape[2]
        self._t = t
        self._a = x.mean(axis=2)  # (B, C)
        shift = self._a @ self.w_shift.value.T
        self._xs = x - shift[:, :, None]
        self._rms = np.sqrt(np.mean(self._xs * self._xs, axis=2))  # (B, C)
        v = self._rms @ self.w_scale.value.T
        self._d = np.maximum(v, self.eps)
        self._at_floor = v <= self.eps
        return self._xs / self._d[:, :, None]

    def backward(self, dy):
        dxs = dy / self._d[:, :, None]
        dd = -np.sum(dy * self._xs, axis=2) / (self._d * self._d)
        dv = np.where(self._at_floor, 0.0, dd)
        self.w_scale.grad += np.einsum("bc,bk->ck", dv, self._rms, optimize=True)
        drms = dv @ self.w_scale.value
        safe = np.where(self._rms > 0, self._rms, 1.0)
        dmean_sq = np.where(self._rms > 0, drms * 0.5 / safe, 0.0)
        dxs = dxs + (2.0 / self._t) * dmean_sq[:, :, None] * self._xs
        dshift = -dxs.sum(axis=2)
        self.w_shift.grad += np.einsum("bc,bk->ck", dshift, self._a, optimize=True)
        da = dshift @ self.w_shift.value
        return dxs + da[:, :, None] / self._t


class Dropout(Layer):
    """Inverted dropout; identity in eval mode. RNG is assigned via seed_rngs."""

    def __init__(self, p):
        if not 0 <= p < 1:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.rng = np.random.default_rng(0)

    def forward(self, x):
        if not self.training or self.p == 0:
            self._mask = None
            return x
        self._mask = (self.rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return x * self._mask.astype(x.dtype)

    def backward(self, dy):
        if self._mask is None:
            return dy
        return dy * self._mask.astype(dy.dtype)


class SigmoidHead(Layer):
    """Linear per-time-point classifier with sigmoid; (B, C, T) -> (B, T).

    Without an rng the weights start at zero so the untrained output is
    exactly 0.5 (used by the attention architectures, whose residual paths
    diversify features on their own).  With an rng the weights get the
    standard uniform fan-in init; the plain CNN needs this, because a
    zero head feeds every feature map the same rank-one gradient direction
    and the narrowing stack never recovers from that collapse.
    """

    def __init__(self, channels, dtype=np.float32, rng=None):
        if rng is None:
            w = np.zeros(channels, dtype=dtype)
        else:
            w = _uniform_init(rng, (channels,), channels, dtype)
        self.w = Parameter(w)
        self.b = Parameter(np.zeros(1, dtype=dtype))

    def forward(self, x):
        self._x = x
        z = np.einsum("c,bct->bt", self.w.value, x, optimize=True) + self.b.value[0]
        self._p = sigmoid(z)
        return self._p

    def backward(self, dp):
        dz = dp * self._p * (1.0 - self._p)
        self.w.grad += np.einsum("bt,bct->c", dz, self._x, optimize=True)
        self.b.grad += dz.sum(keepdims=True).reshape(1)
        return self.w.value[None, :, None] * dz[:, None, :]


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


def pointwise_conv(x, w, b=None):
    """Functional 1x1 convolution: out[b,o,t] = sum_i w[o,i] x[b,i,t] + b[o]."""
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"channel mismatch: x has {x.shape[1]}, w expects {w.shape[1]}")
    y = np.einsum("oi,bit->bot", w, x, optimize=True)
    if b is not None:
        y += np.asarray(b)[:, None]
    return y


def depthwise_conv(x, w):
    """Functional per-channel convolution, zero 'same' padding; w: (C, K), K odd."""
    if w.shape[1] % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {w.shape[1]}")
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"channel mismatch: x has {x.shape[1]}, w has {w.shape[0]}")
    return dwconv_forward(np.ascontiguousarray(x), np.ascontiguousarray(w))
