"""Pure-numpy depthwise convolution kernels (fallback for the compiled extension).

Cross-correlation convention with zero "same" padding: for kernel size K,
y[b, c, t] = sum_j w[c, j] * x[b, c, t + j - (K-1)//2].
"""

import numpy as np

BACKEND = "numpy"


def _windows(x, k):
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    return np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)


def dwconv_forward(x, w):
    """x: (B, C, T), w: (C, K) with K odd -> (B, C, T)."""
    return np.einsum("bctk,ck->bct", _windows(x, w.shape[1]), w, optimize=True)


def dwconv_backward(x, w, dy):
    """Gradients of sum(dy * dwconv_forward(x, w)) w.r.t. x and w."""
    k = w.shape[1]
    dw = np.einsum("bct,bctk->ck", dy, _windows(x, k), optimize=True)
    dx = np.einsum("bctk,ck->bct", _windows(dy, k), w[:, ::-1], optimize=True)
    return dx, dw
