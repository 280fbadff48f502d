"""Finite-difference verification of the layer differentiation contract."""

import numpy as np


def grad_check(layer, input_shape, eps=1e-4, seed=0):
    """Max relative error between analytic and central-difference gradients.

    The scalar loss is a fixed random weighting of the layer output (a plain
    sum is degenerate for normalization layers, whose outputs sum to zero).
    Gradients are checked for every input element and every parameter
    element; relative error uses denominator max(|analytic|, |numeric|,
    1e-8).  The layer must be deterministic (dropout in eval mode or seeded).
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(input_shape)

    layer.zero_grad()
    y = layer.forward(x)
    r = np.random.default_rng(seed + 1).standard_normal(y.shape)
    dx = layer.backward(r.copy())

    def loss_at():
        return float((layer.forward(x) * r).sum())

    if loss_at() != loss_at():
        raise RuntimeError("layer is not deterministic; seed it or switch to eval mode")

    max_err = 0.0
    targets = [(x, dx)] + [(p.value, p.grad) for p in layer.parameters()]
    for values, grads in targets:
        flat = values.reshape(-1)
        gflat = np.asarray(grads).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_at()
            flat[i] = orig - eps
            down = loss_at()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            analytic = gflat[i]
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            max_err = max(max_err, err)
    return max_err
