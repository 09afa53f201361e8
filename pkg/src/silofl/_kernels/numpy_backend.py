"""Pure-numpy implementations of the hot kernels.

Always importable; used when the compiled extension is missing or when
SILOFL_FORCE_NUMPY=1. All arrays are float64, C-contiguous.
"""

import numpy as np


def dense_forward(x, w, b):
    y = x @ w
    if b is not None:
        y = y + b
    return y


def dense_backward(x, w, gy):
    gx = gy @ w.T
    gw = x.T @ gy
    gb = gy.sum(axis=0)
    return gx, gw, gb


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(x_pre, gy):
    return np.where(x_pre > 0.0, gy, 0.0)


def softmax_xent(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. logits."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    probs = expd / expd.sum(axis=1, keepdims=True)
    picked = shifted[np.arange(n), labels] - np.log(expd.sum(axis=1))
    loss = -picked.mean()
    dlogits = probs
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return float(loss), dlogits
