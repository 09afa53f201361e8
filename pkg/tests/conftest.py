"""Shared oracles and helpers.

The oracles here are deliberately independent of the implementations they
check: cross-entropy is recomputed from logits with plain numpy, gradients
come from central finite differences over the forward pass only.
"""

import numpy as np
import pytest

from silofl import nn


def rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.max(np.abs(a - b) / denom)


def xent_from_logits(logits, labels):
    """Independent mean cross-entropy: explicit log-sum-exp over numpy ops."""
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(len(labels)), labels]
    return float(np.mean(lse - picked))


def fd_grads(spec, params, batch, labels, h=1e-5):
    """Central finite differences of the mean cross-entropy w.r.t. every parameter."""

    def loss_at(p):
        return xent_from_logits(nn.forward(spec, p, batch), labels)

    out = {}
    for lid, (w, b) in params.items():
        gw = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            wp = w.copy()
            wp[idx] += h
            plus = loss_at(_swap(params, lid, wp, b))
            wp[idx] -= 2 * h
            minus = loss_at(_swap(params, lid, wp, b))
            gw[idx] = (plus - minus) / (2 * h)
        gb = None
        if b is not None:
            gb = np.zeros_like(b)
            for idx in np.ndindex(b.shape):
                bp = b.copy()
                bp[idx] += h
                plus = loss_at(_swap(params, lid, w, bp))
                bp[idx] -= 2 * h
                minus = loss_at(_swap(params, lid, w, bp))
                gb[idx] = (plus - minus) / (2 * h)
        out[lid] = (gw, gb)
    return nn.ParamSet(out)


def _swap(params, lid, w, b):
    entries = {k: v for k, v in params.items()}
    entries[lid] = (w, b)
    return nn.ParamSet(entries)


def random_mlp(rng, max_layers=3, max_units=16, n_classes=None):
    """Random small classifier net plus matching params, batch, labels."""
    n_dense = int(rng.integers(1, max_layers + 1))
    dims = [int(rng.integers(2, max_units + 1)) for _ in range(n_dense + 1)]
    if n_classes is not None:
        dims[-1] = n_classes
    spec = nn.mlp(dims)
    params = nn.init_params(spec, rng)
    batch = rng.normal(size=(int(rng.integers(1, 5)), dims[0]))
    labels = rng.integers(0, dims[-1], size=batch.shape[0])
    return spec, params, batch, labels


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
