"""Gradient-leakage attacks against dense first layers.

A relu neuron that fired for exactly one sample in a batch leaks that sample
through the layer's averaged gradients: the weight-gradient column divided
by the bias-gradient entry reproduces the input exactly, because the shared
per-neuron factor (and the batch-mean scaling) cancels in the ratio.

The passive attack just reads those ratios off an uploaded update. The
active attack plants "trap" first-layer weights whose biases sit at a high
percentile of the pre-activation distribution, so each neuron fires for
roughly one sample per batch and the ratios collapse to single inputs.

Weight layout convention: dense weights are (in_dim, n_neurons); neuron i
owns column i.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from statistics import NormalDist
from typing import Optional, Sequence

import numpy as np

from . import nn


class DeadNeuronError(ValueError):
    """Requested neuron has a vanished bias gradient: nothing to invert."""


@dataclass(frozen=True)
class TrapWeights:
    """Adversarial first-layer parameters plus the calibration that built them."""

    weights: np.ndarray
    biases: np.ndarray
    bias_percentile: float
    scale: float

    def graft(self, params: nn.ParamSet, layer_id: str = "dense00") -> nn.ParamSet:
        """Victim parameters with the first dense layer replaced by the trap."""
        entries = {k: v for k, v in params.items()}
        w, b = entries[layer_id]
        if w.shape != self.weights.shape:
            raise ValueError(f"trap shape {self.weights.shape} vs layer {w.shape}")
        entries[layer_id] = (self.weights.copy(), self.biases.copy())
        return nn.ParamSet(entries)


@dataclass(frozen=True)
class ReconstructionResult:
    samples: np.ndarray
    neurons: np.ndarray
    residuals: Optional[np.ndarray] = None
    matched: Optional[np.ndarray] = None


def fired_neurons(weights: np.ndarray, biases: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Indices i with x . w_i + b_i strictly positive."""
    pre = np.asarray(x, dtype=np.float64) @ weights + biases
    return np.flatnonzero(pre > 0.0)


def reconstruct_from_fc_grads(
    dW: np.ndarray, db: np.ndarray, neuron: int, tol: float = 1e-12
) -> np.ndarray:
    """Recover the input as weight-gradient column / bias-gradient entry."""
    if abs(db[neuron]) <= tol:
        raise DeadNeuronError(
            f"neuron {neuron}: bias gradient {db[neuron]:.3e} below {tol:.0e}; "
            "not fired or gradient vanished"
        )
    return dW[:, neuron] / db[neuron]


def recover_all(dW: np.ndarray, db: np.ndarray, tol: float = 1e-12) -> ReconstructionResult:
    """Reconstruction from every neuron with a usable bias gradient."""
    neurons = np.flatnonzero(np.abs(db) > tol)
    if neurons.size == 0:
        return ReconstructionResult(
            samples=np.zeros((0, dW.shape[0])), neurons=neurons
        )
    samples = (dW[:, neurons] / db[neurons]).T
    return ReconstructionResult(samples=samples, neurons=neurons)


def first_layer_grads(
    net: nn.NetworkSpec, params: nn.ParamSet, batch: np.ndarray, labels: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """The victim-side averaged cross-entropy gradients of the first dense layer."""
    _, grads = nn.loss_and_grad(net, params, batch, labels)
    dW, db = grads["dense00"]
    if db is None:
        raise ValueError("first layer has no bias; the ratio attack needs one")
    return dW, db


def trap_weight_init(
    input_dim: int,
    n_neurons: int,
    data_mean: float,
    data_std: float,
    bias_percentile: float,
    rng: np.random.Generator,
) -> TrapWeights:
    """Gaussian rows scaled by 1/sqrt(input_dim); biases at the negated percentile.

    Under inputs with i.i.d. coordinates of the given mean/std, neuron i's
    pre-activation x . w_i is Gaussian, so placing b_i at minus its
    bias_percentile quantile makes the neuron fire for about
    (1 - bias_percentile) of inputs. With the percentile near 1 - 1/batch,
    each neuron activates roughly one sample per batch.
    """
    if not 0.0 < bias_percentile < 1.0:
        raise ValueError("bias_percentile must lie in (0, 1)")
    scale = 1.0 / np.sqrt(input_dim)
    weights = rng.normal(0.0, scale, size=(input_dim, n_neurons))
    z = NormalDist().inv_cdf(bias_percentile)
    mu = data_mean * weights.sum(axis=0)
    sd = data_std * np.linalg.norm(weights, axis=0)
    biases = -(mu + z * sd)
    return TrapWeights(
        weights=weights, biases=biases, bias_percentile=bias_percentile, scale=scale
    )


def exact_recoveries(
    recovered: np.ndarray, batch: np.ndarray, rel_tol: float = 1e-6
) -> set[int]:
    """Distinct batch rows reproduced by some recovered vector within rel_tol."""
    matched: set[int] = set()
    for r in np.atleast_2d(recovered):
        if r.size == 0:
            continue
        diffs = np.linalg.norm(batch - r, axis=1)
        scales = np.maximum(np.linalg.norm(batch, axis=1), 1e-12)
        hits = np.flatnonzero(diffs / scales <= rel_tol)
        matched.update(int(h) for h in hits)
    return matched


@dataclass(frozen=True)
class LeakageReport:
    neurons: np.ndarray
    nn_distance_secret: np.ndarray
    nn_distance_synthetic: np.ndarray
    match_rate_secret: float
    match_rate_synthetic: float
    match_tol: float


def evaluate_leakage(
    result: ReconstructionResult,
    secret_samples: np.ndarray,
    synthetic_samples: np.ndarray,
    match_tol: float,
) -> LeakageReport:
    """Nearest-neighbour distances of every recovered sample to both data pools."""
    if secret_samples.shape[0] == 0 or synthetic_samples.shape[0] == 0:
        raise ValueError("reference sets must be non-empty")
    recovered = result.samples
    if recovered.shape[0] == 0:
        empty = np.zeros(0)
        return LeakageReport(result.neurons, empty, empty, 0.0, 0.0, match_tol)
    d_secret = np.array(
        [np.linalg.norm(secret_samples - r, axis=1).min() for r in recovered]
    )
    d_synth = np.array(
        [np.linalg.norm(synthetic_samples - r, axis=1).min() for r in recovered]
    )
    return LeakageReport(
        neurons=result.neurons,
        nn_distance_secret=d_secret,
        nn_distance_synthetic=d_synth,
        match_rate_secret=float(np.mean(d_secret <= match_tol)),
        match_rate_synthetic=float(np.mean(d_synth <= match_tol)),
        match_tol=match_tol,
    )


def leakage_csv(report: LeakageReport, path, residuals: Optional[np.ndarray] = None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["neuron", "residual", "nn_distance_secret", "nn_distance_synthetic"])
        for i, neuron in enumerate(report.neurons):
            res = "" if residuals is None else repr(float(residuals[i]))
            writer.writerow(
                [
                    int(neuron),
                    res,
                    repr(float(report.nn_distance_secret[i])),
                    repr(float(report.nn_distance_synthetic[i])),
                ]
            )
