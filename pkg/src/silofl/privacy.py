"""Differential-privacy mechanisms and Renyi-DP accounting.

Gradient vectors are compressed to top-k sign form, summed across teachers
under Gaussian noise, and thresholded into consensus votes. Each noisy sum
is a Gaussian mechanism over a function of L2 sensitivity 2*sqrt(k), charged
to a Renyi-DP ledger and converted to an (epsilon, delta) guarantee by
taking the tightest order in the ledger's grid.

Mechanisms are pure given an explicit RNG; the accountant is a value updated
by pure transitions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class BudgetExhaustedError(RuntimeError):
    """A requested aggregation would push spent epsilon past its target."""


@dataclass(frozen=True)
class SparseSignVec:
    """k-sparse sign vector: entries are +-1 at strictly increasing indices."""

    dim: int
    indices: np.ndarray
    signs: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        sgn = np.asarray(self.signs, dtype=np.int8)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "signs", sgn)
        if idx.shape != sgn.shape or idx.ndim != 1:
            raise ValueError("indices and signs must be 1-d and aligned")
        if idx.size > self.dim:
            raise ValueError("more entries than dimensions")
        if idx.size and (idx[0] < 0 or idx[-1] >= self.dim or np.any(np.diff(idx) <= 0)):
            raise ValueError("indices must be strictly increasing within [0, dim)")
        if not np.all(np.abs(sgn) == 1):
            raise ValueError("signs must be +-1")

    @property
    def k(self) -> int:
        return int(self.indices.size)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.signs
        return out


def topk_sign_compress(
    g: np.ndarray,
    k: int,
    clip_norm: float = 1.0,
    rng: Optional[np.random.Generator] = None,
    stochastic: bool = True,
) -> SparseSignVec:
    """L2-clip, keep the k largest-magnitude coordinates, quantize to signs.

    The clipped vector is normalized by clip_norm so every coordinate lies in
    [-1, 1]; a kept coordinate v becomes +1 with probability (1+v)/2 in
    stochastic mode, or sign(v) (ties to +1) in deterministic mode. Magnitude
    ties in the top-k selection break toward the lowest index.
    """
    g = np.asarray(g, dtype=np.float64).ravel()
    dim = g.size
    if not 1 <= k <= dim:
        raise ValueError(f"k must lie in [1, {dim}]")
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    norm = float(np.linalg.norm(g))
    normalized = g / max(norm, clip_norm)
    order = np.argsort(-np.abs(normalized), kind="stable")
    keep = np.sort(order[:k])
    vals = normalized[keep]
    if stochastic:
        if rng is None:
            raise ValueError("stochastic quantization needs an rng")
        signs = np.where(rng.random(k) < (1.0 + vals) / 2.0, 1, -1)
    else:
        signs = np.where(vals >= 0.0, 1, -1)
    return SparseSignVec(dim=dim, indices=keep, signs=signs.astype(np.int8))


def dp_sum_aggregate(
    vectors: Sequence[SparseSignVec],
    sigma: float,
    rng: Optional[np.random.Generator] = None,
    dim: Optional[int] = None,
) -> np.ndarray:
    """Coordinatewise vote sum plus i.i.d. N(0, sigma^2) noise per coordinate.

    `dim` is required only when `vectors` is empty.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if vectors:
        dims = {v.dim for v in vectors}
        if len(dims) != 1:
            raise ValueError(f"mixed dimensions in aggregation: {sorted(dims)}")
        dim = dims.pop()
    elif dim is None:
        raise ValueError("empty aggregation needs an explicit dim")
    total = np.zeros(dim)
    for v in vectors:
        total[v.indices] += v.signs
    if sigma > 0:
        if rng is None:
            raise ValueError("noisy aggregation needs an rng")
        total = total + rng.normal(0.0, sigma, size=dim)
    return total


def threshold_votes(noisy_sum: np.ndarray, beta: float, n_teachers: int) -> np.ndarray:
    """Keep the sign where |entry| >= beta * n_teachers (inclusive), else 0."""
    if n_teachers < 1:
        raise ValueError("need at least one teacher")
    if not 0.0 < beta <= 1.0:
        raise ValueError("beta must lie in (0, 1]")
    noisy_sum = np.asarray(noisy_sum, dtype=np.float64)
    cut = beta * n_teachers
    return np.where(np.abs(noisy_sum) >= cut, np.sign(noisy_sum), 0.0)


def l2_sensitivity_topk(k: int) -> float:
    """L2 sensitivity of the teacher-sum of k-sparse sign vectors: 2*sqrt(k)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return 2.0 * math.sqrt(k)


def rdp_gaussian(lam: float, sensitivity: float, sigma: float) -> float:
    """Renyi-DP alpha of order lam for the Gaussian mechanism: s^2*lam/(2*sigma^2)."""
    if lam <= 1:
        raise ValueError("order must exceed 1")
    if sensitivity < 0:
        raise ValueError("sensitivity must be non-negative")
    if sigma <= 0:
        raise ValueError("sigma must be positive (sigma=0 leaks everything)")
    return sensitivity * sensitivity * lam / (2.0 * sigma * sigma)


def rdp_to_dp(lam: float, alpha: float, delta: float) -> float:
    """(lam, alpha)-RDP implies (alpha + ln(1/delta)/(lam-1), delta)-DP."""
    if lam <= 1:
        raise ValueError("order must exceed 1")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return alpha + math.log(1.0 / delta) / (lam - 1.0)


DEFAULT_LAMBDA_GRID: tuple[float, ...] = (1.5,) + tuple(float(x) for x in range(2, 65)) + (128.0, 256.0)


@dataclass(frozen=True)
class RdpAccountant:
    """Per-order accumulated Renyi divergence bounds and the target delta."""

    lambda_grid: tuple[float, ...]
    totals: tuple[float, ...]
    delta: float

    def __post_init__(self):
        if any(l <= 1 for l in self.lambda_grid):
            raise ValueError("all orders must exceed 1")
        if len(self.lambda_grid) != len(self.totals):
            raise ValueError("totals must align with the grid")
        if any(t < 0 for t in self.totals):
            raise ValueError("totals must be non-negative")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")


def fresh_accountant(delta: float, lambda_grid: Sequence[float] = DEFAULT_LAMBDA_GRID) -> RdpAccountant:
    grid = tuple(float(l) for l in lambda_grid)
    return RdpAccountant(lambda_grid=grid, totals=(0.0,) * len(grid), delta=delta)


def accountant_compose(
    acc: RdpAccountant, alpha_per_step: Callable[[float], float], steps: int
) -> RdpAccountant:
    """Additive composition: totals[l] += steps * alpha_per_step(l)."""
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if steps == 0:
        return acc
    new_totals = tuple(t + steps * alpha_per_step(l) for l, t in zip(acc.lambda_grid, acc.totals))
    return RdpAccountant(lambda_grid=acc.lambda_grid, totals=new_totals, delta=acc.delta)


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")


def best_epsilon(acc: RdpAccountant) -> PrivacyBudget:
    """Tightest (epsilon, delta) conversion over the accountant's order grid."""
    if not acc.lambda_grid:
        raise ValueError("empty order grid")
    eps = min(rdp_to_dp(l, t, acc.delta) for l, t in zip(acc.lambda_grid, acc.totals))
    return PrivacyBudget(epsilon=eps, delta=acc.delta)


def save_accountant(acc: RdpAccountant, path, extra: Optional[dict] = None) -> None:
    """Audit file: the grid, totals, delta, and any mechanism parameters."""
    payload = {
        "lambda_grid": list(acc.lambda_grid),
        "totals": list(acc.totals),
        "delta": acc.delta,
    }
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_accountant(path) -> tuple[RdpAccountant, dict]:
    with open(path) as fh:
        payload = json.load(fh)
    acc = RdpAccountant(
        lambda_grid=tuple(payload.pop("lambda_grid")),
        totals=tuple(payload.pop("totals")),
        delta=payload.pop("delta"),
    )
    return acc, payload
