"""Desk-scale simulator for privacy-preserving personalized cross-silo federated learning.

Subpackages:
    nn          dense network core, optimizers, stabilization primitives
    privacy     gradient compression, noisy vote aggregation, RDP accounting
    datagen     teacher-ensemble DP generator training and synthesis
    federation  meta-learning federation loop and baselines
    attack      gradient-leakage reconstruction and trap-weight attacks
    data        dataset loading, non-IID partitioning, splits
    metrics     best-mean-test accuracy / macro-F1 / rank correlation
    harness     experiment runner, sweeps, reports
"""

__version__ = "0.1.0"

from ._kernels import BACKEND as kernel_backend  # noqa: F401
