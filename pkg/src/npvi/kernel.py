"""RBF kernel evaluation and kernel matrix construction.

The covariance between two locations x, x' is

    k(x, x') = signal_variance * exp(-||x - x'||^2 / (2 * length_scale^2))

with a small jitter added on diagonals (and on self-covariances) so that
the per-point conditioning solves stay positive definite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError


@dataclass(frozen=True)
class KernelConfig:
    """RBF kernel hyperparameters.

    jitter defaults to 1e-6 * signal_variance; it is included in every
    self-covariance, i.e. k(x, x) = signal_variance + jitter.
    """

    length_scale: float
    signal_variance: float = 1.0
    jitter: float = field(default=-1.0)

    def __post_init__(self):
        if not (self.length_scale > 0):
            raise InputError(f"length_scale must be positive, got {self.length_scale}")
        if not (self.signal_variance > 0):
            raise InputError(f"signal_variance must be positive, got {self.signal_variance}")
        if self.jitter < 0:
            if self.jitter == -1.0:
                object.__setattr__(self, "jitter", 1e-6 * self.signal_variance)
            else:
                raise InputError(f"jitter must be non-negative, got {self.jitter}")


def _as_points(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[None, :]
    if A.ndim != 2:
        raise InputError(f"expected points of shape (n, d), got shape {A.shape}")
    return A


def rbf(x, x2, cfg: KernelConfig) -> float:
    """Covariance between two single points.

    Jitter is added only when ``x2`` is the identical object as ``x``
    (a self-covariance), never for merely equal coordinates.
    """
    same = x2 is x
    xa = np.asarray(x, dtype=float).ravel()
    xb = np.asarray(x2, dtype=float).ravel()
    if xa.shape != xb.shape:
        raise InputError(f"dimension mismatch: {xa.shape} vs {xb.shape}")
    d2 = float(np.sum((xa - xb) ** 2))
    val = cfg.signal_variance * np.exp(-d2 / (2.0 * cfg.length_scale**2))
    if same:
        val += cfg.jitter
    return float(val)


def kernel_matrix(A, B, cfg: KernelConfig) -> np.ndarray:
    """Dense covariance matrix between two point lists.

    When ``B`` is ``A`` itself (or None), jitter is added to the diagonal
    and the result is exactly symmetric.
    """
    same = B is None or B is A
    A = _as_points(A)
    B = A if same else _as_points(B)
    if A.shape[1] != B.shape[1]:
        raise InputError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    # ||a-b||^2 via the dot-product expansion; clamp tiny negatives.
    d2 = -2.0 * (A @ B.T)
    d2 += np.sum(A * A, axis=1)[:, None]
    d2 += np.sum(B * B, axis=1)[None, :]
    np.maximum(d2, 0.0, out=d2)
    if same:
        d2 = 0.5 * (d2 + d2.T)  # bitwise symmetry
        np.fill_diagonal(d2, 0.0)
    K = cfg.signal_variance * np.exp(-d2 / (2.0 * cfg.length_scale**2))
    if same:
        K[np.diag_indices_from(K)] += cfg.jitter
    return K


def kernel_vector(A, x, cfg: KernelConfig) -> np.ndarray:
    """Covariances k(A_i, x) for one query point (no jitter)."""
    A = _as_points(A)
    x = np.asarray(x, dtype=float).ravel()
    if A.shape[1] != x.shape[0]:
        raise InputError(f"dimension mismatch: {A.shape[1]} vs {x.shape[0]}")
    d2 = np.sum((A - x[None, :]) ** 2, axis=1)
    return cfg.signal_variance * np.exp(-d2 / (2.0 * cfg.length_scale**2))
