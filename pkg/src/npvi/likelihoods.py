"""Observation noise models p(y | f) with log-density and f-derivative.

Supported kinds:
  poisson_softplus -- y ~ Poisson(softplus(f))
  lognormal        -- log y ~ N(f, sigma2), y > 0
  gaussian         -- y ~ N(f, sigma2)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .errors import InputError

KINDS = ("poisson_softplus", "lognormal", "gaussian")


@dataclass(frozen=True)
class LikelihoodModel:
    kind: str
    sigma2: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown likelihood kind {self.kind!r}; choose from {KINDS}")
        if self.kind != "poisson_softplus" and not (self.sigma2 > 0):
            raise InputError(f"sigma2 must be positive, got {self.sigma2}")


def link_softplus(f):
    """log(1 + exp(f)) in the overflow-safe branch form."""
    f = np.asarray(f, dtype=float)
    out = np.maximum(f, 0.0) + np.log1p(np.exp(-np.abs(f)))
    return out if out.ndim else float(out)


def _sigmoid(f):
    return np.where(f >= 0, 1.0 / (1.0 + np.exp(-f)), np.exp(f) / (1.0 + np.exp(f)))


def _log_softplus(f):
    # log(softplus(f)); for very negative f, softplus(f) ~ exp(f) so log ~ f
    f = np.asarray(f, dtype=float)
    small = f < -33.0
    sp = link_softplus(np.where(small, 0.0, f))
    return np.where(small, f, np.log(sp))


def validate_targets(model: LikelihoodModel, y):
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise InputError("targets contain non-finite values")
    if model.kind == "poisson_softplus":
        if np.any(y < 0) or np.any(y != np.floor(y)):
            raise InputError("poisson targets must be non-negative integers")
    elif model.kind == "lognormal":
        if np.any(y <= 0):
            raise InputError("lognormal targets must be strictly positive")
    return y


def log_prob(model: LikelihoodModel, y, f):
    """log p(y | f), vectorized over matching shapes of y and f."""
    y = validate_targets(model, y)
    f = np.asarray(f, dtype=float)
    if model.kind == "poisson_softplus":
        lam = link_softplus(f)
        loglam = _log_softplus(f)
        out = -lam + y * loglam - gammaln(y + 1.0)
    elif model.kind == "lognormal":
        ly = np.log(y)
        out = -0.5 * np.log(2.0 * np.pi * model.sigma2) - (ly - f) ** 2 / (2.0 * model.sigma2) - ly
    else:
        out = -0.5 * np.log(2.0 * np.pi * model.sigma2) - (y - f) ** 2 / (2.0 * model.sigma2)
    return out if np.ndim(out) else float(out)


def dlog_prob_df(model: LikelihoodModel, y, f):
    """Analytic d/df of log p(y | f)."""
    y = validate_targets(model, y)
    f = np.asarray(f, dtype=float)
    if model.kind == "poisson_softplus":
        # (y / lam - 1) * sigmoid(f), with y/lam * sigmoid computed in log space
        # so the f -> -inf limit (ratio -> 1) stays stable
        out = y * np.exp(-link_softplus(-f) - _log_softplus(f)) - _sigmoid(f)
    elif model.kind == "lognormal":
        out = (np.log(y) - f) / model.sigma2
    else:
        out = (y - f) / model.sigma2
    return out if np.ndim(out) else float(out)
