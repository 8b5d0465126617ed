"""The variational family q(f) = N(mu, L L^T) with a sparse triangular factor.

Row i of L has off-diagonal support alpha(i) and a positive diagonal stored
in log space, so the whole factor fits in an N x (K+1) table. Sampling any
marginal needs only the |alpha(i)|+1 noise coordinates of that row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NumericalError
from .neighbors import NeighborGraph


@dataclass
class VariationalParams:
    """mu, padded off-diagonal table, and log-diagonal of the factor L."""

    mu: np.ndarray       # (n,)
    off: np.ndarray      # (n, k); row i uses the first |alpha(i)| slots
    logdiag: np.ndarray  # (n,); L_ii = exp(logdiag_i)

    @classmethod
    def from_prior(cls, graph: NeighborGraph, cond) -> "VariationalParams":
        """Start q at the factorized prior widths: L_ii = sqrt(var_{i|a})."""
        return cls(
            mu=np.zeros(graph.n),
            off=np.zeros((graph.n, graph.k)),
            logdiag=0.5 * np.log(cond.cond_var.copy()),
        )

    @property
    def n(self) -> int:
        return len(self.mu)

    def ldiag(self) -> np.ndarray:
        return np.exp(self.logdiag)

    def row_values(self, graph: NeighborGraph, i: int) -> np.ndarray:
        """Active entries of row i ordered like beta(i) (parents, then i)."""
        m = len(graph.parents[i])
        out = np.empty(m + 1)
        out[:m] = self.off[i, :m]
        out[m] = np.exp(self.logdiag[i])
        return out

    def copy(self) -> "VariationalParams":
        return VariationalParams(self.mu.copy(), self.off.copy(), self.logdiag.copy())


def n_free_parameters(graph: NeighborGraph) -> int:
    """Active entries of L: N(K+1) - K(K+1)/2 once N > K."""
    return sum(min(graph.k, i) + 1 for i in range(graph.n))


def sample_marginal(i: int, params: VariationalParams, graph: NeighborGraph, eps) -> float:
    """f_i = mu_i + L_{i,alpha(i)} eps_alpha + L_ii eps_i for given noise.

    ``eps`` holds the parent-slot draws first (in alpha(i) order) and the
    self draw last.
    """
    eps = np.asarray(eps, dtype=float)
    m = len(graph.parents[i])
    val = params.mu[i] + np.exp(params.logdiag[i]) * eps[m]
    if m:
        val += params.off[i, :m] @ eps[:m]
    return float(val)


def sample_joint(params: VariationalParams, graph: NeighborGraph, eps) -> np.ndarray:
    """f = mu + L eps using the sparse rows; eps indexed by data position."""
    eps = np.asarray(eps, dtype=float)
    f = params.mu + np.exp(params.logdiag) * eps
    for i in range(graph.n):
        a = graph.parents[i]
        if len(a):
            f[i] += params.off[i, : len(a)] @ eps[a]
    return f


def covariance_entry(i: int, j: int, params: VariationalParams, graph: NeighborGraph) -> float:
    """(L L^T)_{ij} via the intersection of the two row supports."""
    bi, bj = graph.beta(i), graph.beta(j)
    _, ii, jj = np.intersect1d(bi, bj, assume_unique=True, return_indices=True)
    if len(ii) == 0:
        return 0.0
    vi = params.row_values(graph, i)
    vj = params.row_values(graph, j)
    return float(vi[ii] @ vj[jj])


def match_posterior_rows(Vstar, graph: NeighborGraph) -> VariationalParams:
    """Build L row by row so (L L^T)_{ij} = Vstar_{ij} on every graph edge.

    Off-diagonals of row i come from the triangular solve on the already
    constructed principal sub-block over alpha(i); the diagonal then pins
    the marginal variance. Raises when the residual variance is not
    positive (possible for ill-conditioned targets).
    """
    Vstar = np.asarray(Vstar, dtype=float)
    n = graph.n
    Ld = np.zeros((n, n))
    off = np.zeros((n, graph.k))
    logdiag = np.empty(n)
    for i in range(n):
        a = graph.parents[i]
        if len(a):
            sub = Ld[np.ix_(a, a)]
            if np.any(np.diag(sub) <= 0):
                raise NumericalError(f"singular principal sub-block at index {i}")
            x = solve_triangular(sub, Vstar[a, i], lower=True)
            off[i, : len(a)] = x
            Ld[i, a] = x
            d2 = Vstar[i, i] - x @ x
        else:
            d2 = Vstar[i, i]
        if not (d2 > 0):
            raise NumericalError(
                f"cannot match row {i}: residual variance {d2:.3e} is not positive"
            )
        Ld[i, i] = np.sqrt(d2)
        logdiag[i] = 0.5 * np.log(d2)
    return VariationalParams(mu=np.zeros(n), off=off, logdiag=logdiag)


def dense_factor(params: VariationalParams, graph: NeighborGraph) -> np.ndarray:
    """Materialize L as a dense lower-triangular matrix (oracle/test use)."""
    n = graph.n
    Ld = np.zeros((n, n))
    for i in range(n):
        a = graph.parents[i]
        Ld[i, a] = params.off[i, : len(a)]
        Ld[i, i] = np.exp(params.logdiag[i])
    return Ld
