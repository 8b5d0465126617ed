"""Parent DAG construction and Vecchia prior conditionals.

Each point i gets an ordered parent set alpha(i) of lower-index points,
|alpha(i)| = min(k, i) with 0-based indexing. Conditioning the GP prior on
the parents gives per-point regression weights b_i and conditional
variances, from

    b_i = Sigma_{i,a} Sigma_{a,a}^{-1}
    var_{i|a} = Sigma_{ii} - Sigma_{i,a} b_i^T

which are precomputed once before any optimization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial import cKDTree

from .errors import InputError, NumericalError
from .kernel import KernelConfig, kernel_matrix, kernel_vector

# Instances up to this size use fully materialized distance matrices, which
# makes tie handling exactly lexicographic (distance, then index).
_BRUTE_LIMIT = 2048


def _check_points(X) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[0] == 0:
        raise InputError("need a non-empty (n, d) array of points")
    if not np.all(np.isfinite(X)):
        raise InputError("points contain non-finite coordinates")
    return X


class KnnIndex:
    """Exact k-nearest-neighbor queries under Euclidean distance.

    Backed by a k-d tree; ties are broken toward the smaller index so that
    results match a lexicographic (squared distance, index) linear scan.
    """

    def __init__(self, X):
        self.points = _check_points(X)
        self.n = self.points.shape[0]
        self._tree = cKDTree(self.points)

    def query(self, x, k: int, exclude: int | None = None) -> np.ndarray:
        """Indices of the k nearest stored points, nearest first.

        ``exclude`` drops one stored index from consideration (used to skip
        the query point itself). Returns fewer than k indices only when the
        index does not hold enough points.
        """
        x = np.asarray(x, dtype=float).ravel()
        avail = self.n - (1 if exclude is not None else 0)
        k = min(k, avail)
        if k <= 0:
            return np.empty(0, dtype=np.int64)
        kq = min(k + (1 if exclude is not None else 0), self.n)
        d, _ = self._tree.query(x, kq)
        d = np.atleast_1d(d)
        r = d[-1] * (1.0 + 1e-9) + 1e-300
        cand = np.asarray(self._tree.query_ball_point(x, r), dtype=np.int64)
        if exclude is not None:
            cand = cand[cand != exclude]
        d2 = np.sum((self.points[cand] - x[None, :]) ** 2, axis=1)
        order = np.lexsort((cand, d2))
        return cand[order[:k]]

    def query_many(self, Q, k: int) -> np.ndarray:
        """Row-per-query k-NN with the same tie rule; no exclusion."""
        Q = _check_points(Q)
        k = min(k, self.n)
        kq = min(k + 1, self.n)
        d, idx = self._tree.query(Q, kq)
        d = d.reshape(len(Q), kq)
        idx = idx.reshape(len(Q), kq)
        # re-sort each row lexicographically on (recomputed d^2, index)
        d2 = np.sum((self.points[idx] - Q[:, None, :]) ** 2, axis=2)
        rows = np.repeat(np.arange(len(Q)), kq)
        order = np.lexsort((idx.ravel(), d2.ravel(), rows))
        out = idx.ravel()[order].reshape(len(Q), kq)[:, :k]
        if kq > k:
            # rows where the k-th and (k+1)-th distances tie need the exact path
            tied = d2[np.arange(len(Q)), np.argsort(d2, axis=1)[:, k - 1]] * (1 + 1e-9) >= np.sort(d2, axis=1)[:, k]
            for t in np.nonzero(tied)[0]:
                out[t] = self.query(Q[t], k)
        return out


@dataclass
class NeighborGraph:
    """Parent DAG over the (possibly permuted) data ordering.

    parents[i] is the ascending array alpha(i) with all entries < i.
    ``order`` maps graph position -> original row of the input points.
    """

    n: int
    k: int
    parents: list
    order: np.ndarray

    def beta(self, i: int) -> np.ndarray:
        """alpha(i) followed by i itself (the support of row i)."""
        return np.append(self.parents[i], i).astype(np.int64)

    def validate(self):
        for i in range(self.n):
            a = self.parents[i]
            if len(a) != min(self.k, i):
                raise NumericalError(f"parent count invariant broken at index {i}")
            if len(a) and (a[-1] >= i or np.any(np.diff(a) <= 0)):
                raise NumericalError(f"parent ordering invariant broken at index {i}")


def build_dag(X, k: int, order=None) -> NeighborGraph:
    """Three-step parent construction on the k-NN graph.

    1. connect i and j whenever either is among the other's k nearest;
    2. orient every edge from the smaller to the larger index;
    3. trim surplus parents (largest indices first) and fill deficits with
       the nearest lower-index non-parents, so |alpha(i)| = min(k, i).
    """
    X = _check_points(X)
    n = X.shape[0]
    if k < 1:
        raise InputError(f"neighbor budget k must be >= 1, got {k}")
    if order is not None:
        order = np.asarray(order, dtype=np.int64)
        if sorted(order.tolist()) != list(range(n)):
            raise InputError("order must be a permutation of 0..n-1")
        X = X[order]
    else:
        order = np.arange(n, dtype=np.int64)

    if n <= _BRUTE_LIMIT:
        parents = _build_parents_brute(X, k)
    else:
        parents = _build_parents_tree(X, k)
    g = NeighborGraph(n=n, k=k, parents=parents, order=order)
    g.validate()
    return g


def _build_parents_brute(X: np.ndarray, k: int) -> list:
    n = X.shape[0]
    d2 = -2.0 * (X @ X.T)
    sq = np.sum(X * X, axis=1)
    d2 += sq[:, None]
    d2 += sq[None, :]
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, np.inf)
    kq = min(k, n - 1)
    # lexicographic (d2, index) ordering per row
    idx = np.argsort(d2, axis=1, kind="stable")[:, :kq] if n > 1 else np.empty((1, 0), np.int64)
    if n > 1:
        rows = np.repeat(np.arange(n), kq)
        dd = d2[rows, idx.ravel()]
        o = np.lexsort((idx.ravel(), dd, rows))
        idx = idx.ravel()[o].reshape(n, kq)
        # argsort alone is not tie-exact; redo rows whose cut boundary ties
        full = np.sort(d2, axis=1)
        if kq < n - 1:
            tied = full[:, kq - 1] * (1 + 1e-9) >= full[:, kq]
        else:
            tied = np.zeros(n, dtype=bool)
        for t in np.nonzero(tied)[0]:
            cand = np.arange(n)[np.arange(n) != t]
            o = np.lexsort((cand, d2[t, cand]))
            idx[t] = cand[o[:kq]]
    sets = _orient_edges(idx, n)
    out = []
    for i in range(n):
        target = min(k, i)
        cur = sorted(sets[i])
        if len(cur) > target:
            cur = cur[:target]
        elif len(cur) < target:
            lower = np.arange(i)
            mask = np.ones(i, dtype=bool)
            mask[list(sets[i] & set(range(i)))] = False
            cand = lower[mask]
            o = np.lexsort((cand, d2[i, cand]))
            cur = sorted(cur + cand[o[: target - len(cur)]].tolist())
        out.append(np.asarray(cur, dtype=np.int64))
    return out


def _orient_edges(nbr: np.ndarray, n: int) -> list:
    """Undirected k-NN edges oriented small -> large index, as parent sets."""
    kq = nbr.shape[1]
    rows = np.repeat(np.arange(n, dtype=np.int64), kq)
    cols = nbr.ravel().astype(np.int64)
    lo = np.minimum(rows, cols)
    hi = np.maximum(rows, cols)
    keys = np.unique(hi * n + lo)
    sets = [set() for _ in range(n)]
    for key in keys:
        sets[int(key // n)].add(int(key % n))
    return sets


def _build_parents_tree(X: np.ndarray, k: int) -> list:
    n = X.shape[0]
    tree = cKDTree(X)
    _, idx = tree.query(X, k + 1)
    # drop self from each row (self is at distance 0 but may tie with duplicates)
    nbr = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        row = idx[i][idx[i] != i]
        if len(row) < k:  # duplicate coordinates pushed self out of the row
            row = np.append(row, idx[i][idx[i] == i][1:])
        nbr[i] = row[:k]
    sets = _orient_edges(nbr, n)

    out: list = [None] * n
    block = _BRUTE_LIMIT
    prefix_tree = None
    prefix_len = 0
    for lo_blk in range(0, n, block):
        hi_blk = min(lo_blk + block, n)
        if lo_blk > 0:
            prefix_tree = cKDTree(X[:lo_blk])
            prefix_len = lo_blk
        for i in range(lo_blk, hi_blk):
            target = min(k, i)
            cur = sorted(sets[i])
            if len(cur) > target:
                cur = cur[:target]
            elif len(cur) < target:
                cur = _fill_deficit(X, i, cur, target, prefix_tree, prefix_len, lo_blk)
            out[i] = np.asarray(cur, dtype=np.int64)
    return out


def _fill_deficit(X, i, cur, target, prefix_tree, prefix_len, lo_blk) -> list:
    """Nearest lower-index points not already in the parent set."""
    have = set(cur)
    need = target - len(cur)
    cand = np.arange(lo_blk, i, dtype=np.int64)  # in-block predecessors: scan all
    if prefix_len:
        kq = min(need + len(cur) + 8, prefix_len)
        while True:
            _, pidx = prefix_tree.query(X[i], kq)
            pidx = np.atleast_1d(pidx).astype(np.int64)
            fresh = sum(1 for j in pidx if j not in have)
            if fresh >= need or kq == prefix_len:
                break
            kq = min(2 * kq, prefix_len)
        cand = np.concatenate([pidx, cand])
    mask = np.fromiter((j not in have for j in cand), dtype=bool, count=len(cand))
    cand = cand[mask]
    d2 = np.sum((X[cand] - X[i][None, :]) ** 2, axis=1)
    o = np.lexsort((cand, d2))
    return sorted(cur + cand[o[:need]].tolist())


@dataclass
class VecchiaConditionals:
    """Per-point prior regression weights and conditional variances."""

    b: list
    cond_var: np.ndarray
    _plans: dict = field(default_factory=dict, repr=False)

    def plan(self, graph: NeighborGraph, i: int):
        """Cached scatter/gather plan for the sparse row combination at i."""
        p = self._plans.get(i)
        if p is None:
            p = _CrossPlan(graph, self, i)
            self._plans[i] = p
        return p


class _CrossPlan:
    """Index bookkeeping for Q_i = L_i - b_i^T L_{alpha(i)}.

    Concatenates, over the rows beta(i), each row's support positions inside
    the union of supports, so the combination is pure gather/scatter work.
    """

    __slots__ = ("alpha", "beta", "union", "rows_c", "slot_c", "pos_c",
                 "coeff", "coeff_c", "usize", "b", "cond_var")

    def __init__(self, graph: NeighborGraph, cond: VecchiaConditionals, i: int):
        self.alpha = graph.parents[i]
        self.beta = graph.beta(i)
        supports = [graph.beta(int(j)) for j in self.beta]
        counts = np.array([len(s) for s in supports])
        self.union = np.unique(np.concatenate(supports))
        self.usize = len(self.union)
        self.rows_c = np.repeat(self.beta, counts)
        kdiag = graph.k  # diagonal values live in slot K of padded row storage
        self.slot_c = np.concatenate(
            [np.append(np.arange(len(s) - 1), kdiag) for s in supports]
        ).astype(np.int64)
        self.pos_c = np.concatenate(
            [np.searchsorted(self.union, s) for s in supports]
        ).astype(np.int64)
        self.coeff = np.append(-cond.b[i], 1.0)
        self.coeff_c = np.repeat(self.coeff, counts)
        self.b = cond.b[i]
        self.cond_var = float(cond.cond_var[i])


def vecchia_conditionals(graph: NeighborGraph, X, cfg: KernelConfig) -> VecchiaConditionals:
    """Solve the per-point K x K systems Sigma_{a,a} b^T = Sigma_{a,i}."""
    X = _check_points(X)[graph.order]
    n = graph.n
    b = []
    cv = np.empty(n)
    sii = cfg.signal_variance + cfg.jitter
    for i in range(n):
        a = graph.parents[i]
        if len(a) == 0:
            b.append(np.zeros(0))
            cv[i] = sii
            continue
        Saa = kernel_matrix(X[a], None, cfg)
        Sai = kernel_vector(X[a], X[i], cfg)
        try:
            bi = cho_solve(cho_factor(Saa, lower=True), Sai)
        except np.linalg.LinAlgError as e:
            raise NumericalError(f"singular parent covariance block at index {i}") from e
        v = sii - bi @ Sai
        if not (v > 0):
            raise NumericalError(f"non-positive conditional variance at index {i}: {v}")
        b.append(bi)
        cv[i] = v
    return VecchiaConditionals(b=b, cond_var=cv)


def vecchia_log_prior(f, graph: NeighborGraph, cond: VecchiaConditionals) -> float:
    """log of the factorized prior prod_i N(f_i; b_i^T f_a, var_{i|a})."""
    f = np.asarray(f, dtype=float)
    if not np.all(np.isfinite(f)):
        raise InputError("f contains non-finite values")
    total = 0.0
    for i in range(graph.n):
        a = graph.parents[i]
        m = cond.b[i] @ f[a] if len(a) else 0.0
        v = cond.cond_var[i]
        total += -0.5 * np.log(2.0 * np.pi * v) - (f[i] - m) ** 2 / (2.0 * v)
    return float(total)


def sample_vecchia_prior(graph: NeighborGraph, cond: VecchiaConditionals, eps) -> np.ndarray:
    """Ancestral prior sample f_i = b_i^T f_a + sqrt(var_{i|a}) eps_i."""
    eps = np.asarray(eps, dtype=float)
    sd = np.sqrt(cond.cond_var)
    f = np.empty(graph.n)
    for i in range(graph.n):
        a = graph.parents[i]
        m = cond.b[i] @ f[a] if len(a) else 0.0
        f[i] = m + sd[i] * eps[i]
    return f
