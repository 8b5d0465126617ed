"""Amortized inference: two small graph convolutional networks.

Each data point i carries a local graph over (i, alpha(i)) whose adjacency
is the prior covariance block with the first row zeroed past the diagonal
(breaking the symmetry between i and its parents):

    A = [Sigma_ii, 0; Sigma_{a,i}, Sigma_{a,a}],   Ahat = D^-1/2 A D^-1/2

with D the diagonal of row sums. Layers follow

    H^{l+1} = act(Ahat H^l W^l)

with ReLU on hidden layers and identity on the last; H^0 is the local
observation column. The mu network mean-pools its last layer; the L network
emits one value per node, softplus on the node-i output for the diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernel import KernelConfig, kernel_matrix, kernel_vector
from .likelihoods import link_softplus, _sigmoid
from .neighbors import NeighborGraph

HIDDEN_WIDTHS = (20, 10, 1)


@dataclass
class GCNWeights:
    """Per-layer weight matrices for the mu and L networks (no biases)."""

    mu_net: list
    l_net: list

    @classmethod
    def initialize(cls, rng, hidden=HIDDEN_WIDTHS) -> "GCNWeights":
        widths = (1,) + tuple(hidden)

        def glorot():
            return [
                rng.uniform(-np.sqrt(6.0 / (widths[l] + widths[l + 1])),
                            np.sqrt(6.0 / (widths[l] + widths[l + 1])),
                            size=(widths[l], widths[l + 1]))
                for l in range(len(widths) - 1)
            ]

        return cls(mu_net=glorot(), l_net=glorot())

    def copy(self) -> "GCNWeights":
        return GCNWeights([w.copy() for w in self.mu_net],
                          [w.copy() for w in self.l_net])

    def blocks(self):
        return [("mu_net", t, w) for t, w in enumerate(self.mu_net)] + \
               [("l_net", t, w) for t, w in enumerate(self.l_net)]


@dataclass
class LocalContext:
    adj_norm: np.ndarray  # (m+1, m+1) normalized asymmetric adjacency
    y_local: np.ndarray   # (m+1,) observations ordered (i, alpha ascending)


def build_local_context(i: int, graph: NeighborGraph, X, cfg: KernelConfig, y) -> LocalContext:
    """Assemble Ahat and the local observation vector for point i.

    Contexts shrink with |alpha(i)|; no zero padding (the layer weights act
    on the feature dimension only, so the network is size-agnostic).
    """
    X = np.asarray(X, dtype=float)[graph.order]
    y = np.asarray(y, dtype=float)[graph.order]
    a = graph.parents[i]
    m = len(a)
    A = np.zeros((m + 1, m + 1))
    A[0, 0] = cfg.signal_variance + cfg.jitter
    if m:
        A[1:, 0] = kernel_vector(X[a], X[i], cfg)
        A[1:, 1:] = kernel_matrix(X[a], None, cfg)
    rs = A.sum(axis=1)
    assert np.all(rs > 0), "row sums must be positive for an RBF adjacency"
    ds = 1.0 / np.sqrt(rs)
    return LocalContext(adj_norm=ds[:, None] * A * ds[None, :],
                        y_local=np.concatenate([[y[i]], y[a]]))


def forward_stack(net, adj, h0):
    """Batched layer pass. adj: (g,n,n), h0: (g,n,1) -> (activations, preacts)."""
    acts = [h0]
    pre = []
    h = h0
    last = len(net) - 1
    for l, w in enumerate(net):
        p = adj @ h @ w
        pre.append(p)
        h = np.maximum(p, 0.0) if l < last else p
        acts.append(h)
    return acts, pre


def backward_stack(net, adj, acts, pre, gout):
    """Reverse-mode pass; returns per-layer weight gradients."""
    dws = [None] * len(net)
    g = gout
    adj_t = np.transpose(adj, (0, 2, 1))
    for l in range(len(net) - 1, -1, -1):
        if l < len(net) - 1:
            g = g * (pre[l] > 0)
        ah = adj @ acts[l]
        dws[l] = np.einsum("gni,gnj->ij", ah, g)
        if l > 0:
            g = adj_t @ (g @ net[l].T)
    return dws


def gcn_forward(net, ctx: LocalContext) -> np.ndarray:
    """Final-layer activation, one value per local node."""
    acts, _ = forward_stack(net, ctx.adj_norm[None], ctx.y_local[None, :, None])
    return acts[-1][0, :, 0]


def infer_params(weights: GCNWeights, ctx: LocalContext):
    """(mu_i, row of L) from the two networks.

    mu_i mean-pools the mu network output. The L row is node-aligned:
    position 0 (node i) passes through softplus for the diagonal, the
    remaining entries are the off-diagonal values in parent order.
    """
    mu_out = gcn_forward(weights.mu_net, ctx)
    l_out = gcn_forward(weights.l_net, ctx)
    l_row = l_out.copy()
    l_row[0] = link_softplus(l_out[0])
    return float(mu_out.mean()), l_row


def gcn_backward(weights: GCNWeights, ctxs, upstream, caches=None):
    """Weight gradients for a batch of points.

    ``upstream`` holds one (d/d mu_i, d/d l_row_i) pair per context, with
    the l_row gradient in post-softplus units; the softplus and mean-pool
    chains are applied here. Returns (mu_net grads, l_net grads).
    """
    dmu = [np.zeros_like(w) for w in weights.mu_net]
    dl = [np.zeros_like(w) for w in weights.l_net]
    for t, ctx in enumerate(ctxs):
        adj = ctx.adj_norm[None]
        h0 = ctx.y_local[None, :, None]
        if caches is not None:
            (am, pm), (al, pl) = caches[t]
        else:
            am, pm = forward_stack(weights.mu_net, adj, h0)
            al, pl = forward_stack(weights.l_net, adj, h0)
        g_mu_i, g_lrow = upstream[t]
        nloc = len(ctx.y_local)
        gout = np.full((1, nloc, 1), g_mu_i / nloc)
        for l, dw in enumerate(backward_stack(weights.mu_net, adj, am, pm, gout)):
            dmu[l] += dw
        gout = np.asarray(g_lrow, dtype=float).copy()[None, :, None]
        raw0 = pl[-1][0, 0, 0]
        gout[0, 0, 0] *= _sigmoid(raw0)  # d softplus / d raw
        for l, dw in enumerate(backward_stack(weights.l_net, adj, al, pl, gout)):
            dl[l] += dw
    return dmu, dl


class ContextSet:
    """All local contexts of a training set, grouped by node count.

    Grouping lets the trainer run forward/backward passes as a handful of
    batched matmuls per step instead of one small product per row.
    """

    def __init__(self, graph: NeighborGraph, X, cfg: KernelConfig, y):
        self.graph = graph
        self.contexts = [build_local_context(i, graph, X, cfg, y)
                         for i in range(graph.n)]
        by_size: dict = {}
        for i, c in enumerate(self.contexts):
            by_size.setdefault(len(c.y_local), []).append(i)
        self.groups = {}
        self._loc = np.empty((graph.n, 2), dtype=np.int64)
        for nloc, idxs in by_size.items():
            idxs = np.asarray(idxs, dtype=np.int64)
            adj = np.stack([self.contexts[i].adj_norm for i in idxs])
            h0 = np.stack([self.contexts[i].y_local for i in idxs])[:, :, None]
            self.groups[nloc] = (idxs, adj, h0)
            self._loc[idxs, 0] = nloc
            self._loc[idxs, 1] = np.arange(len(idxs))

    def infer_all(self, weights: GCNWeights):
        """Materialize (mu, off, logdiag) for every point."""
        from .variational import VariationalParams

        n, k = self.graph.n, self.graph.k
        mu = np.zeros(n)
        off = np.zeros((n, k))
        logdiag = np.zeros(n)
        for nloc, (idxs, adj, h0) in self.groups.items():
            am, _ = forward_stack(weights.mu_net, adj, h0)
            al, _ = forward_stack(weights.l_net, adj, h0)
            mu[idxs] = am[-1][:, :, 0].mean(axis=1)
            raw = al[-1][:, 0, 0]
            logdiag[idxs] = np.log(link_softplus(raw))
            if nloc > 1:
                off[idxs, : nloc - 1] = al[-1][:, 1:, 0]
        return VariationalParams(mu=mu, off=off, logdiag=logdiag)

    def forward_rows(self, weights: GCNWeights, rows):
        """Forward passes for a set of rows; returns values and caches."""
        parts = {}
        order = np.argsort(self._loc[rows, 0], kind="stable")
        rows = np.asarray(rows)[order]
        sizes = self._loc[rows, 0]
        for nloc in np.unique(sizes):
            sel = rows[sizes == nloc]
            idxs, adj, h0 = self.groups[int(nloc)]
            pos = self._loc[sel, 1]
            a, h = adj[pos], h0[pos]
            am, pm = forward_stack(weights.mu_net, a, h)
            al, pl = forward_stack(weights.l_net, a, h)
            parts[int(nloc)] = (sel, a, (am, pm), (al, pl))
        return parts

    def write_rows(self, parts, params):
        """Scatter forwarded row values into a params scratch buffer."""
        for nloc, (sel, _, (am, _), (al, _)) in parts.items():
            params.mu[sel] = am[-1][:, :, 0].mean(axis=1)
            raw = al[-1][:, 0, 0]
            params.logdiag[sel] = np.log(link_softplus(raw))
            if nloc > 1:
                params.off[sel, : nloc - 1] = al[-1][:, 1:, 0]

    def backward_rows(self, weights: GCNWeights, parts, grads):
        """Chain sparse ELBO gradients into weight gradients.

        ``grads`` is a SparseGrads over exactly the forwarded rows (logdiag
        units for the diagonal; converted to raw units here).
        """
        dmu = [np.zeros_like(w) for w in weights.mu_net]
        dl = [np.zeros_like(w) for w in weights.l_net]
        for nloc, (sel, adj, (am, pm), (al, pl)) in parts.items():
            pos = np.searchsorted(grads.rows, sel)
            g_mu = grads.mu[pos]
            gout = np.repeat(g_mu[:, None, None] / nloc, nloc, axis=1)
            for l, dw in enumerate(backward_stack(weights.mu_net, adj, am, pm, gout)):
                dmu[l] += dw
            raw = al[-1][:, 0, 0]
            sp = link_softplus(raw)
            gout = np.zeros((len(sel), nloc, 1))
            gout[:, 0, 0] = grads.logdiag[pos] * _sigmoid(raw) / sp
            if nloc > 1:
                gout[:, 1:, 0] = grads.off[pos, : nloc - 1]
            for l, dw in enumerate(backward_stack(weights.l_net, adj, al, pl, gout)):
                dl[l] += dw
        return dmu, dl
