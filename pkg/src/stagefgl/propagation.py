"""Temperature-regulated attention propagation and graph smoothness diagnostics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgument
from .numcore import ParamStore

TAU_MIN = 0.1
LEAKY_SLOPE = 0.2
LN2 = float(np.log(2.0))


class EdgeIndex:
    """Directed message edges ``src -> dst`` with mandatory self-loops.

    Edges are sorted by ``(dst, src)`` so each node's neighborhood is a
    contiguous, never-empty segment starting at ``starts[v]``.
    """

    def __init__(self, edges, n: int):
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        loops = np.arange(n)
        src = np.concatenate([e[:, 0], e[:, 1], loops])
        dst = np.concatenate([e[:, 1], e[:, 0], loops])
        order = np.lexsort((src, dst))
        self.src = src[order]
        self.dst = dst[order]
        self.n = n
        self.starts = np.searchsorted(self.dst, np.arange(n))
        self.deg = np.diff(np.append(self.starts, len(self.dst)))
        E = len(self.src)
        self.gather_src = sp.csr_matrix((np.ones(E), (self.src, np.arange(E))), shape=(n, E))
        self.indptr = np.append(self.starts, E)
        self.gather_dst = sp.csr_matrix((np.ones(E), np.arange(E), self.indptr), shape=(n, E))
        self.self_loop = self.src == self.dst

    @classmethod
    def from_graph(cls, g):
        return cls(g.edges, g.node_count)

    def __len__(self):
        return len(self.src)

    def seg_sum(self, x):
        return self.gather_dst @ x

    def matrix(self, weights) -> sp.csr_matrix:
        """``n x n`` operator with ``(v, u)`` entry = weight of edge ``u -> v``."""
        return sp.csr_matrix((np.asarray(weights, dtype=np.float64), self.src, self.indptr),
                             shape=(self.n, self.n))

    def seg_max(self, x):
        return np.maximum.reduceat(x, self.starts, axis=0)

    def scatter_src(self, x):
        return self.gather_src @ x

    def uniform_weights(self) -> np.ndarray:
        return 1.0 / self.deg[self.dst]


def segment_softmax(logits: np.ndarray, ei: EdgeIndex) -> np.ndarray:
    m = ei.seg_max(logits)
    ex = np.exp(logits - m[ei.dst])
    return ex / ei.seg_sum(ex)[ei.dst]


def regulated_attention(e: np.ndarray, ei: EdgeIndex, tau_k: float) -> np.ndarray:
    """Per-edge softmax of ``e / tau_k`` over every destination neighborhood."""
    if not tau_k > 0:
        raise InvalidArgument("tau_k must be positive")
    return segment_softmax(np.asarray(e, dtype=np.float64) / tau_k, ei)


def neighborhood_context(Q: np.ndarray, ei: EdgeIndex, weights=None) -> np.ndarray:
    """``q~_v = sum_u w_vu q_u`` over the self-looped neighborhood (uniform by default)."""
    w = ei.uniform_weights() if weights is None else np.asarray(weights, dtype=np.float64)
    return ei.matrix(w) @ Q


def _xlogy_ratio(p, m):
    return np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0) / np.where(m > 0, m, 1.0)), 0.0)


def js_divergence(p, q) -> np.ndarray | float:
    """Jensen-Shannon divergence (natural log); accepts vectors or row-stacked matrices."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)
    js = 0.5 * _xlogy_ratio(p, m).sum(axis=-1) + 0.5 * _xlogy_ratio(q, m).sum(axis=-1)
    js = np.clip(js, 0.0, LN2)
    return float(js) if js.ndim == 0 else js


@dataclass
class ConflictSketch:
    mean: float
    std: float

    def as_array(self) -> np.ndarray:
        return np.array([self.mean, self.std])


def conflict_sketch(Q: np.ndarray, ei: EdgeIndex, weights=None) -> ConflictSketch:
    d = js_divergence(Q, neighborhood_context(Q, ei, weights))
    return ConflictSketch(float(d.mean()), float(d.std()))


def dirichlet_energy(H: np.ndarray, edges) -> float:
    """Sum over stored undirected edges of squared embedding differences."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    diff = H[e[:, 0]] - H[e[:, 1]]
    return float(np.sum(diff * diff))


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


class AttentionGNN:
    """Stack of single-head GAT-style layers sharing one propagation temperature.

    Layer ``l`` computes ``e_vu = leaky(a_dst . W h_v + a_src . W h_u)``,
    attention ``softmax_u(e_vu / tau)`` over the self-looped neighborhood, and
    ``h'_v = elu(sum_u alpha_vu W h_u)``.
    """

    def __init__(self, dims, rng=None, slope: float = LEAKY_SLOPE, prefix: str = "gnn."):
        rng = rng or np.random.default_rng(0)
        self.dims = tuple(int(d) for d in dims)
        self.slope = slope
        self.params = ParamStore()
        self.prefix = prefix
        for l, (din, dout) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            lim = np.sqrt(6.0 / din)  # He-uniform: keeps activation scale through elu
            self.params.add(f"{prefix}{l}.W", rng.uniform(-lim, lim, size=(din, dout)))
            alim = np.sqrt(6.0 / (dout + 1))
            self.params.add(f"{prefix}{l}.a_dst", rng.uniform(-alim, alim, size=dout))
            self.params.add(f"{prefix}{l}.a_src", rng.uniform(-alim, alim, size=dout))
        self._cache = []
        self.attention = []

    @property
    def layer_count(self):
        return len(self.dims) - 1

    def _p(self, l, name):
        return self.params.value(f"{self.prefix}{l}.{name}")

    def forward(self, H0, ei: EdgeIndex, tau: float) -> list:
        """Return ``[H0, H1, ..., HL]``."""
        if H0.shape[1] != self.dims[0]:
            raise InvalidArgument(f"GNN expects {self.dims[0]} input columns, got {H0.shape[1]}")
        if not tau > 0:
            raise InvalidArgument("tau must be positive")
        outs = [H0]
        self._cache = []
        self.attention = []
        H = H0
        for l in range(self.layer_count):
            W, ad, as_ = self._p(l, "W"), self._p(l, "a_dst"), self._p(l, "a_src")
            Z = H @ W
            raw = (Z @ ad)[ei.dst] + (Z @ as_)[ei.src]
            e = np.where(raw > 0, raw, self.slope * raw)
            alpha = segment_softmax(e / tau, ei)
            agg = ei.matrix(alpha) @ Z
            out = _elu(agg)
            self._cache.append((H, Z, raw, e, alpha, agg))
            self.attention.append(alpha)
            outs.append(out)
            H = out
        self._tau = tau
        self._ei = ei
        return outs

    def backward(self, grads):
        """Backpropagate per-layer output gradients.

        ``grads`` is either the gradient on the last layer or a list aligned
        with the forward outputs (entries may be None).  Returns
        ``(grad_H0, grad_tau)``.
        """
        L = self.layer_count
        if not isinstance(grads, (list, tuple)):
            grads = [None] * L + [grads]
        ei, tau = self._ei, self._tau
        g = grads[L] if grads[L] is not None else np.zeros_like(self._cache[-1][5])
        g_tau = 0.0
        for l in reversed(range(L)):
            H, Z, raw, e, alpha, agg = self._cache[l]
            W, ad, as_ = self._p(l, "W"), self._p(l, "a_dst"), self._p(l, "a_src")
            g_agg = g * np.where(agg > 0, 1.0, np.exp(np.minimum(agg, 0.0)))
            g_dst = g_agg[ei.dst]
            g_alpha = np.sum(g_dst * Z[ei.src], axis=1)
            g_Z = ei.matrix(alpha).T @ g_agg
            g_logit = alpha * (g_alpha - ei.seg_sum(alpha * g_alpha)[ei.dst])
            g_tau += float(np.sum(g_logit * e)) * (-1.0 / tau ** 2)
            g_raw = (g_logit / tau) * np.where(raw > 0, 1.0, self.slope)
            g_sd = ei.seg_sum(g_raw)
            g_ss = ei.scatter_src(g_raw)
            g_Z = g_Z + np.outer(g_sd, ad) + np.outer(g_ss, as_)
            self.params.accumulate(f"{self.prefix}{l}.a_dst", Z.T @ g_sd)
            self.params.accumulate(f"{self.prefix}{l}.a_src", Z.T @ g_ss)
            self.params.accumulate(f"{self.prefix}{l}.W", H.T @ g_Z)
            g = g_Z @ W.T
            if grads[l] is not None:
                g = g + grads[l]
        return g, g_tau


def gnn_forward(H0, ei: EdgeIndex, gnn: AttentionGNN, tau_k: float) -> list:
    return gnn.forward(H0, ei, tau_k)
