"""Forward/backward adapters that put every differentiable piece under ``grad_check``."""
from __future__ import annotations

import numpy as np

from .numcore import Linear, ParamStore, SoftmaxCrossEntropy, sigmoid, softplus
from .propagation import AttentionGNN, EdgeIndex
from .semantics import (AnchorBank, GlobalAnchorPrototypes, Projector, anchor_conditional_means,
                        anchor_means_backward, entropy_loss, gap_loss, init_anchor_bank,
                        translate, translate_backward)


class TranslationLayer:
    """``H -> Q`` soft assignment onto a frozen bank (no trainable parameters)."""

    def __init__(self, bank: AnchorBank, tau_s: float):
        self.bank, self.tau_s = bank, tau_s
        self.params = ParamStore()

    def forward(self, H):
        self._sa = translate(H, self.bank, self.tau_s)
        return self._sa.Q

    def backward(self, gQ):
        return translate_backward(self._sa, self.bank, gQ)


class EntropyLayer:
    """``Q -> sum_i qbar_i log qbar_i`` (scalar)."""

    def __init__(self):
        self.params = ParamStore()

    def forward(self, Q):
        loss, self._g = entropy_loss(Q)
        return loss

    def backward(self, gy=1.0):
        return self._g * gy


class GapLossLayer:
    """InfoNCE of anchor means of ``H`` against prototypes, with a fixed hard assignment."""

    def __init__(self, Q, gap: GlobalAnchorPrototypes, tau_c: float, n_min: int = 1):
        self.Q, self.gap, self.tau_c, self.n_min = Q, gap, tau_c, n_min
        self.params = ParamStore()

    def forward(self, H):
        self._stats = anchor_conditional_means(H, self.Q, self.n_min)
        self._n = H.shape[0]
        loss, self._g_mu, _ = gap_loss(self._stats, self.gap, self.tau_c)
        return loss

    def backward(self, gy=1.0):
        return anchor_means_backward(self._stats, self._g_mu * gy, self._n)


class GNNLayer:
    """Attention GNN stack at a fixed temperature, exposing its ParamStore."""

    def __init__(self, gnn: AttentionGNN, ei: EdgeIndex, tau: float):
        self.gnn, self.ei, self.tau = gnn, ei, tau
        self.params = gnn.params

    def forward(self, H):
        return self.gnn.forward(H, self.ei, self.tau)[-1]

    def backward(self, g):
        return self.gnn.backward(g)[0]


class LinkHead:
    """Mean logistic loss of dot-product scores for positive and negative pairs."""

    def __init__(self, pos, neg):
        self.pos = np.asarray(pos, dtype=np.int64).reshape(-1, 2)
        self.neg = np.asarray(neg, dtype=np.int64).reshape(-1, 2)
        self.params = ParamStore()

    def forward(self, H):
        loss, self._g = link_loss(H, self.pos, self.neg)
        return loss

    def backward(self, gy=1.0):
        return self._g * gy


def link_loss(H, pos, neg):
    """Mean logistic loss of dot-product edge scores; returns ``(loss, grad_H)``."""
    pairs = np.concatenate([pos, neg]).astype(np.int64).reshape(-1, 2)
    y = np.r_[np.ones(len(pos)), np.zeros(len(neg))]
    gH = np.zeros_like(H)
    if len(pairs) == 0:
        return 0.0, gH
    hu, hv = H[pairs[:, 0]], H[pairs[:, 1]]
    s = np.sum(hu * hv, axis=1)
    loss = float(np.mean(softplus(s) - y * s))
    ds = (sigmoid(s) - y) / len(pairs)
    np.add.at(gH, pairs[:, 0], ds[:, None] * hv)
    np.add.at(gH, pairs[:, 1], ds[:, None] * hu)
    return loss, gH


def registered_layers(seed: int = 0) -> dict:
    """Small seeded instances: name -> (layer, input array)."""
    rng = np.random.default_rng([seed, 4242])
    n, d_in, d_p, M, C = 8, 5, 4, 6, 3
    bank = init_anchor_bank(M, d_p, seed)
    H = rng.standard_normal((n, d_p))
    Q = translate(H, bank, 0.5).Q
    gap = GlobalAnchorPrototypes(bank.B + 0.1 * rng.standard_normal((M, d_p)), 0)
    edges = np.array([[0, 1], [1, 2], [2, 3], [3, 4], [4, 5], [5, 6], [6, 7], [0, 7], [1, 5]])
    ei = EdgeIndex(edges, n)
    labels = rng.integers(0, C, size=n)
    out = {
        "linear": (Linear(d_in, d_p, rng=rng), rng.standard_normal((n, d_in))),
        "projector": (Projector(d_in, d_p, rng=rng), rng.standard_normal((n, d_in))),
        "translation": (TranslationLayer(bank, 0.5), H),
        "entropy": (EntropyLayer(), Q),
        "gap_infonce": (GapLossLayer(Q, gap, 0.2), H),
        "attention_gnn": (GNNLayer(AttentionGNN((d_p, d_p, d_p), rng), ei, 0.7), H),
        "node_head": (SoftmaxCrossEntropy(d_p, C, labels, rng=rng), H),
        "link_head": (LinkHead(edges[:4], np.array([[0, 3], [2, 6], [1, 7], [4, 0]])), H * 0.5),
    }
    return out
