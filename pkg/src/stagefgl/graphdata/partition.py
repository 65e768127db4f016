"""Federated client partitioning.

Two strategies: community-respecting (Louvain communities packed into K
balanced parts) and cut-minimizing (balanced multi-source BFS growth followed
by gain-driven boundary refinement).  Both are deterministic in ``seed``.
"""
from __future__ import annotations

import logging
import math
from collections import deque

import networkx as nx
import numpy as np

from ..errors import InvalidArgument
from .model import ClientPartition, MultimodalGraph

log = logging.getLogger(__name__)

BALANCE_TOL = 0.1


def _check_k(g: MultimodalGraph, K: int):
    if K < 2:
        raise InvalidArgument(f"need at least 2 clients, got K={K}")
    if K > g.node_count // 10:
        raise InvalidArgument(f"K={K} exceeds node_count/10 for {g.node_count} nodes")


def _bounds(n, K):
    t = n / K
    return int(math.floor(t * (1 - BALANCE_TOL))), int(math.ceil(t * (1 + BALANCE_TOL)))


class _Links:
    """Per-node neighbor counts per part, updated incrementally on moves."""

    def __init__(self, adj, assign, K):
        self.adj = adj
        self.assign = assign
        self.K = K
        onehot = np.zeros((len(assign), K))
        onehot[np.arange(len(assign)), assign] = 1
        self.links = np.asarray(adj @ onehot)
        self.sizes = np.bincount(assign, minlength=K)

    def move(self, u, b):
        a = self.assign[u]
        nbrs = self.adj.indices[self.adj.indptr[u]:self.adj.indptr[u + 1]]
        self.links[nbrs, a] -= 1
        self.links[nbrs, b] += 1
        self.assign[u] = b
        self.sizes[a] -= 1
        self.sizes[b] += 1

    def own(self):
        return self.links[np.arange(len(self.assign)), self.assign]


def cut_size(g: MultimodalGraph, assign) -> int:
    a = np.asarray(assign)
    return int((a[g.edges[:, 0]] != a[g.edges[:, 1]]).sum())


def rebalance(adj, assign, K, lo, hi) -> np.ndarray:
    """Move boundary nodes from oversized to undersized parts until sizes fit [lo, hi]."""
    L = _Links(adj, np.array(assign, dtype=np.int64), K)
    n = len(assign)
    for _ in range(4 * n):
        sizes = L.sizes
        under = sizes < lo
        over = sizes > hi
        if not under.any() and not over.any():
            break
        t = int(np.argmin(sizes))
        donors = over if over.any() else (sizes > lo)
        donors[t] = False
        if not donors.any():
            donors = sizes > sizes[t] + 1
        cand = donors[L.assign]
        gain = L.links[:, t] - L.own()
        touching = cand & (L.links[:, t] > 0)
        pool = touching if touching.any() else cand
        if not pool.any():
            break
        scores = np.where(pool, gain, -np.inf)
        u = int(np.argmax(scores))
        L.move(u, t)
    return L.assign


def refine(adj, assign, K, lo, hi, max_moves=None) -> np.ndarray:
    """Greedy boundary refinement; every accepted move or swap strictly lowers the cut."""
    L = _Links(adj, np.array(assign, dtype=np.int64), K)
    n = len(assign)
    max_moves = max_moves or 10 * n
    idx = np.arange(n)
    for _ in range(max_moves):
        own = L.own()
        gains = L.links - own[:, None]
        gains[idx, L.assign] = -np.inf
        src_ok = (L.sizes[L.assign] - 1) >= lo
        dst_ok = (L.sizes + 1) <= hi
        feasible = np.where(src_ok[:, None] & dst_ok[None, :], gains, -np.inf)
        u, b = np.unravel_index(int(np.argmax(feasible)), feasible.shape)
        if feasible[u, b] > 0:
            L.move(int(u), int(b))
            continue
        if not _best_swap(L, gains):
            break
    return L.assign


def _best_swap(L, gains, top=32) -> bool:
    """Try the best pairwise exchange between two parts; returns True if applied."""
    K = L.K
    best = (0.0, None, None)
    for a in range(K):
        ina = np.flatnonzero(L.assign == a)
        for b in range(a + 1, K):
            inb = np.flatnonzero(L.assign == b)
            ga, gb = gains[ina, b], gains[inb, a]
            ca = ina[np.argsort(-ga, kind="stable")[:top]]
            cb = inb[np.argsort(-gb, kind="stable")[:top]]
            if not len(ca) or not len(cb):
                continue
            sub = L.adj[ca][:, cb].toarray()
            total = gains[ca, b][:, None] + gains[cb, a][None, :] - 2 * sub
            i, j = np.unravel_index(int(np.argmax(total)), total.shape)
            if total[i, j] > best[0] + 1e-12:
                best = (float(total[i, j]), (int(ca[i]), b), (int(cb[j]), a))
    if best[1] is None:
        return False
    L.move(*best[1])
    L.move(*best[2])
    return True


def _bfs_grow(adj, K, rng) -> np.ndarray:
    n = adj.shape[0]
    seeds = [int(rng.integers(n))]
    dist = _hops(adj, seeds[0])
    while len(seeds) < K:
        d = np.where(np.isinf(dist), np.inf, dist)
        d[seeds] = -1
        nxt = int(np.argmax(d))
        seeds.append(nxt)
        dist = np.minimum(dist, _hops(adj, nxt))
    cap = int(math.ceil(n / K))
    assign = -np.ones(n, dtype=np.int64)
    queues = [deque([s]) for s in seeds]
    sizes = np.zeros(K, dtype=np.int64)
    for k, s in enumerate(seeds):
        assign[s] = k
        sizes[k] = 1
    active = True
    while active:
        active = False
        for k in range(K):
            q = queues[k]
            while q and sizes[k] < cap:
                u = q[0]
                nbrs = adj.indices[adj.indptr[u]:adj.indptr[u + 1]]
                free = nbrs[assign[nbrs] < 0]
                if free.size == 0:
                    q.popleft()
                    continue
                v = int(free[0])
                assign[v] = k
                sizes[k] += 1
                q.append(v)
                active = True
                break
    for u in np.flatnonzero(assign < 0):
        k = int(np.argmin(sizes))
        assign[u] = k
        sizes[k] += 1
    return assign


def _hops(adj, src) -> np.ndarray:
    n = adj.shape[0]
    dist = np.full(n, np.inf)
    dist[src] = 0
    frontier = [src]
    d = 0
    while frontier:
        d += 1
        nxt = []
        for u in frontier:
            for v in adj.indices[adj.indptr[u]:adj.indptr[u + 1]]:
                if np.isinf(dist[v]):
                    dist[v] = d
                    nxt.append(v)
        frontier = nxt
    return dist


def partition_communities(g: MultimodalGraph, K: int, seed: int = 0) -> ClientPartition:
    """Louvain communities packed largest-first into K parts, then rebalanced."""
    _check_k(g, K)
    n = g.node_count
    adj = g.adjacency()
    lo, hi = _bounds(n, K)
    G = nx.Graph()
    G.add_nodes_from(range(n))
    G.add_edges_from(map(tuple, g.edges.tolist()))
    comms = nx.community.louvain_communities(G, seed=seed)
    comms = sorted((sorted(c) for c in comms), key=lambda c: (-len(c), c[0]))
    if len(comms) < K:
        log.info("only %d communities for K=%d; falling back to BFS growth", len(comms), K)
        assign = _bfs_grow(adj, K, np.random.default_rng(seed))
    else:
        assign = np.empty(n, dtype=np.int64)
        sizes = np.zeros(K, dtype=np.int64)
        for c in comms:
            k = int(np.argmin(sizes))
            assign[c] = k
            sizes[k] += len(c)
    assign = rebalance(adj, assign, K, lo, hi)
    return ClientPartition.from_assignment(g, assign, K)


def partition_edgecut(g: MultimodalGraph, K: int, seed: int = 0, restarts: int = 4,
                      return_unrefined: bool = False):
    """Balanced multi-source BFS growth plus cut-reducing refinement (best of ``restarts``)."""
    _check_k(g, K)
    adj = g.adjacency()
    lo, hi = _bounds(g.node_count, K)
    best = None
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        grown = rebalance(adj, _bfs_grow(adj, K, rng), K, lo, hi)
        refined = refine(adj, grown, K, lo, hi)
        c = cut_size(g, refined)
        if best is None or c < best[0]:
            best = (c, refined, cut_size(g, grown))
    part = ClientPartition.from_assignment(g, best[1], K)
    if return_unrefined:
        return part, best[2]
    return part
