from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ..errors import InvalidArgument


def canonical_edges(edges, node_count: int) -> np.ndarray:
    """Deduplicate undirected pairs, drop self-loops, store as sorted ``u < v`` rows."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= node_count):
        raise InvalidArgument("edge endpoint out of range")
    e = e[e[:, 0] != e[:, 1]]
    e = np.sort(e, axis=1)
    if e.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(e, axis=0)


@dataclass
class MultimodalGraph:
    """Node-attributed graph with one masked feature block per modality.

    ``features[c]`` has shape ``(node_count, dims[c])``; rows whose mask bit is
    off are all zero.  Edges are undirected and stored once with ``u < v``.
    """

    features: list
    masks: np.ndarray
    labels: np.ndarray
    edges: np.ndarray
    class_count: int
    modality_ids: tuple = (0, 1)

    def __post_init__(self):
        self.features = [np.asarray(f, dtype=np.float64) for f in self.features]
        self.masks = np.asarray(self.masks, dtype=bool)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.modality_ids = tuple(int(m) for m in self.modality_ids)
        n = self.labels.shape[0]
        self.edges = canonical_edges(self.edges, n)
        if len(self.features) != len(self.modality_ids):
            raise InvalidArgument("one feature block per modality required")
        if self.masks.shape != (n, len(self.features)):
            raise InvalidArgument(f"mask shape {self.masks.shape} != {(n, len(self.features))}")
        for c, f in enumerate(self.features):
            if f.ndim != 2 or f.shape[0] != n:
                raise InvalidArgument(f"feature block {c} has shape {f.shape}")
            f[~self.masks[:, c]] = 0.0
        if n and not self.masks.any(axis=1).all():
            raise InvalidArgument("every node needs at least one available modality")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise InvalidArgument("label out of range")

    @property
    def node_count(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dims(self) -> tuple:
        return tuple(int(f.shape[1]) for f in self.features)

    @property
    def edge_count(self) -> int:
        return int(self.edges.shape[0])

    def fused(self) -> np.ndarray:
        """Concatenation of the masked modality blocks (missing modality -> zeros)."""
        return np.concatenate(
            [f * self.masks[:, [c]] for c, f in enumerate(self.features)], axis=1)

    def adjacency(self) -> sp.csr_matrix:
        n = self.node_count
        u, v = self.edges[:, 0], self.edges[:, 1]
        a = sp.coo_matrix((np.ones(2 * len(u)), (np.r_[u, v], np.r_[v, u])), shape=(n, n))
        return a.tocsr()

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.node_count)

    def subgraph(self, nodes) -> "MultimodalGraph":
        """Induced subgraph on ``nodes`` (reindexed in the given order)."""
        nodes = np.asarray(nodes, dtype=np.int64)
        local = -np.ones(self.node_count, dtype=np.int64)
        local[nodes] = np.arange(len(nodes))
        keep = (local[self.edges[:, 0]] >= 0) & (local[self.edges[:, 1]] >= 0)
        return MultimodalGraph(
            features=[f[nodes].copy() for f in self.features],
            masks=self.masks[nodes].copy(),
            labels=self.labels[nodes].copy(),
            edges=local[self.edges[keep]],
            class_count=self.class_count,
            modality_ids=self.modality_ids,
        )

    def copy(self) -> "MultimodalGraph":
        return MultimodalGraph([f.copy() for f in self.features], self.masks.copy(),
                               self.labels.copy(), self.edges.copy(), self.class_count,
                               self.modality_ids)


@dataclass
class ClientPartition:
    assignment: np.ndarray
    client_count: int
    client_nodes: list = field(default_factory=list)
    local_edges: list = field(default_factory=list)
    cut_size: int = 0

    @classmethod
    def from_assignment(cls, g: MultimodalGraph, assignment, client_count: int) -> "ClientPartition":
        a = np.asarray(assignment, dtype=np.int64)
        if a.shape != (g.node_count,) or a.min() < 0 or a.max() >= client_count:
            raise InvalidArgument("assignment must map every node to a client")
        nodes, local_edges = [], []
        local = np.empty(g.node_count, dtype=np.int64)
        for k in range(client_count):
            idx = np.flatnonzero(a == k)
            local[idx] = np.arange(len(idx))
            nodes.append(idx)
        eu, ev = g.edges[:, 0], g.edges[:, 1]
        same = a[eu] == a[ev]
        for k in range(client_count):
            m = same & (a[eu] == k)
            local_edges.append(np.stack([local[eu[m]], local[ev[m]]], axis=1))
        return cls(a, client_count, nodes, local_edges, int((~same).sum()))

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.client_count)

    def balance_ratio(self) -> float:
        s = self.sizes()
        return float(s.max() / max(s.min(), 1))


@dataclass
class SynthConfig:
    """Planted-partition multimodal graph generator settings.

    ``client_dims`` optionally pins the per-client modality dimensions; when
    absent each client draws ``base dim + U{-dim_jitter..dim_jitter}``.
    """

    node_count: int = 1200
    class_count: int = 6
    p_in: float = 0.04
    p_out: float = 0.004
    modality_dims: tuple = (48, 32)
    dim_jitter: int = 8
    client_dims: tuple | None = None
    prototype_scale: float = 1.0
    noise_std: float = 0.35
    mask_drop: float = 0.15
    seed: int = 0

    def validate(self):
        if self.class_count < 2:
            raise InvalidArgument("class_count must be >= 2")
        if not (0 <= self.p_out < self.p_in <= 1):
            raise InvalidArgument("need 0 <= p_out < p_in <= 1")
        if self.node_count < self.class_count:
            raise InvalidArgument("node_count must be >= class_count")
        if not self.modality_dims or min(self.modality_dims) < 1:
            raise InvalidArgument("modality dims must be >= 1")
        if self.dim_jitter < 0 or self.dim_jitter >= min(self.modality_dims):
            raise InvalidArgument("dim_jitter must be in [0, min dim)")
        if not 0 <= self.mask_drop < 1:
            raise InvalidArgument("mask_drop must be in [0, 1)")
        if self.noise_std < 0 or self.prototype_scale <= 0:
            raise InvalidArgument("noise_std >= 0 and prototype_scale > 0 required")
        return self


@dataclass
class FederatedGraph:
    """A global graph, its partition, and every client's locally encoded view."""

    graph: MultimodalGraph
    partition: ClientPartition
    clients: list

    @property
    def client_count(self) -> int:
        return self.partition.client_count
