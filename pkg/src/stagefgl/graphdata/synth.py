"""Synthetic multimodal graphs and simulated heterogeneous frozen encoders."""
from __future__ import annotations

import numpy as np

from .model import FederatedGraph, MultimodalGraph, SynthConfig


def planted_partition_edges(labels, p_in, p_out, rng) -> np.ndarray:
    n = len(labels)
    iu, ju = np.triu_indices(n, k=1)
    same = labels[iu] == labels[ju]
    prob = np.where(same, p_in, p_out)
    keep = rng.random(iu.shape[0]) < prob
    return np.stack([iu[keep], ju[keep]], axis=1)


def draw_masks(n, n_modalities, drop, rng) -> np.ndarray:
    masks = rng.random((n, n_modalities)) >= drop
    dead = ~masks.any(axis=1)
    while dead.any():
        masks[dead] = rng.random((int(dead.sum()), n_modalities)) >= drop
        dead = ~masks.any(axis=1)
    return masks


def generate_synthetic_mag(cfg: SynthConfig) -> MultimodalGraph:
    """Planted-partition topology with class-prototype-plus-noise modality features."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n, C = cfg.node_count, cfg.class_count
    labels = rng.permutation(np.arange(n) % C)
    edges = planted_partition_edges(labels, cfg.p_in, cfg.p_out, rng)
    features = []
    for d in cfg.modality_dims:
        protos = rng.standard_normal((C, d))
        protos *= cfg.prototype_scale / np.linalg.norm(protos, axis=1, keepdims=True)
        features.append(protos[labels] + cfg.noise_std * rng.standard_normal((n, d)))
    masks = draw_masks(n, len(cfg.modality_dims), cfg.mask_drop, rng)
    return MultimodalGraph(features, masks, labels, edges, C, tuple(range(len(features))))


def client_modality_dims(cfg: SynthConfig, client_count: int) -> list:
    if cfg.client_dims is not None:
        dims = [tuple(int(x) for x in row) for row in cfg.client_dims]
        if len(dims) != client_count:
            raise ValueError("client_dims must list one row per client")
        return dims
    rng = np.random.default_rng([cfg.seed, 101])
    j = cfg.dim_jitter
    return [tuple(int(d + rng.integers(-j, j + 1)) for d in cfg.modality_dims)
            for _ in range(client_count)]


def encode_clients(g: MultimodalGraph, partition, cfg: SynthConfig) -> FederatedGraph:
    """Re-express each client's nodes through its own frozen random encoders.

    Client k maps modality c through a fixed Gaussian matrix of shape
    ``(d_c, d_c^(k))``, so the same class lands in unrelated coordinates and
    dimensions on different clients.
    """
    dims = client_modality_dims(cfg, partition.client_count)
    clients = []
    for k, nodes in enumerate(partition.client_nodes):
        local = g.subgraph(nodes)
        rng = np.random.default_rng([cfg.seed, 202, k])
        feats = []
        for c, f in enumerate(local.features):
            enc = rng.standard_normal((f.shape[1], dims[k][c])) / np.sqrt(f.shape[1])
            feats.append(f @ enc)
        clients.append(MultimodalGraph(feats, local.masks, local.labels,
                                       partition.local_edges[k], g.class_count,
                                       g.modality_ids))
    return FederatedGraph(g, partition, clients)
