from __future__ import annotations

import logging

import numpy as np

from ..errors import InvalidArgument
from .model import MultimodalGraph

log = logging.getLogger(__name__)

TRAIN, VAL, TEST = 0, 1, 2


def drift_vectors(clients, seed: int) -> list:
    """One standard-normal bias per (client, modality), in that client's own dims."""
    out = []
    for k, g in enumerate(clients):
        rng = np.random.default_rng([seed, 303, k])
        out.append([rng.standard_normal(d) for d in g.dims])
    return out


def apply_feature_drift(clients, alpha: float, seed: int) -> list:
    """Shift every available modality row of client k by ``alpha * v_k^(c)``.

    Returns new graphs; inputs are not modified.
    """
    if not 0.0 <= alpha <= 1.0:
        raise InvalidArgument(f"alpha must be in [0, 1], got {alpha}")
    vecs = drift_vectors(clients, seed)
    out = []
    for g, vk in zip(clients, vecs):
        h = g.copy()
        if alpha != 0.0:
            for c, f in enumerate(h.features):
                live = h.masks[:, c]
                f[live] += alpha * vk[c]
        out.append(h)
    return out


def apply_modality_noise(g: MultimodalGraph, ratio: float, seed: int):
    """Replace ``floor(ratio * available)`` rows per modality with standard-normal noise.

    Returns ``(new_graph, replaced)`` where ``replaced[c]`` holds the row indices.
    """
    if not 0.0 <= ratio <= 1.0:
        raise InvalidArgument(f"ratio must be in [0, 1], got {ratio}")
    rng = np.random.default_rng([seed, 404])
    h = g.copy()
    replaced = []
    for c, f in enumerate(h.features):
        live = np.flatnonzero(h.masks[:, c])
        count = int(np.floor(ratio * len(live) + 1e-9))
        rows = np.sort(rng.choice(live, size=count, replace=False)) if count else live[:0]
        f[rows] = rng.standard_normal((count, f.shape[1]))
        replaced.append(rows)
    return h, replaced


def split_train_val_test(g: MultimodalGraph, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> np.ndarray:
    """Class-stratified split tags (0 train, 1 val, 2 test)."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or (fr <= 0).any() or abs(fr.sum() - 1) > 1e-9:
        raise InvalidArgument("fractions must be three positive values summing to 1")
    rng = np.random.default_rng([seed, 505])
    tags = np.full(g.node_count, TRAIN, dtype=np.int8)
    for c in range(g.class_count):
        idx = np.flatnonzero(g.labels == c)
        if len(idx) == 0:
            continue
        if len(idx) < 3:
            log.info("class %d has %d nodes; all assigned to train", c, len(idx))
            continue
        idx = rng.permutation(idx)
        n_tr = min(max(1, int(round(fr[0] * len(idx)))), len(idx) - 2)
        n_va = min(max(1, int(round(fr[1] * len(idx)))), len(idx) - n_tr - 1)
        tags[idx[n_tr:n_tr + n_va]] = VAL
        tags[idx[n_tr + n_va:]] = TEST
    return tags


def split_edges(g: MultimodalGraph, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> np.ndarray:
    """Split tags for stored edges, used to hold out links for prediction."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or (fr <= 0).any() or abs(fr.sum() - 1) > 1e-9:
        raise InvalidArgument("fractions must be three positive values summing to 1")
    rng = np.random.default_rng([seed, 606])
    m = g.edge_count
    order = rng.permutation(m)
    n_va = int(round(fr[1] * m))
    n_te = int(round(fr[2] * m))
    tags = np.full(m, TRAIN, dtype=np.int8)
    tags[order[:n_va]] = VAL
    tags[order[n_va:n_va + n_te]] = TEST
    return tags


def sample_non_edges(n: int, edges: np.ndarray, count: int, rng) -> np.ndarray:
    """``count`` distinct node pairs (u < v) that are not in ``edges``."""
    existing = set(map(tuple, np.sort(edges, axis=1).tolist()))
    out = set()
    max_pairs = n * (n - 1) // 2 - len(existing)
    count = min(count, max_pairs)
    while len(out) < count:
        cand = rng.integers(0, n, size=(2 * (count - len(out)) + 8, 2))
        for u, v in cand.tolist():
            if u == v:
                continue
            p = (u, v) if u < v else (v, u)
            if p not in existing and p not in out:
                out.add(p)
                if len(out) == count:
                    break
    return np.array(sorted(out), dtype=np.int64).reshape(-1, 2)
