"""MAG1 binary container and JSON-lines debug export.

Layout (all little-endian)::

    "MAG1" | version u32 | node_count u32 | class_count u32 | modality_count u32
    | client_count u32 | edge_count u32
    | modality ids u32[M] | global dims u32[M]
    | (client_count > 0) client dims u32[K*M] | assignment u32[N]
    | global feature blocks f32 (N x d_c, modality order)
    | (client_count > 0) client feature blocks f32 (n_k x d_c^(k)), client-major
    | masks u8[N*M] | labels u32[N] | edges u32[E*2]
    | config hash (u32 byte length + utf-8)
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..binio import Reader, Writer
from ..errors import ParseError
from .model import ClientPartition, FederatedGraph, MultimodalGraph

MAGIC = b"MAG1"
VERSION = 1


def encode(data, config_hash: str = "") -> bytes:
    if isinstance(data, FederatedGraph):
        g, part, clients = data.graph, data.partition, data.clients
    else:
        g, part, clients = data, None, []
    M = len(g.features)
    w = Writer()
    w.raw(MAGIC)
    for x in (VERSION, g.node_count, g.class_count, M, len(clients), g.edge_count):
        w.u32(x)
    w.array(g.modality_ids, "u4")
    w.array(g.dims, "u4")
    if clients:
        w.array([c.dims for c in clients], "u4")
        w.array(part.assignment, "u4")
    for f in g.features:
        w.array(f, "f4")
    for c in clients:
        for f in c.features:
            w.array(f, "f4")
    w.array(g.masks, "u1")
    w.array(g.labels, "u4")
    w.array(g.edges, "u4")
    w.text(config_hash)
    return w.getvalue()


def decode(buf: bytes):
    return decode_with_hash(buf)[0]


def decode_with_hash(buf: bytes):
    """Return ``(graph or federated graph, embedded config hash)``."""
    r = Reader(buf)
    r.magic(MAGIC)
    version = r.u32("version")
    if version != VERSION:
        raise ParseError(f"unsupported version {version}", r.pos - 4)
    n, C, M, K, E = (r.u32(w) for w in ("node_count", "class_count", "modality_count",
                                        "client_count", "edge_count"))
    ids = tuple(int(x) for x in r.array(M, "u4", "modality ids"))
    dims = r.array(M, "u4", "modality dims").astype(int)
    cdims = assign = None
    if K:
        cdims = r.array(K * M, "u4", "client dims").astype(int).reshape(K, M)
        assign = r.array(n, "u4", "assignment").astype(np.int64)
        if assign.size and assign.max() >= K:
            raise ParseError("assignment refers to a missing client", r.pos - 4 * n)
    feats = [r.array(n * d, "f4", f"features[{c}]").astype(np.float64).reshape(n, d)
             for c, d in enumerate(dims)]
    cfeats = []
    if K:
        sizes = np.bincount(assign, minlength=K)
        for k in range(K):
            cfeats.append([r.array(sizes[k] * d, "f4", f"client {k} features[{c}]")
                           .astype(np.float64).reshape(sizes[k], d)
                           for c, d in enumerate(cdims[k])])
    masks = r.array(n * M, "u1", "masks").reshape(n, M).astype(bool)
    labels = r.array(n, "u4", "labels").astype(np.int64)
    edges = r.array(E * 2, "u4", "edges").astype(np.int64).reshape(E, 2)
    config_hash = r.text("config hash")
    r.done()
    g = MultimodalGraph(feats, masks, labels, edges, C, ids)
    if not K:
        return g, config_hash
    part = ClientPartition.from_assignment(g, assign, K)
    clients = []
    for k, nodes in enumerate(part.client_nodes):
        clients.append(MultimodalGraph(cfeats[k], masks[nodes], labels[nodes],
                                       part.local_edges[k], C, ids))
    return FederatedGraph(g, part, clients), config_hash


def save(data, path, config_hash: str = ""):
    Path(path).write_bytes(encode(data, config_hash))


def load(path):
    return decode(Path(path).read_bytes())


def load_with_hash(path):
    return decode_with_hash(Path(path).read_bytes())


def export_jsonl(g: MultimodalGraph, path):
    """One JSON object per node, then one per edge."""
    with open(path, "w", encoding="utf-8") as fh:
        for v in range(g.node_count):
            rec = {
                "type": "node", "id": v, "label": int(g.labels[v]),
                "mask": [int(b) for b in g.masks[v]],
                "features": {str(m): g.features[c][v].tolist()
                             for c, m in enumerate(g.modality_ids) if g.masks[v, c]},
            }
            fh.write(json.dumps(rec) + "\n")
        for u, v in g.edges.tolist():
            fh.write(json.dumps({"type": "edge", "u": u, "v": v}) + "\n")
