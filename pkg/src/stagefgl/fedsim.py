"""Federated round orchestration for the anchor-calibrated protocol and its baselines."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diagnostics as diag
from . import graphdata as gd
from .binio import decode_arrays, encode_arrays
from .errors import DivergenceError, InvalidArgument, UndefinedMetric
from .layers import link_loss
from .numcore import Linear, ParamStore, cross_entropy
from .propagation import AttentionGNN, EdgeIndex, conflict_sketch
from .protocol import (FULL, GAP_ONLY, ClientUpload, ServerBroadcast, count_scalars,
                       deserialize, serialize)
from .semantics import (AnchorBank, anchor_purity, GlobalAnchorPrototypes, Projector, anchor_conditional_means,
                        anchor_means_backward, entropy_loss, gap_from_bank, gap_loss,
                        init_anchor_bank, translate, translate_backward)
from .server import (MetaController, MetaReport, ServerState, aggregate_fedavg,
                     decode_server, encode_server, meta_update, update_gap)

log = logging.getLogger(__name__)

METHODS = ("stage", "fedavg", "stage_no_bank", "stage_no_gap", "stage_no_meta",
           "stage_no_entropy")
TASKS = ("node_classification", "link_prediction")
ABLATIONS = ("stage_no_bank", "stage_no_gap", "stage_no_meta", "stage_no_entropy")


@dataclass
class RunConfig:
    method: str = "stage"
    task: str = "node_classification"
    clients: int = 4
    rounds: int = 40
    local_epochs: int = 2
    lr: float = 0.05
    lam: float = 0.2
    beta: float = 0.1
    tau_s: float = 0.1
    tau_c: float = 0.2
    m_ema: float = 0.9
    eta_pi: float = 0.01
    tau_min: float = 0.1
    tau_init: float = 1.0
    g_max: float = 10.0
    alpha: float = 0.8
    noise_ratio: float = 0.0
    seeds: tuple = (0, 1, 2, 3, 4)
    anchors: int = 128
    d_p: int = 64
    layers: int = 2
    n_min: int = 1
    split: tuple = (0.6, 0.2, 0.2)
    edge_split: tuple = (0.8, 0.1, 0.1)
    partition: str = "auto"
    gnn_input: str = "projected"
    model_init: str = "common"
    bank_seed: int = 0
    synth: gd.SynthConfig = field(default_factory=gd.SynthConfig)

    def validate(self) -> "RunConfig":
        if self.method not in METHODS:
            raise InvalidArgument(f"unknown method {self.method!r}")
        if self.task not in TASKS:
            raise InvalidArgument(f"unknown task {self.task!r}")
        if self.lam < 0 or self.beta < 0:
            raise InvalidArgument("lam and beta must be nonnegative")
        if self.rounds < 0 or self.local_epochs < 1:
            raise InvalidArgument("rounds >= 0 and local_epochs >= 1 required")
        if self.partition not in ("auto", "communities", "edgecut"):
            raise InvalidArgument(f"unknown partition {self.partition!r}")
        if self.gnn_input not in ("translated", "projected"):
            raise InvalidArgument(f"unknown gnn_input {self.gnn_input!r}")
        if self.model_init not in ("common", "independent"):
            raise InvalidArgument(f"unknown model_init {self.model_init!r}")
        if not self.seeds:
            raise InvalidArgument("at least one seed required")
        self.synth.validate()
        return self

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in list(d.items()):
            if isinstance(v, tuple):
                d[k] = list(v)
        d["synth"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in d["synth"].items()}
        return d

    def config_hash(self) -> str:
        return _digest(self.to_dict())

    def data_hash(self, seed: int) -> str:
        return data_hash(self, seed)


def _digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(type(x).__name__)


def data_hash(cfg: RunConfig, seed: int) -> str:
    d = cfg.to_dict()
    keep = {k: d[k] for k in ("clients", "alpha", "noise_ratio", "partition", "task", "synth")}
    keep["seed"] = seed
    return _digest(keep)


@dataclass(frozen=True)
class Flags:
    bank: bool
    lam: float
    beta: float
    meta: bool
    share: bool


def method_flags(cfg: RunConfig) -> Flags:
    m = cfg.method
    if m in ("fedavg", "stage_no_bank"):
        return Flags(False, 0.0, 0.0, False, True)
    return Flags(True,
                 0.0 if m == "stage_no_gap" else cfg.lam,
                 0.0 if m == "stage_no_entropy" else cfg.beta,
                 m != "stage_no_meta", False)


# --------------------------------------------------------------------------- data


def build_federated(cfg: RunConfig, seed: int) -> gd.FederatedGraph:
    """Generate, partition, encode per client, then apply drift and modality noise."""
    synth = dataclasses.replace(cfg.synth, seed=cfg.synth.seed + seed)
    g = gd.generate_synthetic_mag(synth)
    strategy = cfg.partition
    if strategy == "auto":
        strategy = "communities" if cfg.task == "node_classification" else "edgecut"
    if strategy == "communities":
        part = gd.partition_communities(g, cfg.clients, seed=seed)
    else:
        part = gd.partition_edgecut(g, cfg.clients, seed=seed)
    fed = gd.encode_clients(g, part, synth)
    clients = gd.apply_feature_drift(fed.clients, cfg.alpha, seed)
    if cfg.noise_ratio > 0:
        clients = [gd.apply_modality_noise(c, cfg.noise_ratio, seed * 1000 + k)[0]
                   for k, c in enumerate(clients)]
    return gd.FederatedGraph(g, part, clients)


# --------------------------------------------------------------------------- client


def common_model_init(cfg: RunConfig, seed: int, class_count: int) -> ParamStore:
    """GNN and head weights drawn once from the run seed and given to every client."""
    rng = np.random.default_rng([seed, 1001])
    out = ParamStore()
    gnn = AttentionGNN((cfg.d_p,) * (cfg.layers + 1), rng)
    for k, v in gnn.params.items():
        out.add(k, v)
    if cfg.task == "node_classification":
        head = Linear(cfg.d_p, class_count, rng=rng, prefix="head.")
        for k, v in head.params.items():
            out.add(k, v)
    return out


class Client:
    """One participant: private subgraph, splits, projector, GNN and task head."""

    def __init__(self, cid: int, graph: gd.MultimodalGraph, cfg: RunConfig, seed: int,
                 bank: AnchorBank | None):
        self.cid = cid
        self.graph = graph
        self.cfg = cfg
        self.seed = seed
        self.bank = bank
        self.flags = method_flags(cfg)
        self.X = graph.fused()
        self.n = graph.node_count
        rng = np.random.default_rng([seed, 909, cid])
        self.projector = Projector(self.X.shape[1], cfg.d_p, rng)
        self.gnn = AttentionGNN((cfg.d_p,) * (cfg.layers + 1), rng)
        self.node_task = cfg.task == "node_classification"
        self.head = Linear(cfg.d_p, graph.class_count, rng=rng, prefix="head.") \
            if self.node_task else None
        if self.node_task:
            self.tags = gd.split_train_val_test(graph, cfg.split, seed=seed * 7919 + cid)
            self.ei = EdgeIndex.from_graph(graph)
            self.msg_edges = graph.edges
        else:
            etags = gd.split_edges(graph, cfg.edge_split, seed=seed * 7919 + cid)
            self.msg_edges = graph.edges[etags == gd.TRAIN]
            self.ei = EdgeIndex(self.msg_edges, self.n)
            self.pos = {s: graph.edges[etags == s] for s in (gd.TRAIN, gd.VAL, gd.TEST)}
            neg_rng = np.random.default_rng([seed, 1111, cid])
            self.neg = {s: gd.sample_non_edges(self.n, graph.edges, len(self.pos[s]), neg_rng)
                        for s in (gd.VAL, gd.TEST)}
        self.last_tau = cfg.tau_init if self.flags.meta else 1.0

    # parameters ---------------------------------------------------------
    def stores(self) -> dict:
        out = {"proj": self.projector.params, "gnn": self.gnn.params}
        if self.head is not None:
            out["head"] = self.head.params
        return out

    def shared_stores(self) -> list:
        return [self.gnn.params] + ([self.head.params] if self.head is not None else [])

    def zero_grad(self):
        for s in self.stores().values():
            s.zero_grad()

    def snapshot(self) -> dict:
        return {f"{g}/{k}": v.copy() for g, s in self.stores().items() for k, v in s.items()}

    def restore(self, snap: dict):
        stores = self.stores()
        for key, v in snap.items():
            g, k = key.split("/", 1)
            stores[g].set_value(k, v)

    def load_shared(self, shared: ParamStore):
        for s in self.shared_stores():
            for k in s:
                if k in shared:
                    s.set_value(k, shared.value(k))

    # forward / backward -------------------------------------------------
    def embed(self):
        H0 = self.projector.forward(self.X)
        sa = translate(H0, self.bank, self.cfg.tau_s) if self.flags.bank else None
        if sa is not None and self.cfg.gnn_input == "translated":
            Z = sa.Q @ self.bank.B
        else:
            Z = H0
        return H0, sa, Z

    def layer_embeddings(self, tau: float | None = None) -> list:
        """Per-layer protocol-space embeddings ``[layer0, ..., layerL]``."""
        H0, sa, Z = self.embed()
        return self.gnn.forward(Z, self.ei, self.last_tau if tau is None else tau)

    def sketch(self, Q=None) -> np.ndarray:
        if Q is None:
            _, sa, _ = self.embed()
            if sa is None:
                return np.zeros(2)
            Q = sa.Q
        return conflict_sketch(Q, self.ei).as_array()

    def _task(self, HL, split, rng):
        if self.node_task:
            logits = self.head.forward(HL)
            idx = np.flatnonzero(self.tags == split)
            loss, g = cross_entropy(logits[idx], self.graph.labels[idx])
            full = np.zeros_like(logits)
            full[idx] = g
            return loss, full
        pos = self.pos[split]
        if split == gd.TRAIN:
            neg = gd.sample_non_edges(self.n, self.graph.edges, len(pos), rng)
        else:
            neg = self.neg[split]
        return link_loss(HL, pos, neg)

    def loss(self, tau: float, gap: GlobalAnchorPrototypes | None, split=gd.TRAIN, rng=None,
             backward: bool = True, task_only: bool = False):
        """Combined loss at temperature ``tau``; gradients accumulate into the stores.

        Returns ``(parts, total, grad_tau)`` with ``grad_tau`` None when
        ``backward`` is False.
        """
        fl = self.flags
        H0, sa, Z = self.embed()
        layers = self.gnn.forward(Z, self.ei, tau)
        task, g_top = self._task(layers[-1], split, rng)
        parts = {"task": task, "gap": 0.0, "ent": 0.0, "gap_skipped": False}
        lam = 0.0 if task_only else fl.lam
        beta = 0.0 if task_only else fl.beta
        stats = g_mu = g_ent = None
        if fl.bank and lam > 0:
            stats = anchor_conditional_means(H0, sa.Q, self.cfg.n_min)
            parts["gap"], g_mu, parts["gap_skipped"] = gap_loss(stats, gap, self.cfg.tau_c)
        if fl.bank and beta > 0:
            parts["ent"], g_ent = entropy_loss(sa.Q)
        total = task + lam * parts["gap"] + beta * parts["ent"]
        if not backward:
            return parts, total, None
        self.zero_grad()
        g_HL = self.head.backward(g_top) if self.node_task else g_top
        g_Z, g_tau = self.gnn.backward(g_HL)
        if fl.bank:
            g_Q = np.zeros_like(sa.Q)
            g_H0 = np.zeros_like(H0)
            if self.cfg.gnn_input == "translated":
                g_Q += g_Z @ self.bank.B.T
            else:
                g_H0 += g_Z
            if g_ent is not None:
                g_Q += beta * g_ent
            g_H0 += translate_backward(sa, self.bank, g_Q)
            if g_mu is not None and len(stats.active):
                g_H0 += lam * anchor_means_backward(stats, g_mu, self.n)
        else:
            g_H0 = g_Z
        self.projector.backward(g_H0)
        return parts, total, g_tau

    def choose_tau(self, controller: MetaController | None) -> float:
        if not self.flags.meta or controller is None:
            return 1.0 if not self.flags.meta else self.cfg.tau_init
        return controller.tau(self.sketch())

    def step(self, lr: float):
        for s in self.stores().values():
            s.sgd_step(lr)

    def predict_scores(self, split, tau=None):
        layers = self.layer_embeddings(tau)
        HL = layers[-1]
        if self.node_task:
            idx = np.flatnonzero(self.tags == split)
            return self.head.forward(HL)[idx], self.graph.labels[idx]
        pos, neg = self.pos[split], self.neg[split]
        s = np.r_[np.sum(HL[pos[:, 0]] * HL[pos[:, 1]], axis=1),
                  np.sum(HL[neg[:, 0]] * HL[neg[:, 1]], axis=1)]
        return s, np.r_[np.ones(len(pos)), np.zeros(len(neg))]

    def split_size(self, split) -> int:
        if self.node_task:
            return int(np.sum(self.tags == split))
        return len(self.pos[split]) + len(self.neg[split])


def auc_score(scores, labels) -> float:
    """Mann-Whitney AUC with ties counted as one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos, neg = scores[labels == 1], scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedMetric("AUC needs at least one positive and one negative pair")
    order = np.argsort(np.r_[pos, neg], kind="mergesort")
    allv = np.r_[pos, neg][order]
    ranks = np.empty(len(allv))
    i = 0
    while i < len(allv):
        j = i
        while j + 1 < len(allv) and allv[j + 1] == allv[i]:
            j += 1
        ranks[i:j + 1] = 0.5 * (i + j) + 1
        i = j + 1
    r = np.empty(len(allv))
    r[order] = ranks
    rp = r[:len(pos)].sum()
    return float((rp - len(pos) * (len(pos) + 1) / 2) / (len(pos) * len(neg)))


def evaluate_task(client: Client, split=gd.TEST, tau=None) -> float:
    """Accuracy (node classification) or AUC (link prediction) on ``split``."""
    if client.split_size(split) == 0:
        raise UndefinedMetric(f"client {client.cid} has an empty split {split}")
    s, y = client.predict_scores(split, tau)
    if client.node_task:
        return float(np.mean(np.argmax(s, axis=1) == y))
    return auc_score(s, y)


def compute_meta_gradient(client: Client, tau_k: float, h_step: float | None = None,
                          loss_fn=None):
    """Central difference of the validation task loss w.r.t. the temperature.

    Returns ``(g_k, flagged)``; ``flagged`` is True when no validation data
    exists (g_k = 0).  ``loss_fn(tau)`` overrides the validation loss (test hook).
    """
    if loss_fn is None:
        if client.split_size(gd.VAL) == 0:
            return 0.0, True

        def loss_fn(t):
            return client.loss(t, None, split=gd.VAL, backward=False, task_only=True)[0]["task"]
    tau_min = client.cfg.tau_min
    h = h_step if h_step is not None else max(1e-3, 0.01 * tau_k)
    hi = tau_k + h
    lo = max(tau_k - h, tau_min)
    if hi == lo:
        return 0.0, True
    return float((loss_fn(hi) - loss_fn(lo)) / (hi - lo)), False


def analytic_meta_gradient(client: Client, tau_k: float) -> float:
    """dL_val/dtau from the attention backward pass (validation of the finite difference)."""
    saved = client.snapshot()
    _, _, g_tau = client.loss(tau_k, None, split=gd.VAL, backward=True, task_only=True)
    client.zero_grad()
    client.restore(saved)
    return g_tau


def _guarded(client: Client, epoch: int, fn):
    """Run one loss evaluation, turning numeric blow-ups into a DivergenceError."""
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            parts, total, _ = fn()
    except InvalidArgument as exc:
        if "NaN" not in str(exc):
            raise
        raise DivergenceError(client.cid, epoch, str(exc)) from exc
    if not np.isfinite(total):
        raise DivergenceError(client.cid, epoch)
    return parts, total


def local_train_stage(client: Client, broadcast: ServerBroadcast, round_idx: int):
    """Local epochs of the combined objective, then the round's upload."""
    cfg = client.cfg
    fl = client.flags
    gap = GlobalAnchorPrototypes(broadcast.prototypes, broadcast.round)
    ctrl = None
    if fl.meta:
        ctrl = MetaController(tau_min=cfg.tau_min, tau_init=cfg.tau_init)
        ctrl.set_flat(broadcast.controller)
    rng = np.random.default_rng([client.seed, round_idx, client.cid, 1212])
    frag = {"task": 0.0, "gap": 0.0, "ent": 0.0, "gap_skipped": False}
    for epoch in range(cfg.local_epochs):
        tau = client.choose_tau(ctrl)
        parts, _ = _guarded(client, epoch, lambda: client.loss(tau, gap, rng=rng))
        client.step(cfg.lr)
        frag = parts
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            H0, sa, _ = client.embed()
            stats = anchor_conditional_means(H0, sa.Q, cfg.n_min)
            sketch = conflict_sketch(sa.Q, client.ei).as_array()
            tau = ctrl.tau(sketch) if fl.meta else 1.0
            g, flagged = compute_meta_gradient(client, tau) if fl.meta else (0.0, False)
    except InvalidArgument as exc:
        if "NaN" not in str(exc):
            raise
        raise DivergenceError(client.cid, cfg.local_epochs, str(exc)) from exc
    if not np.isfinite(g):
        raise DivergenceError(client.cid, cfg.local_epochs, "meta-gradient is not finite")
    client.last_tau = tau
    up = ClientUpload(client.cid, round_idx, stats.active, stats.means, stats.counts, sketch, g)
    frag = dict(frag, tau=tau, g=g, g_flagged=flagged, active=int(len(stats.active)))
    return up, frag


def local_train_fedavg(client: Client, shared: ParamStore, round_idx: int):
    cfg = client.cfg
    client.load_shared(shared)
    rng = np.random.default_rng([client.seed, round_idx, client.cid, 1212])
    parts = {}
    for epoch in range(cfg.local_epochs):
        parts, _ = _guarded(client, epoch, lambda: client.loss(1.0, None, rng=rng))
        client.step(cfg.lr)
    client.last_tau = 1.0
    return dict(parts, tau=1.0, g=0.0)


# --------------------------------------------------------------------------- rounds


@dataclass
class RoundMetrics:
    round: int
    clients: list
    server: dict


class Simulation:
    """Server plus clients for one (config, seed) run."""

    def __init__(self, cfg: RunConfig, seed: int, data: gd.FederatedGraph | None = None,
                 data_id: str | None = None):
        self.cfg = cfg.validate()
        self.seed = seed
        self.data = data if data is not None else build_federated(cfg, seed)
        self.data_id = data_id or data_hash(cfg, seed)
        self.flags = method_flags(cfg)
        self.bank = init_anchor_bank(cfg.anchors, cfg.d_p, cfg.bank_seed)
        self.clients = [Client(k, g, cfg, seed, self.bank) for k, g in enumerate(self.data.clients)]
        shared = None
        if self.flags.share or cfg.model_init == "common":
            init = common_model_init(cfg, seed, self.data.graph.class_count)
            for c in self.clients:
                c.load_shared(init)
            if self.flags.share:
                shared = init
        self.server = ServerState(gap_from_bank(self.bank),
                                  MetaController(seed, cfg.tau_min, cfg.tau_init),
                                  0, cfg.m_ema, cfg.eta_pi, cfg.config_hash(), shared)
        self.history: list = []

    @property
    def round(self) -> int:
        return self.server.round

    def broadcast(self) -> ServerBroadcast:
        s = self.server
        return ServerBroadcast(s.round, s.gap.H, s.controller.flat(), s.config_hash)

    def run_round(self, jobs: int = 1, order=None) -> RoundMetrics:
        """One synchronous round; atomic on failure (server and clients restored)."""
        cfg = self.cfg
        r = self.server.round
        snaps = [c.snapshot() for c in self.clients]
        taus = [c.last_tau for c in self.clients]
        order = list(range(len(self.clients))) if order is None else list(order)
        try:
            if self.flags.share:
                shared = self.server.shared
                frags = _map(lambda c: local_train_fedavg(c, shared, r),
                             [self.clients[i] for i in order], jobs)
                frags = _unpermute(frags, order)
                sizes = np.array([c.n for c in self.clients], dtype=np.float64)
                new_shared = aggregate_fedavg(
                    [ParamStore_merge(c.shared_stores()) for c in self.clients], sizes / sizes.sum())
                new_server = self.server.copy()
                new_server.shared = new_shared
                new_server.round = r + 1
                for c in self.clients:
                    c.load_shared(new_shared)
                n_shared = new_shared.size()
                payload = {"up_full": n_shared, "down_full": n_shared,
                           "up_gap_only": n_shared, "down_gap_only": n_shared}
            else:
                bc = deserialize(serialize(self.broadcast()))
                results = _map(lambda c: local_train_stage(c, bc, r),
                               [self.clients[i] for i in order], jobs)
                results = _unpermute(results, order)
                uploads = [deserialize(serialize(u)) for u, _ in results]
                frags = [f for _, f in results]
                new_server = self.server.copy()
                new_server.gap = update_gap(self.server.gap, uploads, cfg.m_ema)
                if self.flags.meta:
                    reports = [MetaReport(u.sketch, u.g, u.client) for u in uploads]
                    new_server.controller = meta_update(self.server.controller, reports,
                                                        cfg.eta_pi, cfg.g_max)
                new_server.round = r + 1
                up_full = max(sum(count_scalars(u, FULL).values()) for u in uploads)
                up_gap = max(sum(count_scalars(u, GAP_ONLY).values()) for u in uploads)
                payload = {"up_full": up_full, "down_full": sum(count_scalars(bc, FULL).values()),
                           "up_gap_only": up_gap,
                           "down_gap_only": sum(count_scalars(bc, GAP_ONLY).values())}
        except Exception:
            for c, s, t in zip(self.clients, snaps, taus):
                c.restore(s)
                c.last_tau = t
            raise
        self.server = new_server
        m = self._metrics(r + 1, frags, payload)
        self.history.append(m)
        return m

    def evaluate(self) -> RoundMetrics:
        return self._metrics(self.server.round, [{} for _ in self.clients], {})

    def _metrics(self, rnd, frags, payload) -> RoundMetrics:
        rows = []
        tot = {gd.VAL: [0.0, 0], gd.TEST: [0.0, 0]}
        for c, f in zip(self.clients, frags):
            row = {"client": c.cid, "task_loss": f.get("task", float("nan")),
                   "gap_loss": f.get("gap", 0.0), "ent_loss": f.get("ent", 0.0),
                   "tau": c.last_tau, "g": f.get("g", 0.0)}
            for split, name in ((gd.VAL, "val"), (gd.TEST, "test")):
                v = evaluate_task(c, split)
                w = c.split_size(split)
                row[name] = v
                tot[split][0] += v * w
                tot[split][1] += w
            rows.append(row)
        server = {"val": tot[gd.VAL][0] / tot[gd.VAL][1],
                  "test": tot[gd.TEST][0] / tot[gd.TEST][1]}
        server.update(payload)
        return RoundMetrics(rnd, rows, server)

    def run(self, rounds: int | None = None, jobs: int = 1, checkpoint_dir=None) -> RoundMetrics:
        rounds = self.cfg.rounds if rounds is None else rounds
        last = None
        while self.server.round < rounds:
            last = self.run_round(jobs)
            if checkpoint_dir is not None:
                self.save(Path(checkpoint_dir) / f"round_{self.server.round:04d}")
        return last if last is not None else self.evaluate()

    # checkpoints ------------------------------------------------------------
    def save(self, path):
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        (path / "server.srv").write_bytes(encode_server(self.server))
        arrays = {}
        for c in self.clients:
            for k, v in c.snapshot().items():
                arrays[f"{c.cid}/{k}"] = v
            arrays[f"{c.cid}/last_tau"] = np.array([c.last_tau])
        meta = json.dumps({"seed": self.seed, "round": self.server.round,
                           "config_hash": self.cfg.config_hash(), "data_hash": self.data_id,
                           "config": self.cfg.to_dict()}, sort_keys=True)
        (path / "clients.clt").write_bytes(encode_arrays(b"CLT1", arrays, meta))

    @classmethod
    def load(cls, path, cfg: RunConfig, data: gd.FederatedGraph | None = None) -> "Simulation":
        path = Path(path)
        arrays, meta = decode_arrays(b"CLT1", (path / "clients.clt").read_bytes())
        meta = json.loads(meta)
        if meta["config_hash"] != cfg.config_hash():
            raise InvalidArgument("checkpoint was written under a different config")
        sim = cls(cfg, meta["seed"], data, data_id=meta["data_hash"])
        sim.server = decode_server((path / "server.srv").read_bytes())
        for c in sim.clients:
            snap = {}
            for key, v in arrays.items():
                cid, rest = key.split("/", 1)
                if int(cid) == c.cid and rest != "last_tau":
                    snap[rest] = v
            c.restore(snap)
            c.last_tau = float(arrays[f"{c.cid}/last_tau"][0])
        return sim


def checkpoint_meta(path) -> dict:
    _, meta = decode_arrays(b"CLT1", (Path(path) / "clients.clt").read_bytes())
    return json.loads(meta)


def ParamStore_merge(stores) -> ParamStore:
    out = ParamStore()
    for s in stores:
        for k, v in s.items():
            out.add(k, v)
    return out


def _map(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _unpermute(results, order):
    out = [None] * len(results)
    for pos, i in enumerate(order):
        out[i] = results[pos]
    return out


# --------------------------------------------------------------------------- experiments

CSV_FIELDS = ("seed", "round", "client", "task_loss", "gap_loss", "ent_loss", "tau", "g",
              "val", "test", "up_full", "down_full", "up_gap_only", "down_gap_only")


def metrics_rows(seed, m: RoundMetrics) -> list:
    rows = []
    for c in m.clients:
        rows.append({"seed": seed, "round": m.round, **c})
    rows.append({"seed": seed, "round": m.round, "client": "server", **m.server})
    return rows


def run_seed(cfg: RunConfig, seed: int, data=None, data_id=None, jobs: int = 1,
             checkpoint_dir=None):
    sim = Simulation(cfg, seed, data, data_id)
    rows = metrics_rows(seed, sim.evaluate())
    if checkpoint_dir is not None and sim.round == 0:
        # the untrained state is a valid diagnostics baseline
        sim.save(Path(checkpoint_dir) / f"seed_{seed}" / "round_0000")
    while sim.round < cfg.rounds:
        m = sim.run_round(jobs)
        rows.extend(metrics_rows(seed, m))
        if checkpoint_dir is not None:
            sim.save(Path(checkpoint_dir) / f"seed_{seed}" / f"round_{sim.round:04d}")
    final = sim.history[-1] if sim.history else sim.evaluate()
    return sim, final, rows


def run_experiment(cfg: RunConfig, out_dir=None, jobs: int = 1, data=None, data_id=None,
                   checkpoints: bool = False) -> dict:
    """Every seed end to end; writes ``metrics.csv`` and ``summary.json`` when ``out_dir`` is set."""
    cfg.validate()
    per_seed, all_rows = {}, []
    ckpt = Path(out_dir) / "checkpoints" if (out_dir is not None and checkpoints) else None
    for s in cfg.seeds:
        _, final, rows = run_seed(cfg, s, data, data_id, jobs, ckpt)
        per_seed[str(s)] = {"val": final.server["val"], "test": final.server["test"]}
        all_rows.extend(rows)
    tests = np.array([v["test"] for v in per_seed.values()])
    summary = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "method": cfg.method,
        "task": cfg.task,
        "metric": "accuracy" if cfg.task == "node_classification" else "auc",
        "per_seed": per_seed,
        "mean": float(tests.mean()),
        "std": float(tests.std()),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(rows_to_csv(all_rows, cfg.config_hash()), encoding="utf-8")
        (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n",
                                          encoding="utf-8")
    return summary


def rows_to_csv(rows, config_hash: str) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=("config_hash",) + CSV_FIELDS, extrasaction="ignore",
                       lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({"config_hash": config_hash,
                    **{k: _fmt(r.get(k, "")) for k in CSV_FIELDS}})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


# --------------------------------------------------------------------------- diagnostics


def collect_diagnostics(sim: Simulation, top_n: int = 10, n_cent: int = diag.N_CENT) -> dict:
    """Drift, purity, calibration and energy reports for the current model state."""
    per_client, labels, Qs, alphas = [], [], [], []
    energy = {}
    for c in sim.clients:
        layers = c.layer_embeddings()
        per_client.append(layers)
        labels.append(c.graph.labels)
        alphas.append([(a, c.ei.src, c.ei.dst) for a in c.gnn.attention])
        energy[c.cid] = diag.energy_per_layer(layers, c.msg_edges)
        if c.flags.bank:
            Qs.append(c.embed()[1].Q)
    L = len(per_client[0])
    drift = [diag.centroid_drift([pc[l] for pc in per_client], labels, n_cent, layer=str(l))
             for l in range(L)]
    calib = []
    for l in range(L - 1):
        a = np.concatenate([al[l][0] for al in alphas])
        offs = np.cumsum([0] + [c.n for c in sim.clients[:-1]])
        src = np.concatenate([al[l][1] + o for al, o in zip(alphas, offs)])
        dst = np.concatenate([al[l][2] + o for al, o in zip(alphas, offs)])
        calib.append(diag.attention_calibration(a, src, dst, np.concatenate(labels)))
    purity = []
    if Qs:
        purity = anchor_purity(np.concatenate(Qs), np.concatenate(labels), top_n,
                               sim.data.graph.class_count)
    return {"drift": drift, "growth": diag.drift_growth(drift[0], drift[-1]),
            "purity": purity, "calibration": calib, "energy": energy}
