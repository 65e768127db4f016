"""Client-side semantic calibration against a frozen anchor bank."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .binio import Reader, Writer
from .errors import DegenerateInput, InvalidArgument, ParseError
from .numcore import (Linear, ParamStore, normalize_rows, normalize_rows_backward,
                      safe_log, softmax_rows, softmax_rows_backward)


@dataclass(frozen=True)
class AnchorBank:
    B: np.ndarray

    def __post_init__(self):
        self.B.setflags(write=False)

    @property
    def M(self) -> int:
        return self.B.shape[0]

    @property
    def d_p(self) -> int:
        return self.B.shape[1]

    def digest(self) -> str:
        return hashlib.sha256(self.B.tobytes()).hexdigest()


@dataclass
class SemanticAssignment:
    Q: np.ndarray
    tau_s: float
    # cached for backward
    unit: np.ndarray = field(default=None, repr=False)
    norms: np.ndarray = field(default=None, repr=False)


@dataclass
class AnchorStats:
    active: np.ndarray      # sorted anchor ids with count >= n_min
    means: np.ndarray       # (|active|, d_p)
    counts: np.ndarray      # (|active|,)
    assignment: np.ndarray = field(default=None, repr=False)  # node -> hard anchor


@dataclass
class GlobalAnchorPrototypes:
    H: np.ndarray
    round: int = 0

    def copy(self):
        return GlobalAnchorPrototypes(self.H.copy(), self.round)


def init_anchor_bank(M: int, d_p: int, seed: int = 0) -> AnchorBank:
    """Orthonormal rows via QR when M <= d_p, otherwise unit-normalized Gaussian rows."""
    if M < 2 or d_p < 2:
        raise InvalidArgument("need M >= 2 and d_p >= 2")
    rng = np.random.default_rng([seed, 707])
    G = rng.standard_normal((max(M, d_p), d_p) if M > d_p else (d_p, M))
    if M <= d_p:
        Qm, R = np.linalg.qr(G)
        Qm = Qm * np.sign(np.diag(R))
        B = Qm.T.copy()
    else:
        B = G / np.linalg.norm(G, axis=1, keepdims=True)
    return AnchorBank(np.ascontiguousarray(B, dtype=np.float64))


def gap_from_bank(bank: AnchorBank) -> GlobalAnchorPrototypes:
    return GlobalAnchorPrototypes(np.array(bank.B, dtype=np.float64), 0)


class Projector:
    """Trainable linear map from fused masked modality blocks into protocol space."""

    def __init__(self, in_dim: int, d_p: int, rng=None):
        self.layer = Linear(in_dim, d_p, rng=rng, prefix="proj.")
        self.params: ParamStore = self.layer.params

    @property
    def in_dim(self):
        return self.layer.in_dim

    def forward(self, X):
        if X.shape[1] != self.in_dim:
            raise InvalidArgument(f"projector expects {self.in_dim} inputs, got {X.shape[1]}")
        return self.layer.forward(X)

    def backward(self, gH):
        return self.layer.backward(gH)


def fuse_and_project(g, projector: Projector) -> np.ndarray:
    return projector.forward(g.fused())


def translate(H: np.ndarray, bank: AnchorBank, tau_s: float) -> SemanticAssignment:
    """Temperature-scaled cosine softmax of each embedding against the anchors."""
    if not tau_s > 0:
        raise InvalidArgument("tau_s must be positive")
    try:
        unit, norms = normalize_rows(H)
    except DegenerateInput as e:
        raise DegenerateInput(f"node embedding is degenerate: {e}") from None
    Q = softmax_rows(unit @ bank.B.T, tau_s)
    return SemanticAssignment(Q, tau_s, unit, norms)


def translate_backward(sa: SemanticAssignment, bank: AnchorBank, gQ: np.ndarray) -> np.ndarray:
    g_cos = softmax_rows_backward(sa.Q, gQ, sa.tau_s)
    return normalize_rows_backward(sa.unit, sa.norms, g_cos @ bank.B)


def kl_projection_objective(q, cos, tau_s) -> float:
    """Linear cosine reward plus KL to the uniform prior; minimized by :func:`translate`."""
    q = np.asarray(q, dtype=np.float64)
    M = q.shape[-1]
    kl = np.sum(np.where(q > 0, q * np.log(np.maximum(q, 1e-300) * M), 0.0), axis=-1)
    return -(q * cos).sum(axis=-1) + tau_s * kl


def entropy_loss(Q: np.ndarray):
    """Negative Shannon entropy of the mean assignment, with its gradient w.r.t. Q."""
    n = Q.shape[0]
    qbar = Q.mean(axis=0)
    lg = safe_log(qbar)
    loss = float(np.sum(qbar * lg))
    grad = np.broadcast_to((lg + 1.0) / n, Q.shape).copy()
    return loss, grad


def hard_assign(Q: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest anchor id on ties
    return np.argmax(Q, axis=1)


def anchor_conditional_means(H: np.ndarray, Q: np.ndarray, n_min: int = 1) -> AnchorStats:
    if H.shape[0] != Q.shape[0]:
        raise InvalidArgument("H and Q must have the same number of rows")
    a = hard_assign(Q)
    M = Q.shape[1]
    counts = np.bincount(a, minlength=M)
    sums = np.zeros((M, H.shape[1]))
    np.add.at(sums, a, H)
    active = np.flatnonzero(counts >= max(n_min, 1))
    means = sums[active] / counts[active, None]
    return AnchorStats(active, means, counts[active], a)


def anchor_means_backward(stats: AnchorStats, g_means: np.ndarray, n_nodes: int) -> np.ndarray:
    """Scatter gradients on the means back to member rows of H."""
    gH = np.zeros((n_nodes, g_means.shape[1]))
    if n_nodes == 0 or len(stats.active) == 0:
        return gH
    lookup = np.full(max(int(stats.assignment.max()), int(stats.active.max())) + 1, -1)
    lookup[stats.active] = np.arange(len(stats.active))
    row = lookup[stats.assignment]
    member = row >= 0
    gH[member] = g_means[row[member]] / stats.counts[row[member], None]
    return gH


def gap_loss(stats: AnchorStats, gap: GlobalAnchorPrototypes, tau_c: float):
    """InfoNCE of each active anchor mean against all global prototypes.

    Returns ``(loss, grad_means, skipped)``; ``skipped`` is True when the
    client has no active anchors, in which case loss and gradient are zero.
    """
    if not tau_c > 0:
        raise InvalidArgument("tau_c must be positive")
    k = len(stats.active)
    if k == 0:
        return 0.0, np.zeros((0, gap.H.shape[1])), True
    mu_unit, mu_norm = normalize_rows(stats.means)
    P_unit, _ = normalize_rows(gap.H)
    logits = mu_unit @ P_unit.T
    p = softmax_rows(logits, tau_c)
    rows = np.arange(k)
    loss = float(-safe_log(p[rows, stats.active]).mean())
    g_logits = p.copy()
    g_logits[rows, stats.active] -= 1.0
    g_logits /= k * tau_c
    g_mu = normalize_rows_backward(mu_unit, mu_norm, g_logits @ P_unit)
    return loss, g_mu, False


@dataclass
class PurityEntry:
    anchor: int
    count: int
    dominant: int
    purity: float
    histogram: np.ndarray


def anchor_purity(Q: np.ndarray, labels, top_n: int = 10, class_count: int | None = None) -> list:
    """Dominant-class purity of the ``top_n`` most activated anchors (hard assignment)."""
    M = Q.shape[1]
    if top_n > M:
        raise InvalidArgument("top_n must not exceed the anchor count")
    labels = np.asarray(labels, dtype=np.int64)
    C = class_count or int(labels.max()) + 1
    a = hard_assign(Q)
    hist = np.zeros((M, C), dtype=np.int64)
    np.add.at(hist, (a, labels), 1)
    counts = hist.sum(axis=1)
    order = sorted(range(M), key=lambda i: (-counts[i], i))[:top_n]
    out = []
    for i in order:
        if counts[i] == 0:
            continue
        dom = int(np.argmax(hist[i]))
        out.append(PurityEntry(i, int(counts[i]), dom, float(hist[i, dom] / counts[i]), hist[i]))
    return out


BANK_MAGIC = b"ANB1"


def save_bank(bank: AnchorBank, path):
    w = Writer()
    w.raw(BANK_MAGIC)
    w.u32(1)
    w.u32(bank.M)
    w.u32(bank.d_p)
    w.array(bank.B, "f8")
    Path(path).write_bytes(w.getvalue())


def load_bank(path) -> AnchorBank:
    return decode_bank(Path(path).read_bytes())


def decode_bank(buf: bytes) -> AnchorBank:
    r = Reader(buf)
    r.magic(BANK_MAGIC)
    if r.u32("version") != 1:
        raise ParseError("unsupported bank version", 4)
    M, d = r.u32("M"), r.u32("d_p")
    B = r.array(M * d, "f8", "bank rows").reshape(M, d)
    r.done()
    return AnchorBank(np.ascontiguousarray(B))
