"""Server evolution: prototype EMA, temperature meta-controller, FedAvg aggregation."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binio import Reader, Writer
from .errors import InvalidArgument, ParseError
from .numcore import ParamStore, sigmoid, softplus
from .propagation import TAU_MIN, ConflictSketch
from .semantics import GlobalAnchorPrototypes

log = logging.getLogger(__name__)

HIDDEN = 16
CONTROLLER_NAMES = ("ctrl.W1", "ctrl.b1", "ctrl.W2", "ctrl.b2")


class MetaController:
    """``tau = tau_min + softplus(w2 . tanh(W1 D + b1) + b2)`` for a 2-d sketch D.

    The output layer starts at zero with its bias set so every client begins
    at ``tau_init``.
    """

    def __init__(self, seed: int = 0, tau_min: float = TAU_MIN, tau_init: float = 1.0,
                 hidden: int = HIDDEN):
        if tau_init <= tau_min:
            raise InvalidArgument("tau_init must exceed tau_min")
        rng = np.random.default_rng([seed, 808])
        self.tau_min = tau_min
        self.params = ParamStore()
        lim = np.sqrt(6.0 / (2 + hidden))
        self.params.add("ctrl.W1", rng.uniform(-lim, lim, size=(2, hidden)))
        self.params.add("ctrl.b1", np.zeros(hidden))
        self.params.add("ctrl.W2", np.zeros((hidden, 1)))
        self.params.add("ctrl.b2", np.array([np.log(np.expm1(tau_init - tau_min))]))

    @property
    def parameter_count(self) -> int:
        return self.params.size()

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params.value(k).ravel() for k in CONTROLLER_NAMES])

    def set_flat(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != self.parameter_count:
            raise InvalidArgument(f"expected {self.parameter_count} controller params")
        i = 0
        for k in CONTROLLER_NAMES:
            v = self.params.value(k)
            self.params.set_value(k, theta[i:i + v.size].reshape(v.shape))
            i += v.size

    def copy(self) -> "MetaController":
        c = MetaController.__new__(MetaController)
        c.tau_min = self.tau_min
        c.params = self.params.copy()
        return c

    def _raw(self, D):
        D = np.asarray(D, dtype=np.float64).reshape(2)
        h = np.tanh(D @ self.params.value("ctrl.W1") + self.params.value("ctrl.b1"))
        raw = float(h @ self.params.value("ctrl.W2")[:, 0] + self.params.value("ctrl.b2")[0])
        return D, h, raw

    def tau(self, D) -> float:
        return float(self.tau_min + softplus(self._raw(D)[2]))

    def tau_grad(self, D) -> np.ndarray:
        """Flat gradient of tau w.r.t. the controller parameters, in CONTROLLER_NAMES order."""
        D, h, raw = self._raw(D)
        g_raw = float(sigmoid(raw))
        W2 = self.params.value("ctrl.W2")[:, 0]
        g_pre = g_raw * W2 * (1.0 - h * h)
        return np.concatenate([np.outer(D, g_pre).ravel(), g_pre, g_raw * h, [g_raw]])


@dataclass
class PropagationTemperature:
    tau: float
    source: str = "controller"


def controller_forward(controller: MetaController, D_k) -> PropagationTemperature:
    D = D_k.as_array() if isinstance(D_k, ConflictSketch) else np.asarray(D_k, dtype=np.float64)
    if not np.all(np.isfinite(D)) or (D < 0).any():
        raise InvalidArgument("sketch must be finite and nonnegative")
    return PropagationTemperature(controller.tau(D), "controller")


@dataclass
class MetaReport:
    sketch: np.ndarray
    g: float
    client: int = -1


def meta_update(controller: MetaController, reports, eta_pi: float = 0.01,
                g_max: float | None = 10.0) -> MetaController:
    """One chain-rule step ``theta -= eta * sum_k g_k dtau_k/dtheta``; returns a new controller.

    Reports are summed in a canonical order so the result does not depend
    on arrival order.  Non-finite ``g_k`` are dropped.
    """
    if eta_pi <= 0:
        raise InvalidArgument("eta_pi must be positive")
    reports = list(reports)
    if not reports:
        raise InvalidArgument("meta_update needs at least one report")
    kept = []
    for r in reports:
        if not np.isfinite(r.g):
            log.warning("dropping non-finite meta-gradient from client %s", r.client)
            continue
        kept.append(r)
    kept.sort(key=lambda r: (r.client, tuple(np.asarray(r.sketch, dtype=float)), r.g))
    step = np.zeros(controller.parameter_count)
    for r in kept:
        g = float(np.clip(r.g, -g_max, g_max)) if g_max is not None else float(r.g)
        step += g * controller.tau_grad(r.sketch)
    out = controller.copy()
    out.set_flat(controller.flat() - eta_pi * step)
    return out


def update_gap(gap: GlobalAnchorPrototypes, uploads, m_ema: float = 0.9) -> GlobalAnchorPrototypes:
    """Count-weighted pooled anchor means blended into the prototypes by EMA.

    ``uploads`` holds objects with ``active``, ``means`` and ``counts``
    (AnchorStats or ClientUpload).  Rows are re-normalized; anchors without
    reporters keep their previous prototype.
    """
    if not 0 <= m_ema < 1:
        raise InvalidArgument("m_ema must be in [0, 1)")
    uploads = list(uploads)
    if not uploads:
        raise InvalidArgument("update_gap needs at least one upload")
    uploads.sort(key=lambda u: getattr(u, "client", 0))
    M, d = gap.H.shape
    sums = np.zeros((M, d))
    totals = np.zeros(M)
    for u in uploads:
        ids = np.asarray(u.active, dtype=np.int64)
        if ids.size == 0:
            continue
        cnt = np.asarray(u.counts, dtype=np.float64)
        sums[ids] += cnt[:, None] * np.asarray(u.means, dtype=np.float64)
        totals[ids] += cnt
    H = gap.H.copy()
    hit = totals > 0
    agg = sums[hit] / totals[hit, None]
    blended = m_ema * H[hit] + (1 - m_ema) * agg
    norms = np.linalg.norm(blended, axis=1, keepdims=True)
    fallback = np.linalg.norm(agg, axis=1, keepdims=True)
    blended = np.where(norms > 0, blended / np.where(norms > 0, norms, 1.0),
                       agg / np.where(fallback > 0, fallback, 1.0))
    H[hit] = blended
    return GlobalAnchorPrototypes(H, gap.round + 1)


def aggregate_fedavg(stores, weights, names=None) -> ParamStore:
    """Weighted mean of entries shared by every store (client-local entries are left out)."""
    stores = list(stores)
    w = np.asarray(weights, dtype=np.float64)
    if len(stores) != len(w) or not stores:
        raise InvalidArgument("one weight per parameter store required")
    if abs(w.sum() - 1.0) > 1e-9 or (w < 0).any():
        raise InvalidArgument("weights must be nonnegative and sum to 1")
    if names is None:
        names = [k for k in stores[0] if all(k in s for s in stores[1:])]
    out = ParamStore()
    for k in names:
        ref = stores[0].value(k).shape
        acc = np.zeros(ref)
        for s, wk in zip(stores, w):
            v = s.value(k)
            if v.shape != ref:
                raise InvalidArgument(f"shape mismatch on shared entry {k!r}: {v.shape} vs {ref}")
            acc += wk * v
        out.add(k, acc)
    return out


@dataclass
class ServerState:
    gap: GlobalAnchorPrototypes
    controller: MetaController
    round: int = 0
    m_ema: float = 0.9
    eta_pi: float = 0.01
    config_hash: str = ""
    shared: ParamStore | None = None  # fedavg global model, when used

    def copy(self) -> "ServerState":
        return ServerState(self.gap.copy(), self.controller.copy(), self.round, self.m_ema,
                           self.eta_pi, self.config_hash,
                           self.shared.copy() if self.shared is not None else None)


SRV_MAGIC = b"SRV1"


def encode_server(state: ServerState) -> bytes:
    w = Writer()
    w.raw(SRV_MAGIC)
    w.u32(1)
    w.u32(state.round)
    w.f64(state.m_ema)
    w.f64(state.eta_pi)
    w.f64(state.controller.tau_min)
    w.text(state.config_hash)
    M, d = state.gap.H.shape
    w.u32(M)
    w.u32(d)
    w.array(state.gap.H, "f8")
    theta = state.controller.flat()
    w.u32(theta.size)
    w.array(theta, "f8")
    shared = state.shared
    w.u32(0 if shared is None else len(shared))
    if shared is not None:
        for k, v in shared.items():
            w.text(k)
            w.u32(v.ndim)
            for s in v.shape:
                w.u32(s)
            w.array(v, "f8")
    return w.getvalue()


def decode_server(buf: bytes) -> ServerState:
    r = Reader(buf)
    r.magic(SRV_MAGIC)
    if r.u32("version") != 1:
        raise ParseError("unsupported server checkpoint version", 4)
    rnd = r.u32("round")
    m_ema, eta, tau_min = r.f64("m_ema"), r.f64("eta_pi"), r.f64("tau_min")
    h = r.text("config hash")
    M, d = r.u32("M"), r.u32("d_p")
    H = r.array(M * d, "f8", "prototypes").reshape(M, d)
    n = r.u32("controller size")
    theta = r.array(n, "f8", "controller")
    ctrl = MetaController(tau_min=tau_min, tau_init=tau_min + 1.0)
    ctrl.set_flat(theta)
    count = r.u32("shared entry count")
    shared = None
    if count:
        shared = ParamStore()
        for _ in range(count):
            name = r.text("entry name")
            shape = tuple(r.u32("dim") for _ in range(r.u32("ndim")))
            shared.add(name, r.array(int(np.prod(shape)), "f8", name).reshape(shape))
    r.done()
    return ServerState(GlobalAnchorPrototypes(H, rnd), ctrl, rnd, m_ema, eta, h, shared)


def save_server(state: ServerState, path):
    Path(path).write_bytes(encode_server(state))


def load_server(path) -> ServerState:
    return decode_server(Path(path).read_bytes())
