"""Wire messages exchanged each round, their codec, and payload accounting.

See ``docs/wire.md`` for the normative byte layout.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .binio import Reader, Writer
from .errors import InvalidArgument, ParseError

MAGIC = b"STG1"
UPLOAD, BROADCAST = 1, 2

GAP_ONLY = "gap_only"
FULL = "full"


@dataclass
class ClientUpload:
    client: int = field(metadata={"header": True})
    round: int = field(metadata={"header": True})
    active: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    means: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    sketch: np.ndarray = field(default_factory=lambda: np.zeros(2))
    g: float = 0.0

    def __post_init__(self):
        self.active = np.asarray(self.active, dtype=np.int64).ravel()
        self.counts = np.asarray(self.counts, dtype=np.int64).ravel()
        self.means = np.asarray(self.means, dtype=np.float64)
        if self.means.ndim != 2:
            self.means = self.means.reshape(len(self.active), -1)
        self.sketch = np.asarray(self.sketch, dtype=np.float64).ravel()
        if self.active.size > 1 and (np.diff(self.active) <= 0).any():
            raise InvalidArgument("active anchor ids must be strictly increasing")
        if self.means.shape[0] != self.active.size or self.counts.size != self.active.size:
            raise InvalidArgument("means rows and counts must match the active id count")
        if self.sketch.size != 2:
            raise InvalidArgument("sketch must have two entries")


@dataclass
class ServerBroadcast:
    round: int = field(metadata={"header": True})
    prototypes: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    controller: np.ndarray = field(default_factory=lambda: np.zeros(0))
    config_hash: str = field(default="", metadata={"scalars": 1})

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        self.controller = np.asarray(self.controller, dtype=np.float64).ravel()


def serialize(msg) -> bytes:
    w = Writer()
    w.raw(MAGIC)
    if isinstance(msg, ClientUpload):
        w.u8(UPLOAD)
        w.u32(msg.round)
        w.u32(msg.client)
        w.u32(msg.active.size)
        w.array(msg.active, "u4")
        rows, cols = msg.means.shape
        w.u32(rows)
        w.u32(cols)
        w.array(msg.means, "f4")
        w.u32(msg.counts.size)
        w.array(msg.counts, "u4")
        w.array(msg.sketch, "f4")
        w.f32(msg.g)
    elif isinstance(msg, ServerBroadcast):
        w.u8(BROADCAST)
        w.u32(msg.round)
        M, d = msg.prototypes.shape
        w.u32(M)
        w.u32(d)
        w.array(msg.prototypes, "f4")
        w.u32(msg.controller.size)
        w.array(msg.controller, "f4")
        w.text(msg.config_hash)
    else:
        raise InvalidArgument(f"cannot serialize {type(msg).__name__}")
    return w.getvalue()


def deserialize(buf: bytes):
    r = Reader(buf)
    r.magic(MAGIC)
    kind_at = r.pos
    kind = r.u8("message type")
    rnd = r.u32("round")
    if kind == UPLOAD:
        client = r.u32("client id")
        n_at = r.pos
        n = r.u32("active id count")
        ids = r.array(n, "u4", "active ids").astype(np.int64)
        if n > 1 and (np.diff(ids) <= 0).any():
            raise ParseError("active ids not strictly increasing", n_at + 4)
        rows_at = r.pos
        rows, cols = r.u32("means rows"), r.u32("means cols")
        if rows != n:
            raise ParseError(f"means rows {rows} != active id count {n}", rows_at)
        means = r.array(rows * cols, "f4", "means").astype(np.float64).reshape(rows, cols)
        c_at = r.pos
        nc = r.u32("count length")
        if nc != n:
            raise ParseError(f"counts length {nc} != active id count {n}", c_at)
        counts = r.array(nc, "u4", "counts").astype(np.int64)
        sketch = r.array(2, "f4", "sketch").astype(np.float64)
        g = float(np.float32(r.f32("meta-gradient")))
        r.done()
        return ClientUpload(client, rnd, ids, means, counts, sketch, g)
    if kind == BROADCAST:
        M, d = r.u32("anchor count"), r.u32("protocol dim")
        H = r.array(M * d, "f4", "prototypes").astype(np.float64).reshape(M, d)
        n = r.u32("controller length")
        theta = r.array(n, "f4", "controller").astype(np.float64)
        h = r.text("config hash")
        r.done()
        return ServerBroadcast(rnd, H, theta, h)
    raise ParseError(f"unknown message type {kind}", kind_at)


@dataclass
class PayloadReport:
    mode: str
    upload: dict = field(default_factory=dict)
    download: dict = field(default_factory=dict)

    @property
    def upload_total(self) -> int:
        return int(sum(self.upload.values()))

    @property
    def download_total(self) -> int:
        return int(sum(self.download.values()))

    def ratio(self, baseline: float) -> float:
        return payload_ratio(self, baseline)

    def as_dict(self) -> dict:
        return {"mode": self.mode, "upload_total": self.upload_total,
                "download_total": self.download_total,
                "upload": dict(self.upload), "download": dict(self.download)}


def count_scalars(msg, mode: str = FULL) -> dict:
    """Per-field 32-bit scalar counts of a message's payload (header excluded).

    ``full``: every numeric payload field.  ``gap_only``: anchor means on
    upload and the prototype matrix on download.
    """
    if mode not in (FULL, GAP_ONLY):
        raise InvalidArgument(f"unknown accounting mode {mode!r}")
    if isinstance(msg, ClientUpload):
        k, d = msg.means.shape
        out = {"means": k * d}
        if mode == FULL:
            out.update(active=k, counts=k, sketch=2, g=1)
        return out
    if isinstance(msg, ServerBroadcast):
        out = {"prototypes": int(msg.prototypes.size)}
        if mode == FULL:
            out.update(controller=int(msg.controller.size), config_hash=1)
        return out
    raise InvalidArgument(f"cannot account {type(msg).__name__}")


def round_report(uploads, broadcast: ServerBroadcast, mode: str = FULL) -> PayloadReport:
    """Per-client payload of one round: the largest upload and one broadcast."""
    rep = PayloadReport(mode)
    rep.download = count_scalars(broadcast, mode)
    worst = {}
    for u in uploads:
        c = count_scalars(u, mode)
        if sum(c.values()) >= sum(worst.values()):
            worst = c
    rep.upload = worst
    return rep


def payload_ratio(report, baseline: float) -> float:
    """``baseline / max(upload, download)`` scalars per round and client."""
    if not baseline > 0:
        raise InvalidArgument("baseline parameter count must be positive")
    if isinstance(report, PayloadReport):
        stage = max(report.upload_total, report.download_total)
    else:
        stage = float(report)
    return float(baseline) / stage


def reflective_scalar_count(msg, mode: str = FULL) -> int:
    """Independent count by walking dataclass fields (numeric payload only)."""
    total = 0
    for f in dataclasses.fields(msg):
        if f.metadata.get("header"):
            continue
        if mode == GAP_ONLY and f.name not in ("means", "prototypes"):
            continue
        v = getattr(msg, f.name)
        if "scalars" in f.metadata:
            total += f.metadata["scalars"]
        else:
            total += int(np.asarray(v).size)
    return total
