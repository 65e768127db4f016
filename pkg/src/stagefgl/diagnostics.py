"""Failure-chain measurements: centroid drift, purity shifts, attention calibration.

Every builder is a pure function of its inputs; reports serialize to JSON
with ``to_dict``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .propagation import dirichlet_energy
from .semantics import PurityEntry

N_CENT = 5
HIST_BINS = 20


@dataclass
class DriftReport:
    """Class-centroid distances between client pairs in one embedding space."""

    layer: str
    distances: dict = field(default_factory=dict)  # class -> {(k, j): distance}
    class_means: dict = field(default_factory=dict)
    overall: float = float("nan")
    empty: bool = False

    def pairs(self, c) -> dict:
        return self.distances.get(c, {})

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "empty": self.empty,
            "overall": _num(self.overall),
            "class_means": {str(c): _num(v) for c, v in sorted(self.class_means.items())},
            "distances": {str(c): {f"{k}-{j}": _num(d) for (k, j), d in sorted(p.items())}
                          for c, p in sorted(self.distances.items())},
        }


def centroid_drift(embeddings, labels, n_cent: int = N_CENT, layer: str = "0") -> DriftReport:
    """Euclidean distances between per-client class means for every shared class.

    ``embeddings[k]`` is client k's node matrix and ``labels[k]`` its labels.
    A (class, client) centroid counts only with at least ``n_cent`` nodes.
    The overall mean averages every (class, pair) distance.
    """
    if len(embeddings) != len(labels):
        raise ValueError("one label vector per client required")
    cents = []
    for H, y in zip(embeddings, labels):
        H = np.asarray(H, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        cents.append({int(c): H[y == c].mean(axis=0)
                      for c in np.unique(y) if np.sum(y == c) >= n_cent})
    rep = DriftReport(layer)
    classes = sorted(set().union(*[set(c) for c in cents])) if cents else []
    every = []
    for c in classes:
        holders = [k for k, ck in enumerate(cents) if c in ck]
        pairs = {}
        for a in range(len(holders)):
            for b in range(a + 1, len(holders)):
                k, j = holders[a], holders[b]
                pairs[(k, j)] = float(np.linalg.norm(cents[k][c] - cents[j][c]))
        if pairs:
            rep.distances[c] = pairs
            rep.class_means[c] = float(np.mean(list(pairs.values())))
            every.extend(pairs.values())
    if every:
        rep.overall = float(np.mean(every))
    else:
        rep.empty = True
    return rep


def drift_growth(before: DriftReport, after: DriftReport) -> dict:
    """Percent growth of mean drift from ``before`` to ``after``, overall and per class.

    Only (class, pair) entries present in both reports enter, so coverage
    matches.  Classes with zero initial mean get ``None`` and are listed in
    ``undefined``.
    """
    per_class, undefined = {}, []
    b_all, a_all = [], []
    for c in sorted(set(before.distances) & set(after.distances)):
        shared = sorted(set(before.distances[c]) & set(after.distances[c]))
        if not shared:
            continue
        b = np.array([before.distances[c][p] for p in shared])
        a = np.array([after.distances[c][p] for p in shared])
        b_all.extend(b)
        a_all.extend(a)
        if b.mean() == 0:
            per_class[c] = None
            undefined.append(c)
        else:
            per_class[c] = float((a.mean() - b.mean()) / b.mean() * 100.0)
    overall = None
    if b_all and np.mean(b_all) > 0:
        overall = float((np.mean(a_all) - np.mean(b_all)) / np.mean(b_all) * 100.0)
    return {"overall": overall, "per_class": per_class, "undefined": undefined}


def _distribution(e: PurityEntry) -> np.ndarray:
    h = np.asarray(e.histogram, dtype=np.float64)
    return h / h.sum()


def purity_delta(before, after) -> dict:
    """Purity gains and assignment-distribution deltas over the union of top anchors.

    ``before`` and ``after`` are lists of PurityEntry.  Anchors missing from
    one side get ``None`` gain and no delta row and are listed in ``missing``.
    Delta rows of shared anchors sum to zero.
    """
    b = {e.anchor: e for e in before}
    a = {e.anchor: e for e in after}
    anchors = sorted(set(b) | set(a))
    gains, delta, missing = {}, {}, []
    for i in anchors:
        if i in a and i in b:
            gains[i] = a[i].purity - b[i].purity
            delta[i] = _distribution(a[i]) - _distribution(b[i])
        else:
            gains[i] = None
            missing.append(i)
    shared = [gains[i] for i in anchors if gains[i] is not None]
    return {
        "anchors": anchors,
        "gains": gains,
        "delta": delta,
        "missing": missing,
        "mean_before": _mean_purity(before),
        "mean_after": _mean_purity(after),
        "mean_gain": float(np.mean(shared)) if shared else None,
    }


def _mean_purity(entries) -> float | None:
    return float(np.mean([e.purity for e in entries])) if entries else None


def mean_purity(entries) -> float | None:
    return _mean_purity(entries)


@dataclass
class BucketStats:
    count: int
    mean: float | None
    std: float | None
    histogram: list

    def to_dict(self):
        return {"count": self.count, "mean": _num(self.mean), "std": _num(self.std),
                "histogram": list(self.histogram)}


@dataclass
class CalibrationReport:
    homophilous: BucketStats
    heterophilous: BucketStats
    separation: float | None
    bins: list

    @property
    def flagged(self) -> bool:
        return self.homophilous.count == 0 or self.heterophilous.count == 0

    def to_dict(self):
        return {"homophilous": self.homophilous.to_dict(),
                "heterophilous": self.heterophilous.to_dict(),
                "separation": _num(self.separation), "flagged": self.flagged,
                "bins": [float(x) for x in self.bins]}


def _bucket(w, edges_bins) -> BucketStats:
    hist = np.histogram(w, bins=edges_bins)[0].astype(int).tolist()
    if len(w) == 0:
        return BucketStats(0, None, None, hist)
    return BucketStats(int(len(w)), float(np.mean(w)), float(np.std(w)), hist)


def attention_calibration(alpha, src, dst, labels, bins: int = HIST_BINS) -> CalibrationReport:
    """Attention statistics for intra-class versus inter-class message edges.

    ``alpha[e]`` is the weight of directed edge ``src[e] -> dst[e]``; self-loops
    are excluded.  The separation is ``mean_homo - mean_hetero`` (None when
    either bucket is empty).
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    keep = src != dst
    same = y[src] == y[dst]
    grid = np.linspace(0.0, 1.0, bins + 1)
    homo = _bucket(alpha[keep & same], grid)
    hetero = _bucket(alpha[keep & ~same], grid)
    sep = None if homo.mean is None or hetero.mean is None else homo.mean - hetero.mean
    return CalibrationReport(homo, hetero, sep, grid.tolist())


def energy_per_layer(layers, edges) -> list:
    return [dirichlet_energy(H, edges) for H in layers]


def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if np.isfinite(x) else None


def purity_to_dict(entries) -> list:
    return [{"anchor": e.anchor, "count": e.count, "dominant": e.dominant,
             "purity": e.purity, "histogram": np.asarray(e.histogram).astype(int).tolist()}
            for e in entries]


def purity_delta_to_dict(pd: dict) -> dict:
    return {
        "anchors": pd["anchors"],
        "gains": {str(i): _num(g) for i, g in pd["gains"].items()},
        "delta": {str(i): row.tolist() for i, row in pd["delta"].items()},
        "missing": pd["missing"],
        "mean_before": _num(pd["mean_before"]),
        "mean_after": _num(pd["mean_after"]),
        "mean_gain": _num(pd["mean_gain"]),
    }


def dumps(report) -> str:
    """Canonical JSON text for a report or report dict."""
    obj = report.to_dict() if hasattr(report, "to_dict") else report
    return json.dumps(obj, sort_keys=True, indent=2)
