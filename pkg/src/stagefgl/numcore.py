"""Dense float64 math and the layer-level differentiation contract.

Matrices are plain ``numpy.ndarray`` objects of dtype float64.  Every trainable
layer exposes ``forward``/``backward`` and keeps its parameters in a
:class:`ParamStore`; :func:`grad_check` validates any such layer against
central finite differences.
"""
from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Iterator

import numpy as np

from .errors import DegenerateInput, EvaluationError, InvalidArgument

LOG_EPS = 1e-12


def as_matrix(x, name="matrix") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise InvalidArgument(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidArgument(f"{name} contains non-finite entries")
    return a


def safe_log(x):
    return np.log(np.maximum(x, LOG_EPS))


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax_rows(logits, temperature: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``logits / temperature`` with max subtraction."""
    if not temperature > 0:
        raise InvalidArgument(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64)
    if np.isnan(z).any():
        raise InvalidArgument("logits contain NaN")
    z = z / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(p: np.ndarray, grad_p: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Gradient w.r.t. the logits given the softmax output ``p``."""
    inner = np.sum(grad_p * p, axis=-1, keepdims=True)
    return p * (grad_p - inner) / temperature


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise InvalidArgument(f"length mismatch: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateInput("cosine similarity of a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def normalize_rows(x: np.ndarray):
    """Return (unit rows, row norms). Zero rows raise :class:`DegenerateInput`."""
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise DegenerateInput(f"row {int(bad[0])} has zero norm")
    return x / norms[:, None], norms


def normalize_rows_backward(unit: np.ndarray, norms: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    inner = np.sum(grad_unit * unit, axis=1, keepdims=True)
    return (grad_unit - unit * inner) / norms[:, None]


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape)."""
    if not h > 0:
        raise InvalidArgument("step h must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if np.isnan(fp) or np.isnan(fm):
            raise EvaluationError(f"function returned NaN at coordinate {i}")
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(x.shape)


class ParamStore:
    """Named trainable arrays, each paired with a gradient buffer of equal shape."""

    def __init__(self):
        self._values: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self._grads: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def add(self, name: str, value) -> np.ndarray:
        if name in self._values:
            raise InvalidArgument(f"duplicate parameter name {name!r}")
        v = np.array(value, dtype=np.float64)
        self._values[name] = v
        self._grads[name] = np.zeros_like(v)
        return v

    def __contains__(self, name):
        return name in self._values

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def names(self):
        return list(self._values)

    def value(self, name) -> np.ndarray:
        return self._values[name]

    def grad(self, name) -> np.ndarray:
        return self._grads[name]

    def set_value(self, name, value):
        v = np.asarray(value, dtype=np.float64)
        if v.shape != self._values[name].shape:
            raise InvalidArgument(
                f"shape mismatch for {name!r}: {v.shape} vs {self._values[name].shape}")
        self._values[name][...] = v

    def accumulate(self, name, g):
        self._grads[name] += g

    def zero_grad(self):
        for g in self._grads.values():
            g[...] = 0.0

    def items(self):
        return self._values.items()

    def size(self) -> int:
        return int(sum(v.size for v in self._values.values()))

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, v in self._values.items():
            out.add(k, v.copy())
        return out

    def state(self) -> dict:
        return {k: v.copy() for k, v in self._values.items()}

    def load(self, state: dict):
        for k, v in state.items():
            self.set_value(k, v)

    def sgd_step(self, lr: float):
        for k, v in self._values.items():
            v -= lr * self._grads[k]


class Identity:
    def __init__(self):
        self.params = ParamStore()

    def forward(self, x):
        return np.asarray(x, dtype=np.float64)

    def backward(self, gy):
        return gy


class Linear:
    """Affine map ``x @ W + b``."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None,
                 prefix: str = "", bias: bool = True):
        rng = rng or np.random.default_rng(0)
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        self.params = ParamStore()
        self.w_name = prefix + "weight"
        self.b_name = prefix + "bias" if bias else None
        self.params.add(self.w_name, rng.uniform(-limit, limit, size=(in_dim, out_dim)))
        if bias:
            self.params.add(self.b_name, np.zeros(out_dim))
        self._x = None

    @property
    def in_dim(self):
        return self.params.value(self.w_name).shape[0]

    def forward(self, x):
        self._x = np.asarray(x, dtype=np.float64)
        y = self._x @ self.params.value(self.w_name)
        if self.b_name:
            y = y + self.params.value(self.b_name)
        return y

    def backward(self, gy):
        self.params.accumulate(self.w_name, self._x.T @ gy)
        if self.b_name:
            self.params.accumulate(self.b_name, gy.sum(axis=0))
        return gy @ self.params.value(self.w_name).T


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient w.r.t. ``logits``."""
    n = logits.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(logits)
    p = softmax_rows(logits)
    idx = np.arange(n)
    loss = float(-safe_log(p[idx, labels]).mean())
    g = p.copy()
    g[idx, labels] -= 1.0
    return loss, g / n


class SoftmaxCrossEntropy:
    """Linear classification head followed by mean cross-entropy (scalar output)."""

    def __init__(self, in_dim: int, n_classes: int, labels, rng=None):
        self.linear = Linear(in_dim, n_classes, rng=rng, prefix="head.")
        self.params = self.linear.params
        self.labels = np.asarray(labels, dtype=np.int64)
        self._g = None

    def forward(self, x):
        loss, self._g = cross_entropy(self.linear.forward(x), self.labels)
        return loss

    def backward(self, gy=1.0):
        return self.linear.backward(self._g * gy)


def grad_check(layer, input_shape, seed: int = 0, h: float = 1e-6, x=None) -> float:
    """Worst relative error between analytic and finite-difference gradients.

    The layer's output is reduced to a scalar through a fixed random
    projection (or used directly when it is already scalar).  Errors are
    ``|analytic - numeric| / max(1, |numeric|)`` over inputs and parameters.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(input_shape) if x is None else np.array(x, dtype=np.float64)
    y0 = np.asarray(layer.forward(x))
    proj = rng.standard_normal(y0.shape) if y0.ndim else np.array(1.0)

    def objective(_=None):
        return float(np.sum(np.asarray(layer.forward(x)) * proj))

    objective()
    params = getattr(layer, "params", None)
    if params is not None:
        params.zero_grad()
    gx = layer.backward(proj if y0.ndim else 1.0)
    analytic = {"__input__": np.array(gx, dtype=np.float64)}
    if params is not None:
        analytic.update({k: params.grad(k).copy() for k in params})

    worst = 0.0

    def fx(xv):
        return float(np.sum(np.asarray(layer.forward(xv)) * proj))

    numeric = finite_diff_grad(fx, x, h)
    worst = max(worst, _rel_err(analytic["__input__"], numeric))
    if params is not None:
        for k in params:
            value = params.value(k)

            def fp(v, k=k):
                saved = params.value(k).copy()
                params.set_value(k, v)
                out = objective()
                params.set_value(k, saved)
                return out

            numeric = finite_diff_grad(fp, value.copy(), h)
            worst = max(worst, _rel_err(analytic[k], numeric))
    return worst


def _rel_err(a, n) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(np.shape(n))
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(n))))
