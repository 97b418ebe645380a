"""Training models: softmax regression and a one-hidden-layer ReLU MLP.

Parameters are flat float64 vectors. Layouts:

* softmax regression: ``W (d, C)`` row-major, then ``b (C,)``
* MLP: ``W1 (d, h)``, ``b1 (h,)``, ``W2 (h, C)``, ``b2 (C,)``

Losses are mean softmax cross-entropy plus an optional ``0.5 * l2 * ||w||^2``
ridge term (zero unless ``ModelSpec.l2`` is set).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError, InvariantError, ShapeError

SOFTMAX = "softmax"
MLP = "mlp"


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    num_classes: int
    hidden_units: int = 32
    l2: float = 0.0

    def __post_init__(self):
        if self.kind not in (SOFTMAX, MLP):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 0 or self.num_classes < 1:
            raise ValueError("input_dim must be >= 0 and num_classes >= 1")
        if self.kind == MLP and self.hidden_units < 1:
            raise ValueError("hidden_units must be positive")
        if self.l2 < 0:
            raise ValueError("l2 must be nonnegative")

    @property
    def param_count(self) -> int:
        d, c = self.input_dim, self.num_classes
        if self.kind == SOFTMAX:
            return (d + 1) * c
        h = self.hidden_units
        return (d + 1) * h + (h + 1) * c

    def init_params(self, rng: np.random.Generator, scale: float = 0.05) -> np.ndarray:
        return rng.uniform(-scale, scale, size=self.param_count)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "input_dim": self.input_dim,
                "num_classes": self.num_classes, "hidden_units": self.hidden_units,
                "l2": self.l2}


def softmax_regression(input_dim: int, num_classes: int, l2: float = 0.0) -> ModelSpec:
    return ModelSpec(SOFTMAX, input_dim, num_classes, l2=l2)


def mlp(input_dim: int, num_classes: int, hidden_units: int = 32, l2: float = 0.0) -> ModelSpec:
    return ModelSpec(MLP, input_dim, num_classes, hidden_units=hidden_units, l2=l2)


def _unpack(spec: ModelSpec, w: np.ndarray):
    d, c = spec.input_dim, spec.num_classes
    if spec.kind == SOFTMAX:
        W = w[: d * c].reshape(d, c)
        return W, w[d * c:]
    h = spec.hidden_units
    o = 0
    W1 = w[o:o + d * h].reshape(d, h)
    o += d * h
    b1 = w[o:o + h]
    o += h
    W2 = w[o:o + h * c].reshape(h, c)
    o += h * c
    return W1, b1, W2, w[o:]


def _check(spec: ModelSpec, w: np.ndarray, X: np.ndarray, y: np.ndarray):
    w = np.asarray(w, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if w.ndim != 1 or w.shape[0] != spec.param_count:
        raise ShapeError(f"expected {spec.param_count} parameters, got shape {w.shape}")
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ShapeError(f"expected features of shape (n, {spec.input_dim}), got {X.shape}")
    if y.shape != (X.shape[0],):
        raise ShapeError(f"labels shape {y.shape} does not match {X.shape[0]} examples")
    if X.shape[0] == 0:
        raise DomainError("empty batch")
    if y.min() < 0 or y.max() >= spec.num_classes:
        raise DomainError("label out of range")
    return w, X, y


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def logits(spec: ModelSpec, w: np.ndarray, X: np.ndarray) -> np.ndarray:
    if spec.kind == SOFTMAX:
        W, b = _unpack(spec, w)
        return X @ W + b
    W1, b1, W2, b2 = _unpack(spec, w)
    return np.maximum(X @ W1 + b1, 0.0) @ W2 + b2


def loss(spec: ModelSpec, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    """Mean cross-entropy of ``w`` on the batch ``(X, y)``."""
    w, X, y = _check(spec, w, X, y)
    logp = _log_softmax(logits(spec, w, X))
    value = -logp[np.arange(len(y)), y].mean()
    if spec.l2:
        value += 0.5 * spec.l2 * float(w @ w)
    return float(value)


def gradient(spec: ModelSpec, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of :func:`loss` with respect to the flat parameter vector."""
    w, X, y = _check(spec, w, X, y)
    n = X.shape[0]
    if spec.kind == SOFTMAX:
        W, b = _unpack(spec, w)
        p = np.exp(_log_softmax(X @ W + b))
        p[np.arange(n), y] -= 1.0
        p /= n
        g = np.concatenate([(X.T @ p).ravel(), p.sum(axis=0)])
    else:
        W1, b1, W2, b2 = _unpack(spec, w)
        pre = X @ W1 + b1
        hid = np.maximum(pre, 0.0)
        p = np.exp(_log_softmax(hid @ W2 + b2))
        p[np.arange(n), y] -= 1.0
        p /= n
        dhid = (p @ W2.T) * (pre > 0)
        g = np.concatenate([(X.T @ dhid).ravel(), dhid.sum(axis=0),
                            (hid.T @ p).ravel(), p.sum(axis=0)])
    if spec.l2:
        g += spec.l2 * w
    return g


def sgd_step(spec: ModelSpec, w: np.ndarray, X: np.ndarray, y: np.ndarray, eta: float) -> np.ndarray:
    if not math.isfinite(eta) or eta < 0:
        raise DomainError(f"learning rate must be finite and nonnegative, got {eta}")
    if eta == 0:
        return np.array(w, dtype=np.float64, copy=True)
    return w - eta * gradient(spec, w, X, y)


def weighted_average(models: Sequence[np.ndarray], weights: Iterable[float]) -> np.ndarray:
    """Convex combination of parameter vectors, accumulated left to right.

    Callers pass models in ascending node order; the fixed accumulation order
    makes the result bit-reproducible.
    """
    weights = [float(a) for a in weights]
    if len(models) == 0 or len(models) != len(weights):
        raise DomainError("need one weight per model and at least one model")
    if any(a < 0 for a in weights):
        raise DomainError("weights must be nonnegative")
    total = math.fsum(weights)
    if abs(total - 1.0) > 1e-9:
        raise InvariantError(f"aggregation weights sum to {total!r}, not 1")
    size = np.shape(models[0])
    acc = weights[0] * np.asarray(models[0], dtype=np.float64)
    for m, a in zip(models[1:], weights[1:]):
        if np.shape(m) != size:
            raise ShapeError("models have different parameter counts")
        acc = acc + a * m
    return acc


def accuracy(spec: ModelSpec, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    """Fraction of examples whose arg-max logit (lowest index on ties) is the label."""
    w, X, y = _check(spec, w, X, y)
    pred = np.argmax(logits(spec, w, X), axis=1)
    return float(np.mean(pred == y))
