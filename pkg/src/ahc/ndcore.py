"""Small dense numeric kernel shared by the rest of the package.

Vectors and matrices are plain float64 numpy arrays. A "parameter collection"
is a ``dict`` mapping names to arrays; every update here is pure and returns a
new dict.
"""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

Params = dict[str, np.ndarray]


class ShapeError(ValueError):
    pass


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")
    return arr


def linear_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Affine map ``x @ W.T + b`` for a single vector or a row batch."""
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise ShapeError(
            f"linear_forward: x{x.shape}, W{W.shape}, b{b.shape} do not agree")
    return _check_finite(x @ W.T + b, "linear_forward output")


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    if a.size == 0:
        raise ShapeError("mse of empty arrays")
    diff = a - b
    return float(np.mean(diff * diff))


def finite_diff_grad(f: Callable[[np.ndarray], float], p: np.ndarray,
                     h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector.

    Used as the independent oracle for every analytic gradient in the package.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    p = np.array(p, dtype=np.float64).ravel()
    grad = np.empty_like(p)
    for i in range(p.size):
        orig = p[i]
        p[i] = orig + h
        fp = float(f(p.copy()))
        p[i] = orig - h
        fm = float(f(p.copy()))
        p[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite evaluation at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def _check_matching(params: Mapping[str, np.ndarray],
                    grads: Mapping[str, np.ndarray]) -> None:
    if params.keys() != grads.keys():
        raise ShapeError(
            f"parameter names differ: {sorted(params)} vs {sorted(grads)}")
    for k in params:
        if np.shape(params[k]) != np.shape(grads[k]):
            raise ShapeError(
                f"{k}: param shape {np.shape(params[k])} != grad shape "
                f"{np.shape(grads[k])}")


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             lr: float) -> Params:
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    _check_matching(params, grads)
    return {k: params[k] - lr * grads[k] for k in params}


class Adam:
    """Adam with decoupled weight decay, keyed by parameter name.

    ``step`` returns new parameters; the moment buffers are the only mutable
    state and grow automatically when a parameter tensor gains rows (a
    classifier head expanding to new classes).
    """

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: Params = {}
        self.v: Params = {}
        self.t: dict[str, int] = {}

    def _state(self, name: str, shape: tuple) -> tuple[np.ndarray, np.ndarray]:
        m = self.m.get(name)
        if m is None:
            m = self.m[name] = np.zeros(shape)
            self.v[name] = np.zeros(shape)
            self.t[name] = 0
        elif m.shape != shape:
            pad = [(0, n - o) for n, o in zip(shape, m.shape)]
            self.m[name] = np.pad(m, pad)
            self.v[name] = np.pad(self.v[name], pad)
        return self.m[name], self.v[name]

    def step(self, params: Mapping[str, np.ndarray],
             grads: Mapping[str, np.ndarray]) -> Params:
        _check_matching(params, grads)
        out = {}
        for k, p in params.items():
            g = grads[k]
            m, v = self._state(k, p.shape)
            m = self.m[k] = self.b1 * m + (1 - self.b1) * g
            v = self.v[k] = self.b2 * v + (1 - self.b2) * g * g
            self.t[k] += 1
            t = self.t[k]
            mhat = m / (1 - self.b1 ** t)
            vhat = v / (1 - self.b2 ** t)
            new = p - self.lr * mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay:
                new = new - self.lr * self.weight_decay * p
            out[k] = new
        return out


def flatten(params: Mapping[str, np.ndarray]) -> np.ndarray:
    if not params:
        return np.zeros(0)
    return np.concatenate([np.ravel(params[k]) for k in params])


def unflatten(flat: np.ndarray, like: Mapping[str, np.ndarray]) -> Params:
    flat = np.asarray(flat, dtype=np.float64)
    total = sum(np.size(v) for v in like.values())
    if flat.size != total:
        raise ShapeError(f"flat vector has {flat.size} entries, expected {total}")
    out, i = {}, 0
    for k, v in like.items():
        n = np.size(v)
        out[k] = flat[i:i + n].reshape(np.shape(v)).copy()
        i += n
    return out


def add(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray],
        scale: float = 1.0) -> Params:
    """``a + scale * b`` over the union of names (missing entries count as 0)."""
    out = {k: np.array(v, dtype=np.float64) for k, v in a.items()}
    for k, v in b.items():
        out[k] = out[k] + scale * v if k in out else scale * np.asarray(v)
    return out


def zeros_like(params: Mapping[str, np.ndarray]) -> Params:
    return {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}


def params_equal(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> bool:
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -float(np.mean(logp[np.arange(n), labels]))
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       floor: float = 1e-8) -> float:
    """Worst coordinate-wise ``|a - n| / max(|a|, |n|)``, ignoring coordinates
    where both magnitudes are below ``floor``."""
    a = np.ravel(np.asarray(analytic, dtype=np.float64))
    n = np.ravel(np.asarray(numeric, dtype=np.float64))
    if a.shape != n.shape:
        raise ShapeError(f"gradient sizes differ: {a.size} vs {n.size}")
    scale = np.maximum(np.abs(a), np.abs(n))
    keep = scale >= floor
    if not np.any(keep):
        return 0.0
    return float(np.max(np.abs(a - n)[keep] / scale[keep]))
