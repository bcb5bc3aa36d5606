"""Anti-forgetting objectives: replay, EWC, feature distillation, and the
forgetting metric."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .. import compressor as cmp
from ..memory import FeatureRecord
from ..ndcore import Params, ShapeError, cross_entropy, log_softmax, softmax


@dataclass
class ReplayClassifier:
    """Linear head over compressed codes; one row per class seen so far."""

    weight: np.ndarray
    bias: np.ndarray
    class_ids: list[int] = field(default_factory=list)

    @classmethod
    def empty(cls, code_dim: int) -> "ReplayClassifier":
        return cls(np.zeros((0, code_dim)), np.zeros(0), [])

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    def rows(self, labels: Sequence[int]) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.class_ids)}
        try:
            return np.array([index[int(c)] for c in labels], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"class id {exc.args[0]} not covered by the classifier") from None

    def expand(self, new_classes: Sequence[int]) -> "ReplayClassifier":
        """New head with zero-initialised rows for unseen classes appended."""
        fresh = [c for c in new_classes if c not in set(self.class_ids)]
        d = self.weight.shape[1]
        return ReplayClassifier(
            np.vstack([self.weight, np.zeros((len(fresh), d))]),
            np.concatenate([self.bias, np.zeros(len(fresh))]),
            self.class_ids + list(fresh))

    def logits(self, z: np.ndarray) -> np.ndarray:
        return z @ self.weight.T + self.bias

    def params(self) -> Params:
        return {"clf.weight": self.weight, "clf.bias": self.bias}

    def with_params(self, p: Mapping[str, np.ndarray]) -> "ReplayClassifier":
        return ReplayClassifier(p["clf.weight"], p["clf.bias"], list(self.class_ids))


def classify_loss_and_grad(phi: Mapping[str, np.ndarray], clf: ReplayClassifier,
                           X: np.ndarray, rows: np.ndarray) -> tuple[float, Params, Params]:
    """Cross-entropy of ``clf(encode(phi, X))``; gradients for phi and the head."""
    z = cmp.encode(phi, X)
    loss, dlogits = cross_entropy(clf.logits(z), rows)
    g_clf = {"clf.weight": dlogits.T @ z, "clf.bias": dlogits.sum(axis=0)}
    _, g_phi = cmp.encoder_vjp(phi, X, dlogits @ clf.weight)
    return loss, g_phi, g_clf


def replay_loss_and_grad(records: Sequence[FeatureRecord], phi: Mapping[str, np.ndarray],
                         clf: ReplayClassifier) -> tuple[float, Params, Params]:
    """Replay objective ``CE(h(g(fbar)), c) + 0.5 * MSE(g^-1(g(fbar)), fbar)``.

    The bank stores codes, so ``fbar`` is materialised as ``decode(phi, code)``
    and treated as a constant input.
    """
    if not records:
        raise ValueError("replay needs at least one record")
    rows = clf.rows([r.class_id for r in records])
    Z = np.stack([r.code for r in records]).astype(np.float64)
    fbar = cmp.decode(phi, Z)
    ce, g_phi, g_clf = classify_loss_and_grad(phi, clf, fbar, rows)
    rec, g_rec = cmp.recon_loss_and_grad(phi, fbar)
    for k in g_phi:
        g_phi[k] = g_phi[k] + 0.5 * g_rec[k]
    return ce + 0.5 * rec, g_phi, g_clf


def replay_loss(records: Sequence[FeatureRecord], phi: Mapping[str, np.ndarray],
                clf: ReplayClassifier) -> float:
    return replay_loss_and_grad(records, phi, clf)[0]


@dataclass
class FisherState:
    fisher: Params          # raw diagonal
    normalized: Params      # fisher / mean over every parameter
    theta_star: Params

    def expand_to(self, params: Mapping[str, np.ndarray]) -> "FisherState":
        """Pad grown tensors (new classifier rows) with zero weight and
        anchors equal to their current values."""
        fisher, norm, star = {}, {}, {}
        for k, p in params.items():
            if k not in self.theta_star:
                continue
            old = self.theta_star[k]
            if old.shape == p.shape:
                fisher[k], norm[k], star[k] = self.fisher[k], self.normalized[k], old
                continue
            pad = [(0, n - o) for n, o in zip(p.shape, old.shape)]
            if any(w < 0 for _, w in pad):
                raise ShapeError(f"{k} shrank from {old.shape} to {p.shape}")
            fisher[k] = np.pad(self.fisher[k], pad)
            norm[k] = np.pad(self.normalized[k], pad)
            s = np.array(p, dtype=np.float64)
            s[tuple(slice(0, o) for o in old.shape)] = old
            star[k] = s
        return FisherState(fisher, norm, star)


def estimate_fisher(phi: Mapping[str, np.ndarray], clf: ReplayClassifier,
                    X: np.ndarray, labels: Sequence[int]) -> FisherState:
    """Empirical Fisher diagonal of the class log-likelihood, globally normalised.

    Per-sample gradients of a linear layer are outer products, so their
    squares factorise and the batch mean needs no per-sample loop.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("Fisher estimation needs a non-empty batch")
    rows = clf.rows(labels)
    z = cmp.encode(phi, X)
    p = softmax(clf.logits(z))
    e = -p
    e[np.arange(len(rows)), rows] += 1.0  # d log p_y / d logits, per sample
    n = X.shape[0]
    fisher = cmp.encoder_per_sample_sq_grads(phi, X, e @ clf.weight)
    fisher["clf.weight"] = (e * e).T @ (z * z) / n
    fisher["clf.bias"] = np.mean(e * e, axis=0)
    total = sum(v.size for v in fisher.values())
    mean = sum(float(v.sum()) for v in fisher.values()) / total
    if not mean > 0:
        raise ValueError("degenerate model: Fisher diagonal is identically zero")
    theta = {**phi, **clf.params()}
    return FisherState(fisher, {k: v / mean for k, v in fisher.items()},
                       {k: np.array(theta[k], dtype=np.float64) for k in fisher})


def ewc_penalty_and_grad(params: Mapping[str, np.ndarray], fs: FisherState,
                         lam: float) -> tuple[float, Params]:
    """``lam * sum_l mean_{i in l} F_i (theta_i - theta*_i)^2``, one layer per tensor."""
    loss, grads = 0.0, {}
    for k, star in fs.theta_star.items():
        if k not in params:
            raise ShapeError(f"parameter {k} missing")
        p = np.asarray(params[k], dtype=np.float64)
        if p.shape != star.shape:
            raise ShapeError(f"{k}: shape {p.shape} != anchor shape {star.shape}")
        diff = p - star
        w = fs.normalized[k]
        loss += float(np.mean(w * diff * diff))
        grads[k] = 2.0 * lam * w * diff / diff.size
    return lam * loss, grads


def ewc_penalty(params: Mapping[str, np.ndarray], fs: FisherState, lam: float) -> float:
    return ewc_penalty_and_grad(params, fs, lam)[0]


def distill_loss(F_new: np.ndarray, F_old: np.ndarray, lam: float = 2.0) -> float:
    F_new, F_old = np.asarray(F_new, float), np.asarray(F_old, float)
    if F_new.shape != F_old.shape:
        raise ShapeError(f"distill: shapes {F_new.shape} and {F_old.shape} differ")
    return lam * float(np.mean((F_new - F_old) ** 2))


def distill_loss_and_grad(phi: Mapping[str, np.ndarray], phi_old: Mapping[str, np.ndarray],
                          X: np.ndarray, lam: float) -> tuple[float, Params]:
    """Distillation on codes: current encoder vs a frozen snapshot."""
    z_old = cmp.encode(phi_old, X)
    z_new = cmp.encode(phi, X)
    diff = z_new - z_old
    _, g = cmp.encoder_vjp(phi, X, 2.0 * lam * diff / diff.size)
    return lam * float(np.mean(diff * diff)), g


def predictive_uncertainty(logits: np.ndarray) -> np.ndarray:
    """Entropy of the softmax divided by ``log C`` (0 when C == 1)."""
    C = logits.shape[-1]
    if C < 2:
        return np.zeros(logits.shape[:-1])
    logp = log_softmax(logits)
    ent = -np.sum(np.exp(logp) * logp, axis=-1)
    return np.clip(ent / np.log(C), 0.0, 1.0)


def running_difficulty(losses: np.ndarray) -> np.ndarray:
    """Per-sample loss over the running maximum seen so far, clamped to [0, 1]."""
    losses = np.asarray(losses, dtype=np.float64)
    peak = np.maximum.accumulate(losses)
    with np.errstate(invalid="ignore", divide="ignore"):
        d = np.where(peak > 0, losses / peak, 0.0)
    return np.clip(d, 0.0, 1.0)


def forgetting(acc: np.ndarray) -> float:
    """Average drop from each earlier task's best accuracy to its final one.

    ``acc[i, j]`` is the accuracy on task ``i`` after training task ``j``
    (only ``i <= j`` is read).
    """
    acc = np.asarray(acc, dtype=np.float64)
    T = acc.shape[0]
    if T < 2 or acc.shape != (T, T):
        raise ValueError("forgetting needs a square matrix over at least two tasks")
    drops = [np.max(acc[i, i:]) - acc[i, T - 1] for i in range(T - 1)]
    return float(np.mean(drops))
