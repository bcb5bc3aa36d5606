"""Scale-specific autoencoder compressors adapted with second-order MAML.

Parameters are a plain dict of arrays, named ``enc.<i>.weight``,
``enc.<i>.bias``, ``dec.<i>.weight``, ``dec.<i>.bias``. Depth 1 is a single
affine encoder/decoder pair; depth 2 inserts a rectified hidden layer of width
``hidden`` on each side.

All gradients are closed-form backward passes over this fixed graph. The
meta-gradient differentiates through the inner loop with exact Hessian-vector
products (forward-mode tangents pushed through the backward pass), so no
autodiff framework is involved.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .ndcore import Params, ShapeError, add, sgd_step


class Scale(str, enum.Enum):
    P3 = "P3"
    P4 = "P4"
    P5 = "P5"


@dataclass(frozen=True)
class ScaleConfig:
    scale: Scale
    input_dim: int
    code_dim: int

    def __post_init__(self):
        if not 0 < self.code_dim < self.input_dim:
            raise ValueError(
                f"need 0 < code_dim < input_dim, got {self.code_dim}, {self.input_dim}")

    @property
    def ratio(self) -> float:
        return self.input_dim / self.code_dim


SCALES = {
    Scale.P3: ScaleConfig(Scale.P3, 64, 8),
    Scale.P4: ScaleConfig(Scale.P4, 64, 10),
    Scale.P5: ScaleConfig(Scale.P5, 64, 16),
}


@dataclass(frozen=True)
class MamlConfig:
    inner_steps: int = 5
    inner_lr: float = 0.01
    meta_lr: float = 5e-4
    second_order: bool = True

    def __post_init__(self):
        if self.inner_steps < 0:
            raise ValueError("inner_steps must be >= 0")
        if self.inner_lr < 0 or self.meta_lr < 0:
            raise ValueError("learning rates must be non-negative")


@dataclass(frozen=True)
class SupportQuerySplit:
    support: np.ndarray
    query: np.ndarray
    support_labels: np.ndarray | None = None
    query_labels: np.ndarray | None = None


class AdaptationError(FloatingPointError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite reconstruction loss {loss} at inner step {step}")
        self.step = step


class DivergenceError(FloatingPointError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"meta-training diverged at iteration {iteration} (loss {loss:.3g})")
        self.iteration = iteration


def split_support_query(X: np.ndarray, Y: np.ndarray | None = None,
                        rho: float = 0.3,
                        rng: np.random.Generator | None = None) -> SupportQuerySplit:
    """Disjoint support/query split; at least one row on each side."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 2:
        raise ValueError("need at least two rows to split")
    n_s = min(max(1, int(round(rho * n))), n - 1)
    idx = rng.permutation(n) if rng is not None else np.arange(n)
    s, q = idx[:n_s], idx[n_s:]
    if Y is None:
        return SupportQuerySplit(X[s], X[q])
    Y = np.asarray(Y)
    return SupportQuerySplit(X[s], X[q], Y[s], Y[q])


# -- parameters -------------------------------------------------------------

def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_params(input_dim: int, code_dim: int, depth: int = 1, hidden: int = 32,
                seed: int | np.random.Generator = 0) -> Params:
    if depth not in (1, 2):
        raise ValueError("depth must be 1 or 2")
    rng = np.random.default_rng(seed)
    if depth == 1:
        enc_dims, dec_dims = [input_dim, code_dim], [code_dim, input_dim]
    else:
        enc_dims = [input_dim, hidden, code_dim]
        dec_dims = [code_dim, hidden, input_dim]
    params: Params = {}
    for side, dims in (("enc", enc_dims), ("dec", dec_dims)):
        for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
            params[f"{side}.{i}.weight"] = _glorot(rng, fo, fi)
            params[f"{side}.{i}.bias"] = np.zeros(fo)
    return params


def zero_params(input_dim: int, code_dim: int, depth: int = 1, hidden: int = 32) -> Params:
    return {k: np.zeros_like(v) for k, v in
            init_params(input_dim, code_dim, depth, hidden).items()}


def depth_of(params: Mapping[str, np.ndarray]) -> int:
    return sum(1 for k in params if k.startswith("enc.") and k.endswith(".weight"))


def dims_of(params: Mapping[str, np.ndarray]) -> tuple[int, int]:
    """(input_dim, code_dim)."""
    depth = depth_of(params)
    return params["enc.0.weight"].shape[1], params[f"enc.{depth - 1}.weight"].shape[0]


def _names(side: str, depth: int) -> list[tuple[str, str, bool]]:
    # (weight key, bias key, rectified output)
    return [(f"{side}.{i}.weight", f"{side}.{i}.bias", i < depth - 1)
            for i in range(depth)]


def _stack(params: Mapping[str, np.ndarray], sides: tuple[str, ...]):
    depth = depth_of(params)
    layers = []
    for side in sides:
        layers.extend(_names(side, depth))
    return layers


# -- forward / backward over a layer stack ----------------------------------

def _forward(params, layers, x):
    hs, masks = [x], []
    for wk, bk, relu in layers:
        a = hs[-1] @ params[wk].T + params[bk]
        if relu:
            m = a > 0
            masks.append(m)
            hs.append(a * m)
        else:
            masks.append(None)
            hs.append(a)
    return hs, masks


def _backward(params, layers, hs, masks, dout, need_input_grad=False):
    grads = {}
    delta = dout
    for i in range(len(layers) - 1, -1, -1):
        wk, bk, _ = layers[i]
        g = delta if masks[i] is None else delta * masks[i]
        grads[wk] = g.T @ hs[i]
        grads[bk] = g.sum(axis=0)
        if i > 0 or need_input_grad:
            delta = g @ params[wk]
    return grads, (delta if need_input_grad else None)


def _as_batch(F: np.ndarray, dim: int, what: str) -> tuple[np.ndarray, bool]:
    F = np.asarray(F, dtype=np.float64)
    single = F.ndim == 1
    F2 = F[None, :] if single else F
    if F2.ndim != 2 or F2.shape[1] != dim:
        raise ShapeError(f"{what}: expected trailing dimension {dim}, got shape {F.shape}")
    return F2, single


def encode(params: Mapping[str, np.ndarray], f: np.ndarray) -> np.ndarray:
    D, _ = dims_of(params)
    F, single = _as_batch(f, D, "encode")
    z = _forward(params, _stack(params, ("enc",)), F)[0][-1]
    return z[0] if single else z


def decode(params: Mapping[str, np.ndarray], z: np.ndarray) -> np.ndarray:
    _, d = dims_of(params)
    Z, single = _as_batch(z, d, "decode")
    f = _forward(params, _stack(params, ("dec",)), Z)[0][-1]
    return f[0] if single else f


def _batch(F, params) -> np.ndarray:
    D, _ = dims_of(params)
    F, _ = _as_batch(F, D, "recon")
    if F.shape[0] == 0:
        raise ValueError("empty feature batch")
    return F


def recon_loss(params: Mapping[str, np.ndarray], F: np.ndarray) -> float:
    F = _batch(F, params)
    out = _forward(params, _stack(params, ("enc", "dec")), F)[0][-1]
    diff = out - F
    return float(np.mean(diff * diff))


def recon_loss_and_grad(params: Mapping[str, np.ndarray],
                        F: np.ndarray) -> tuple[float, Params]:
    F = _batch(F, params)
    layers = _stack(params, ("enc", "dec"))
    hs, masks = _forward(params, layers, F)
    diff = hs[-1] - F
    loss = float(np.mean(diff * diff))
    grads, _ = _backward(params, layers, hs, masks, 2.0 * diff / diff.size)
    return loss, {k: grads[k] for k in params}


def recon_grad(params: Mapping[str, np.ndarray], F: np.ndarray) -> Params:
    return recon_loss_and_grad(params, F)[1]


def recon_hvp(params: Mapping[str, np.ndarray], F: np.ndarray,
              v: Mapping[str, np.ndarray]) -> Params:
    """Exact Hessian-vector product of ``recon_loss`` at ``params`` along ``v``."""
    F = _batch(F, params)
    layers = _stack(params, ("enc", "dec"))
    hs, masks = _forward(params, layers, F)

    # tangents of the forward activations
    hdots = [np.zeros_like(F)]
    for (wk, bk, _), m in zip(layers, masks):
        i = len(hdots) - 1
        adot = hdots[i] @ params[wk].T + hs[i] @ v[wk].T + v[bk]
        hdots.append(adot if m is None else adot * m)

    scale = 2.0 / F.size
    delta = scale * (hs[-1] - F)
    ddelta = scale * hdots[-1]
    out = {}
    for i in range(len(layers) - 1, -1, -1):
        wk, bk, _ = layers[i]
        m = masks[i]
        g = delta if m is None else delta * m
        gdot = ddelta if m is None else ddelta * m
        out[wk] = gdot.T @ hs[i] + g.T @ hdots[i]
        out[bk] = gdot.sum(axis=0)
        if i > 0:
            delta, ddelta = g @ params[wk], gdot @ params[wk] + g @ v[wk]
    return {k: out[k] for k in params}


def encoder_vjp(params: Mapping[str, np.ndarray], F: np.ndarray,
                dz: np.ndarray) -> tuple[np.ndarray, Params]:
    """Codes for ``F`` and the encoder parameter gradient for upstream ``dz``.

    Decoder entries of the returned gradient are zero so it adds directly onto
    other parameter gradients.
    """
    F = _batch(F, params)
    layers = _stack(params, ("enc",))
    hs, masks = _forward(params, layers, F)
    grads, _ = _backward(params, layers, hs, masks, dz)
    full = {k: grads.get(k, np.zeros_like(params[k])) for k in params}
    return hs[-1], full


def encoder_per_sample_sq_grads(params: Mapping[str, np.ndarray], F: np.ndarray,
                                dz: np.ndarray) -> Params:
    """Batch mean of squared per-sample encoder gradients (Fisher diagonal)."""
    F = _batch(F, params)
    layers = _stack(params, ("enc",))
    hs, masks = _forward(params, layers, F)
    out = {}
    delta = dz
    for i in range(len(layers) - 1, -1, -1):
        wk, bk, _ = layers[i]
        g = delta if masks[i] is None else delta * masks[i]
        # per-sample weight gradient is outer(g_n, h_n); its square factorises
        out[wk] = (g * g).T @ (hs[i] * hs[i]) / F.shape[0]
        out[bk] = np.mean(g * g, axis=0)
        if i > 0:
            delta = g @ params[wk]
    return {k: out.get(k, np.zeros_like(params[k])) for k in params}


# -- MAML -------------------------------------------------------------------

def adapt_trajectory(meta: Mapping[str, np.ndarray], support: np.ndarray,
                     cfg: MamlConfig) -> list[Params]:
    """``[phi'_0, ..., phi'_K]`` of the inner loop on a fixed support batch."""
    traj = [dict(meta)]
    for k in range(cfg.inner_steps):
        loss, g = recon_loss_and_grad(traj[-1], support)
        if not np.isfinite(loss):
            raise AdaptationError(k, loss)
        traj.append(sgd_step(traj[-1], g, cfg.inner_lr))
    final = recon_loss(traj[-1], support) if cfg.inner_steps else 0.0
    if not np.isfinite(final):
        raise AdaptationError(cfg.inner_steps, final)
    return traj


def maml_adapt(meta: Mapping[str, np.ndarray], support: np.ndarray,
               cfg: MamlConfig) -> Params:
    return adapt_trajectory(meta, support, cfg)[-1]


def backprop_through_adaptation(trajectory: list[Params], support: np.ndarray,
                                upstream: Mapping[str, np.ndarray],
                                cfg: MamlConfig) -> Params:
    """Pull a gradient at ``phi'_K`` back to the meta parameters.

    Second order applies ``(I - alpha H_k)`` for k = K-1 .. 0; first order
    returns the upstream gradient unchanged.
    """
    g = {k: np.array(v, dtype=np.float64) for k, v in upstream.items()}
    if not cfg.second_order or cfg.inner_lr == 0:
        return g
    for phi_k in reversed(trajectory[:-1]):
        g = add(g, recon_hvp(phi_k, support, g), -cfg.inner_lr)
    return g


def meta_loss_and_gradient(meta: Mapping[str, np.ndarray], split: SupportQuerySplit,
                           cfg: MamlConfig) -> tuple[float, Params]:
    traj = adapt_trajectory(meta, split.support, cfg)
    loss, g_query = recon_loss_and_grad(traj[-1], split.query)
    return loss, backprop_through_adaptation(traj, split.support, g_query, cfg)


def meta_gradient(meta: Mapping[str, np.ndarray], split: SupportQuerySplit,
                  cfg: MamlConfig) -> Params:
    """Gradient w.r.t. ``meta`` of the query reconstruction loss after adaptation."""
    return meta_loss_and_gradient(meta, split, cfg)[1]


def meta_train(cfg: MamlConfig,
               task_sampler: Callable[[np.random.Generator], SupportQuerySplit],
               iters: int, seed: int = 0, init: Params | None = None,
               input_dim: int = 64, code_dim: int = 10, depth: int = 1,
               history: list[float] | None = None) -> Params:
    """Outer-loop SGD at ``cfg.meta_lr`` on sampled support/query tasks.

    ``task_sampler`` draws one split from the generator it is given; the
    generator is seeded from ``seed`` so runs are reproducible bit for bit.
    Query losses are appended to ``history`` when provided.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    meta = dict(init) if init is not None else init_params(
        input_dim, code_dim, depth, seed=rng)
    for it in range(iters):
        split = task_sampler(rng)
        loss, g = meta_loss_and_gradient(meta, split, cfg)
        if not np.isfinite(loss) or loss > 1e6:
            raise DivergenceError(it, loss)
        if history is not None:
            history.append(loss)
        meta = sgd_step(meta, g, cfg.meta_lr)
    return meta


def make_hierarchy(seed: int = 0, depth: int = 1) -> dict[Scale, tuple[ScaleConfig, Params]]:
    seeds = np.random.SeedSequence(seed).spawn(len(SCALES))
    return {
        s: (c, init_params(c.input_dim, c.code_dim, depth, seed=np.random.default_rng(ss)))
        for (s, c), ss in zip(SCALES.items(), seeds)
    }


# -- checkpoint blob --------------------------------------------------------

PARAMS_MAGIC = b"AHCP"
PARAMS_VERSION = 1
_HEADER = struct.Struct("<4sIII")


def params_to_bytes(params: Mapping[str, np.ndarray]) -> bytes:
    D, d = dims_of(params)
    flat = np.concatenate([np.ravel(params[k]) for k in params]).astype("<f4")
    return _HEADER.pack(PARAMS_MAGIC, PARAMS_VERSION, D, d) + flat.tobytes()


def params_from_bytes(blob: bytes, hidden: int = 32) -> Params:
    if len(blob) < _HEADER.size:
        raise ValueError(f"truncated parameter blob: {len(blob)} bytes, header needs 16")
    magic, version, D, d = _HEADER.unpack_from(blob)
    if magic != PARAMS_MAGIC:
        raise ValueError(f"bad magic {magic!r} at offset 0")
    if version != PARAMS_VERSION:
        raise ValueError(f"unsupported version {version} at offset 4")
    payload = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    for depth in (1, 2):
        like = zero_params(D, d, depth, hidden)
        if payload.size == sum(v.size for v in like.values()):
            out, i = {}, 0
            for k, v in like.items():
                out[k] = payload[i:i + v.size].reshape(v.shape)
                i += v.size
            return out
    raise ValueError(f"payload of {payload.size} values fits no depth for D={D}, d={d}")
