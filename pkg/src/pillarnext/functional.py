"""Normalization, activations and small differentiable primitives.

Each op works on a feature matrix; the ``sparse_*`` wrappers apply it to a
:class:`SparseTensor` without touching its coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ChannelMismatch, ShapeMismatch, TooFewRows
from .sparse import SparseTensor
from .tape import Tape

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass
class NormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    mode: str = "train"
    update_stats: bool = True

    @classmethod
    def identity(cls, channels: int, dtype=np.float64, **kw) -> "NormParams":
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype), **kw)

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")


def batchnorm(x: np.ndarray, p: NormParams, tape: Tape | None = None) -> np.ndarray:
    """Per-channel batch normalization over the rows of ``x``."""
    if x.ndim != 2 or x.shape[1] != len(p.gamma):
        raise ChannelMismatch(f"norm over {len(p.gamma)} channels got shape {x.shape}")
    if p.mode == "train":
        n = x.shape[0]
        if n < 2:
            raise TooFewRows(f"train-mode batch norm needs >= 2 rows, got {n}")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        if p.update_stats:
            m = p.momentum
            p.running_mean[...] = (1 - m) * p.running_mean + m * mean
            p.running_var[...] = (1 - m) * p.running_var + m * var * n / (n - 1)
    else:
        mean, var = p.running_mean, p.running_var
    inv_std = 1.0 / np.sqrt(var + p.eps)
    xhat = (x - mean) * inv_std
    out = xhat * p.gamma + p.beta
    if tape is not None:
        tape.record("batchnorm", (x, p.gamma, p.beta), out, batchnorm_backward,
                    xhat=xhat, inv_std=inv_std, train=p.mode == "train")
    return out


def batchnorm_backward(entry, g):
    x, gamma, _ = entry.inputs
    xhat, inv_std = entry.ctx["xhat"], entry.ctx["inv_std"]
    g_gamma = np.sum(g * xhat, axis=0)
    g_beta = g.sum(axis=0)
    gxhat = g * gamma
    if entry.ctx["train"]:
        n = x.shape[0]
        gx = inv_std / n * (n * gxhat - gxhat.sum(axis=0) - xhat * np.sum(gxhat * xhat, axis=0))
    else:
        gx = gxhat * inv_std
    return gx, g_gamma, g_beta


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-6,
               tape: Tape | None = None) -> np.ndarray:
    """Normalize every row over its channels, then scale and shift."""
    if x.shape[1] != len(gamma):
        raise ChannelMismatch(f"layer norm over {len(gamma)} channels got shape {x.shape}")
    mean = x.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.var(axis=1, keepdims=True) + eps)
    xhat = (x - mean) * inv_std
    out = xhat * gamma + beta
    if tape is not None:
        tape.record("layer_norm", (x, gamma, beta), out, _layer_norm_backward,
                    xhat=xhat, inv_std=inv_std)
    return out


def _layer_norm_backward(entry, g):
    x, gamma, _ = entry.inputs
    xhat, inv_std = entry.ctx["xhat"], entry.ctx["inv_std"]
    c = x.shape[1]
    gxhat = g * gamma
    gx = inv_std / c * (c * gxhat - gxhat.sum(axis=1, keepdims=True)
                        - xhat * np.sum(gxhat * xhat, axis=1, keepdims=True))
    return gx, np.sum(g * xhat, axis=0), g.sum(axis=0)


def relu(x: np.ndarray, tape: Tape | None = None) -> np.ndarray:
    mask = x > 0
    out = np.where(mask, x, 0).astype(x.dtype, copy=False)
    if tape is not None:
        tape.note_branch(np.packbits(mask))
        tape.record("relu", (x,), out, lambda e, g: (g * e.ctx["mask"],), mask=mask)
    return out


def gelu(x: np.ndarray, tape: Tape | None = None) -> np.ndarray:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = x * cdf
    if tape is not None:
        def back(e, g):
            xx = e.inputs[0]
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * xx * xx)
            return (g * (e.ctx["cdf"] + xx * pdf),)
        tape.record("gelu", (x,), out, back, cdf=cdf)
    return out


def activation(x, kind: str = "relu", tape: Tape | None = None):
    """Elementwise ``relu``/``gelu``; accepts an array or a sparse tensor."""
    fn = {"relu": relu, "gelu": gelu}.get(kind)
    if fn is None:
        raise ValueError(f"unknown activation {kind!r}")
    if isinstance(x, SparseTensor):
        return x.replace_features(fn(x.features, tape))
    return fn(x, tape)


def add(*xs: np.ndarray, tape: Tape | None = None) -> np.ndarray:
    shape = xs[0].shape
    if any(x.shape != shape for x in xs):
        raise ShapeMismatch(f"cannot add shapes {[x.shape for x in xs]}")
    out = xs[0].copy()
    for x in xs[1:]:
        out += x
    if tape is not None:
        tape.record("add", xs, out, lambda e, g: (g,) * len(e.inputs))
    return out


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None,
           tape: Tape | None = None) -> np.ndarray:
    """Row-wise ``x @ w + b``."""
    if x.shape[1] != w.shape[0]:
        raise ChannelMismatch(f"linear expects {w.shape[0]} inputs, got {x.shape[1]}")
    out = x @ w
    if b is not None:
        out = out + b
    if tape is not None:
        def back(e, g):
            xx, ww, bb = e.inputs
            return g @ ww.T, xx.T @ g, (g.sum(axis=0) if bb is not None else None)
        tape.record("linear", (x, w, b), out, back)
    return out


# ------------------------------------------------------- sparse wrappers ---

def batchnorm_forward(t: SparseTensor, p: NormParams, tape: Tape | None = None) -> SparseTensor:
    """Batch norm whose statistics come from active rows only."""
    return t.replace_features(batchnorm(t.features, p, tape))


def sparse_add(*ts: SparseTensor, tape: Tape | None = None) -> SparseTensor:
    """Sum of tensors sharing one active set (same index object)."""
    first = ts[0]
    if any(t.index is not first.index for t in ts[1:]):
        raise ShapeMismatch("sparse_add needs tensors over the same coordinate index")
    return first.replace_features(add(*(t.features for t in ts), tape=tape))
