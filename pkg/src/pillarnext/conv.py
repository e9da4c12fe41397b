"""Rulebook-driven sparse convolution (submanifold and spatially sparse).

Execution is gather / per-offset GEMM / scatter-add. For a fixed kernel
offset every input row and every output row appears at most once in the
pair list, so the scatter for one offset is a plain fancy-indexed add and
the accumulation order (offset-major) is fixed.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ChannelMismatch, InvalidSpec, ShapeMismatch
from .sparse import CoordIndex, SparseTensor, pack_keys, unpack_keys
from .tape import Tape, TapeEntry


def _tuple(v, rank: int) -> tuple[int, ...]:
    if np.isscalar(v):
        return (int(v),) * rank
    v = tuple(int(x) for x in v)
    if len(v) != rank:
        raise InvalidSpec(f"expected {rank} values, got {v}")
    return v


@dataclass(frozen=True)
class KernelSpec:
    kernel: tuple[int, ...]
    stride: tuple[int, ...]
    dilation: tuple[int, ...]
    padding: tuple[int, ...]
    mode: str = "submanifold"

    @classmethod
    def make(cls, kernel, stride=1, dilation=1, padding=None, mode="submanifold",
             rank: int | None = None) -> "KernelSpec":
        if rank is None:
            rank = 1 if np.isscalar(kernel) else len(kernel)
        kernel = _tuple(kernel, rank)
        stride = _tuple(stride, rank)
        dilation = _tuple(dilation, rank)
        if padding is None:
            # "same" geometry; even kernels get no implicit padding
            padding = tuple(d * (k - 1) // 2 if k % 2 else 0 for k, d in zip(kernel, dilation))
        spec = cls(kernel, stride, dilation, _tuple(padding, rank), mode)
        spec.validate()
        return spec

    @property
    def rank(self) -> int:
        return len(self.kernel)

    @property
    def volume(self) -> int:
        return int(np.prod(self.kernel))

    def validate(self, rank: int | None = None) -> None:
        if self.mode not in ("submanifold", "spatial"):
            raise InvalidSpec(f"unknown mode {self.mode!r}")
        if rank is not None and rank != self.rank:
            raise InvalidSpec(f"kernel rank {self.rank} does not match tensor rank {rank}")
        if not all(len(v) == self.rank for v in (self.stride, self.dilation, self.padding)):
            raise InvalidSpec("kernel/stride/dilation/padding lengths differ")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.dilation) < 1:
            raise InvalidSpec("kernel, stride and dilation must be >= 1")
        if min(self.padding) < 0:
            raise InvalidSpec("padding must be >= 0")
        if self.mode == "submanifold":
            if any(s != 1 for s in self.stride):
                raise InvalidSpec("submanifold convolution requires stride 1")
            if any(k % 2 == 0 for k in self.kernel):
                raise InvalidSpec("submanifold convolution requires odd kernel sizes")

    def offsets(self) -> np.ndarray:
        """Kernel tap multi-indices in row-major order, shape ``(K, rank)``."""
        return np.array(list(itertools.product(*[range(k) for k in self.kernel])),
                        dtype=np.int64).reshape(-1, self.rank)

    def output_shape(self, shape: Sequence[int]) -> tuple[int, ...]:
        if self.mode == "submanifold":
            return tuple(shape)
        out = tuple((n + 2 * p - d * (k - 1) - 1) // s + 1 for n, p, d, k, s in
                    zip(shape, self.padding, self.dilation, self.kernel, self.stride))
        if min(out) < 1:
            raise InvalidSpec(f"kernel {self.kernel} does not fit input shape {tuple(shape)}")
        return out


@dataclass
class ConvParams:
    """``weight`` is ``[K, C_in, C_out]``, or ``[K, C]`` for depthwise kernels."""

    weight: np.ndarray
    bias: np.ndarray | None = None

    @property
    def depthwise(self) -> bool:
        return self.weight.ndim == 2


@dataclass
class Rulebook:
    out_keys: np.ndarray
    out_shape: tuple[int, ...]
    in_rows: list[np.ndarray]
    out_rows: list[np.ndarray]
    out_index: CoordIndex | None = None

    @property
    def out_coords(self) -> np.ndarray:
        return unpack_keys(self.out_keys, len(self.out_shape))

    @property
    def n_out(self) -> int:
        return len(self.out_keys)

    @property
    def pairs(self) -> list[np.ndarray]:
        """Per offset, an ``(m, 2)`` array of ``(in_row, out_row)``."""
        return [np.stack([i, o], axis=1) for i, o in zip(self.in_rows, self.out_rows)]

    @property
    def n_pairs(self) -> int:
        return int(sum(len(i) for i in self.in_rows))


def build_rulebook(t: SparseTensor, spec: KernelSpec, use_cache: bool = True) -> Rulebook:
    spec.validate(t.rank)
    cache_key = (spec, t.spatial_shape, t.batch_size)
    if use_cache and cache_key in t.index.rulebooks:
        return t.index.rulebooks[cache_key]
    if spec.mode == "submanifold":
        rb = _submanifold_rulebook(t, spec)
    else:
        rb = _spatial_rulebook(t, spec)
    if use_cache:
        t.index.rulebooks[cache_key] = rb
    return rb


def _submanifold_rulebook(t: SparseTensor, spec: KernelSpec) -> Rulebook:
    spatial = t.coords[:, 1:]
    shape = np.array(t.spatial_shape)
    dil = np.array(spec.dilation)
    center = (np.array(spec.kernel) - 1) // 2
    all_rows = np.arange(t.n, dtype=np.int64)
    in_rows, out_rows = [], []
    for tap in spec.offsets():
        nb = spatial + dil * (tap - center)
        ok = np.all((nb >= 0) & (nb < shape), axis=1)
        rows = np.full(t.n, -1, dtype=np.int64)
        if ok.any():
            nb_full = np.concatenate([t.coords[ok, :1], nb[ok]], axis=1)
            rows[ok] = t.index.find(pack_keys(nb_full))
        hit = rows >= 0
        in_rows.append(rows[hit])
        out_rows.append(all_rows[hit])
    return Rulebook(t.index.keys, t.spatial_shape, in_rows, out_rows, t.index)


def _spatial_rulebook(t: SparseTensor, spec: KernelSpec) -> Rulebook:
    out_shape = spec.output_shape(t.spatial_shape)
    spatial = t.coords[:, 1:]
    upper = np.array(out_shape)
    stride = np.array(spec.stride)
    dil = np.array(spec.dilation)
    pad = np.array(spec.padding)
    cand_in, cand_keys = [], []
    for tap in spec.offsets():
        num = spatial + pad - dil * tap
        ok = np.all((num >= 0) & (num % stride == 0), axis=1)
        o = num // stride
        ok &= np.all(o < upper, axis=1)
        rows = np.nonzero(ok)[0]
        cand_in.append(rows)
        cand_keys.append(pack_keys(np.concatenate([t.coords[rows, :1], o[rows]], axis=1)))
    if cand_keys:
        out_keys = np.unique(np.concatenate(cand_keys))
    else:
        out_keys = np.zeros(0, dtype=np.int64)
    out_rows = [np.searchsorted(out_keys, k) for k in cand_keys]
    return Rulebook(out_keys, out_shape, cand_in, out_rows, CoordIndex(out_keys))


# ---------------------------------------------------------------- forward ---

def _out_tensor(t: SparseTensor, rb: Rulebook, features: np.ndarray, spec: KernelSpec) -> SparseTensor:
    if rb.out_index is t.index:
        return t.replace_features(features)
    stride = t.stride * int(spec.stride[0])
    return SparseTensor(rb.out_coords, features, rb.out_shape, t.batch_size, rb.out_index, stride)


def conv_forward(t: SparseTensor, rb: Rulebook, p: ConvParams, tape: Tape | None = None,
                 spec: KernelSpec | None = None) -> SparseTensor:
    """Sparse convolution ``out[o] = bias + sum_k sum_(i,o) W[k]^T x[i]``."""
    x = t.features
    w = p.weight
    if len(rb.in_rows) != w.shape[0]:
        raise ShapeMismatch(f"rulebook has {len(rb.in_rows)} offsets, weight has {w.shape[0]}")
    if p.depthwise:
        if w.shape[1] != t.channels:
            raise ChannelMismatch(f"depthwise weight has {w.shape[1]} channels, input {t.channels}")
        c_out = t.channels
    else:
        if w.shape[1] != t.channels:
            raise ChannelMismatch(f"weight expects {w.shape[1]} input channels, got {t.channels}")
        c_out = w.shape[2]
    out = np.zeros((rb.n_out, c_out), dtype=np.result_type(x, w))
    for k, (i, o) in enumerate(zip(rb.in_rows, rb.out_rows)):
        if len(i) == 0:
            continue
        if p.depthwise:
            out[o] += x[i] * w[k]
        else:
            out[o] += x[i] @ w[k]
    if p.bias is not None:
        out += p.bias
    if tape is not None:
        tape.record("conv", (x, w, p.bias), out, conv_backward, rb=rb, depthwise=p.depthwise)
    if spec is None:
        spec = KernelSpec((1,) * t.rank, (1,) * t.rank, (1,) * t.rank, (0,) * t.rank)
    return _out_tensor(t, rb, out, spec)


def conv_backward(entry: TapeEntry, grad_out: np.ndarray):
    """Gradients ``(grad_in, grad_weight, grad_bias)`` of a recorded convolution."""
    x, w, bias = entry.inputs
    rb: Rulebook = entry.ctx["rb"]
    if grad_out.shape != entry.output.shape:
        raise ShapeMismatch(f"grad_out {grad_out.shape} != output {entry.output.shape}")
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    for k, (i, o) in enumerate(zip(rb.in_rows, rb.out_rows)):
        if len(i) == 0:
            continue
        g = grad_out[o]
        if entry.ctx["depthwise"]:
            gx[i] += g * w[k]
            gw[k] = np.sum(x[i] * g, axis=0)
        else:
            gx[i] += g @ w[k].T
            gw[k] = x[i].T @ g
    gb = grad_out.sum(axis=0) if bias is not None else None
    return gx, gw, gb


def sparse_conv(t: SparseTensor, spec: KernelSpec, p: ConvParams, tape: Tape | None = None) -> SparseTensor:
    """Convenience: build (or reuse) the rulebook and run the convolution."""
    return conv_forward(t, build_rulebook(t, spec), p, tape, spec)


# ----------------------------------------------------------------- oracle ---

def dense_conv_oracle(dense_in: np.ndarray, spec: KernelSpec, p: ConvParams) -> np.ndarray:
    """Direct convolution of a zero-padded dense ``[B, C, *spatial]`` array."""
    rank = dense_in.ndim - 2
    spatial = dense_in.shape[2:]
    out_shape = spec.output_shape(spatial) if spec.mode == "spatial" else tuple(spatial)
    pad = spec.padding
    padded = np.pad(dense_in, [(0, 0), (0, 0)] + [(q, q + k * d) for q, k, d in
                                                  zip(pad, spec.kernel, spec.dilation)])
    w = p.weight
    c_out = dense_in.shape[1] if w.ndim == 2 else w.shape[2]
    out = np.zeros((dense_in.shape[0], c_out, *out_shape), dtype=np.result_type(dense_in, w))
    for k, tap in enumerate(itertools.product(*[range(n) for n in spec.kernel])):
        window = padded[(slice(None), slice(None)) + tuple(
            slice(t * d, t * d + s * (n - 1) + 1, s)
            for t, d, s, n in zip(tap, spec.dilation, spec.stride, out_shape))]
        if w.ndim == 2:
            out += window * w[k].reshape((1, -1) + (1,) * rank)
        else:
            out += np.einsum("bi...,io->bo...", window, w[k])
    if p.bias is not None:
        out += p.bias.reshape((1, -1) + (1,) * rank)
    return out


# ------------------------------------------------------------------- init ---

def init_params(spec: KernelSpec, c_in: int, c_out: int, rng_seed, bias: bool = False,
                depthwise: bool = False, dtype=np.float64) -> ConvParams:
    """Fan-in scaled uniform weights in ``[-sqrt(6/fan_in), sqrt(6/fan_in)]``, zero bias."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    K = spec.volume
    if depthwise:
        if c_in != c_out:
            raise ChannelMismatch("depthwise convolution needs c_in == c_out")
        fan_in, shape = K, (K, c_in)
    else:
        fan_in, shape = K * c_in, (K, c_in, c_out)
    bound = np.sqrt(6.0 / fan_in)
    weight = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ConvParams(weight, np.zeros(c_out, dtype=dtype) if bias else None)
