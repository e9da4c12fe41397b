"""Backbone blocks, multi-stage fusion, sparse ConvNeXt neck and detection head.

All blocks are functions of ``(tensor, params, tape)``. Parameters live in
plain dataclasses; :func:`iter_arrays` walks them for checkpointing and the
optimizer.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .conv import ConvParams, KernelSpec, build_rulebook, conv_forward, init_params
from .encoding import (AUGMENTED_DIM, ConstructorParams, MlpParams, VoxelBatch, constructor_spec,
                       init_constructor, init_mlp, voxel2pillar_from_voxels)
from .errors import ChannelMismatch, ShapeMismatch, StrideMismatch
from .functional import NormParams, add, batchnorm, gelu, layer_norm, linear, relu
from .sparse import CoordIndex, GridConfig, SparseTensor, pack_keys, unpack_keys
from .tape import Tape


@dataclass
class NetworkConfig:
    stage_channels: tuple[int, ...] = (32, 64, 128, 256, 256, 256)
    stage_strides: tuple[int, ...] = (1, 2, 2, 2, 2, 2)
    lsfe_per_stage: int = 2
    dilation_schedule: tuple[int, ...] = (2, 3)
    fuse_channels: int = 256
    neck_repeats: int = 1
    neck_kernel: int = 5
    convnext_expand: int = 4
    num_classes: int = 3
    head_channels: int = 128
    mlp_channels: int = 32

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.stage_strides = tuple(int(s) for s in self.stage_strides)
        self.dilation_schedule = tuple(int(m) for m in self.dilation_schedule)
        if len(self.stage_channels) != 6 or len(self.stage_strides) != 6:
            raise ValueError("the backbone has exactly 6 stages")
        if self.stage_strides[0] != 1 or any(s not in (1, 2) for s in self.stage_strides):
            raise ValueError("stage strides must be 1 (stage 1) or 2")
        if self.neck_kernel < 1 or self.neck_kernel % 2 == 0:
            raise ValueError("neck_kernel must be odd")
        if len(self.dilation_schedule) != self.lsfe_per_stage:
            raise ValueError("dilation_schedule length must equal lsfe_per_stage")
        if min(self.stage_channels) < 1 or self.fuse_channels < 1 or self.head_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.num_classes < 1 or self.neck_repeats < 0 or self.convnext_expand < 1:
            raise ValueError("num_classes >= 1, neck_repeats >= 0, convnext_expand >= 1")

    @property
    def cumulative_strides(self) -> list[int]:
        return list(np.cumprod(self.stage_strides).tolist())


@dataclass
class Detection:
    class_id: int
    score: float
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    batch: int = 0

    def to_dict(self) -> dict:
        return {"class_id": self.class_id, "score": self.score, "center": list(self.center),
                "size": list(self.size), "yaw": self.yaw, "batch": self.batch}


# ------------------------------------------------------------- parameters ---

@dataclass
class ConvBN:
    conv: ConvParams
    norm: NormParams


@dataclass
class LSFEParams:
    main1: ConvBN
    main2: ConvBN
    dilated: ConvBN
    dilation: int


@dataclass
class DLSFEParams:
    fine: ConvBN
    wide_row: ConvBN   # 1x9
    wide_col: ConvBN   # 9x1


@dataclass
class MSFEParams:
    down: ConvBN | None
    dlsfe: DLSFEParams
    lsfe: list[LSFEParams]


@dataclass
class FuseParams:
    """1x1 projections (row-wise matrices) for stages 4, 5 and 6."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]


@dataclass
class ConvNeXtParams:
    depthwise: ConvParams
    ln_gamma: np.ndarray
    ln_beta: np.ndarray
    expand_w: np.ndarray
    expand_b: np.ndarray
    project_w: np.ndarray
    project_b: np.ndarray
    kernel: int = 5


@dataclass
class NeckParams:
    stem: ConvBN
    blocks: list[ConvNeXtParams]


@dataclass
class HeadBranch:
    conv: ConvBN
    out_w: np.ndarray
    out_b: np.ndarray


@dataclass
class HeadParams:
    cls: HeadBranch
    box: HeadBranch


@dataclass
class EncoderParams:
    mlp: MlpParams
    constructor: ConstructorParams


@dataclass
class NetworkParams:
    encoder: EncoderParams
    stages: list[MSFEParams]
    fuse: FuseParams
    neck: NeckParams
    head: HeadParams


BUFFER_NAMES = ("running_mean", "running_var")


def iter_arrays(obj, prefix: str = "") -> Iterator[tuple[str, np.ndarray, bool]]:
    """Yield ``(dotted_name, array, trainable)`` in a fixed traversal order."""
    if isinstance(obj, np.ndarray):
        yield prefix, obj, prefix.rsplit(".", 1)[-1] not in BUFFER_NAMES
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from iter_arrays(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from iter_arrays(item, f"{prefix}.{i}")


def trainable(params) -> list[tuple[str, np.ndarray]]:
    return [(n, a) for n, a, t in iter_arrays(params) if t]


def norms(obj) -> Iterator[NormParams]:
    if isinstance(obj, NormParams):
        yield obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from norms(getattr(obj, f.name))
    elif isinstance(obj, (list, tuple)):
        for item in obj:
            yield from norms(item)


def set_norm_mode(params, mode: str, update_stats: bool = True) -> None:
    for p in norms(params):
        p.mode = mode
        p.update_stats = update_stats


def _conv_bn(spec: KernelSpec, c_in: int, c_out: int, rng, dtype) -> ConvBN:
    return ConvBN(init_params(spec, c_in, c_out, rng, dtype=dtype), NormParams.identity(c_out, dtype))


def subm(kernel, dilation=1) -> KernelSpec:
    return KernelSpec.make(kernel, dilation=dilation, rank=2, mode="submanifold")


DOWN_SPEC = KernelSpec.make((3, 3), stride=2, padding=1, mode="spatial")
STEM_SPEC = KernelSpec.make((3, 3), stride=1, padding=1, mode="spatial")


def init_lsfe(c: int, dilation: int, rng, dtype=np.float64) -> LSFEParams:
    return LSFEParams(_conv_bn(subm(3), c, c, rng, dtype), _conv_bn(subm(3), c, c, rng, dtype),
                      _conv_bn(subm(3, dilation), c, c, rng, dtype), dilation)


def init_dlsfe(c: int, rng, dtype=np.float64) -> DLSFEParams:
    return DLSFEParams(_conv_bn(subm(3), c, c, rng, dtype), _conv_bn(subm((1, 9)), c, c, rng, dtype),
                       _conv_bn(subm((9, 1)), c, c, rng, dtype))


def init_convnext(c: int, kernel: int, expand: int, rng, dtype=np.float64) -> ConvNeXtParams:
    dw = init_params(subm(kernel), c, c, rng, bias=True, depthwise=True, dtype=dtype)
    hidden = expand * c
    b1, b2 = np.sqrt(6.0 / c), np.sqrt(6.0 / hidden)
    return ConvNeXtParams(dw, np.ones(c, dtype), np.zeros(c, dtype),
                          rng.uniform(-b1, b1, (c, hidden)).astype(dtype), np.zeros(hidden, dtype),
                          rng.uniform(-b2, b2, (hidden, c)).astype(dtype), np.zeros(c, dtype), kernel)


def _init_branch(c_in: int, c_mid: int, c_out: int, rng, dtype, out_bias: float = 0.0) -> HeadBranch:
    b = np.sqrt(6.0 / c_mid)
    return HeadBranch(_conv_bn(subm(3), c_in, c_mid, rng, dtype),
                      rng.uniform(-b, b, (c_mid, c_out)).astype(dtype) * 0.1,
                      np.full(c_out, out_bias, dtype))


def init_network(cfg: NetworkConfig, depth: int, rng, dtype=np.float64) -> NetworkParams:
    """Fresh parameters; ``depth`` is the vertical voxel count of the grid."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    encoder = EncoderParams(init_mlp(AUGMENTED_DIM, cfg.mlp_channels, rng, dtype),
                            init_constructor(depth, cfg.mlp_channels, cfg.stage_channels[0], rng, dtype))
    stages = []
    c_prev = cfg.stage_channels[0]
    for c, s in zip(cfg.stage_channels, cfg.stage_strides):
        down = _conv_bn(DOWN_SPEC, c_prev, c, rng, dtype) if s == 2 else None
        if down is None and c != c_prev:
            raise ChannelMismatch("a stage without downsampling cannot change channels")
        stages.append(MSFEParams(down, init_dlsfe(c, rng, dtype),
                                 [init_lsfe(c, m, rng, dtype) for m in cfg.dilation_schedule]))
        c_prev = c
    fuse = FuseParams([init_params(subm(1), c, cfg.fuse_channels, rng, dtype=dtype).weight[0]
                       for c in cfg.stage_channels[3:]],
                      [np.zeros(cfg.fuse_channels, dtype) for _ in range(3)])
    neck = NeckParams(_conv_bn(STEM_SPEC, cfg.fuse_channels, cfg.fuse_channels, rng, dtype),
                      [init_convnext(cfg.fuse_channels, cfg.neck_kernel, cfg.convnext_expand, rng, dtype)
                       for _ in range(cfg.neck_repeats)])
    prior = -math.log((1 - 0.01) / 0.01)
    head = HeadParams(_init_branch(cfg.fuse_channels, cfg.head_channels, cfg.num_classes, rng, dtype, prior),
                      _init_branch(cfg.fuse_channels, cfg.head_channels, 8, rng, dtype))
    return NetworkParams(encoder, stages, fuse, neck, head)


# ----------------------------------------------------------------- blocks ---

def conv_bn(t: SparseTensor, spec: KernelSpec, p: ConvBN, tape: Tape | None, act: bool) -> SparseTensor:
    out = conv_forward(t, build_rulebook(t, spec), p.conv, tape, spec)
    feats = batchnorm(out.features, p.norm, tape)
    if act:
        feats = relu(feats, tape)
    return out.replace_features(feats)


def _check_rank2(t: SparseTensor, channels: int):
    if t.rank != 2:
        raise ShapeMismatch(f"expected a rank-2 tensor, got rank {t.rank}")
    if t.channels != channels:
        raise ChannelMismatch(f"block expects {channels} channels, got {t.channels}")


def lsfe_block(t: SparseTensor, p: LSFEParams, m: int | None = None,
               tape: Tape | None = None) -> SparseTensor:
    """Residual + two 3x3 submanifold convs + one dilated 3x3 submanifold conv."""
    _check_rank2(t, p.main1.conv.weight.shape[1])
    m = p.dilation if m is None else m
    main = conv_bn(conv_bn(t, subm(3), p.main1, tape, True), subm(3), p.main2, tape, False)
    wide = conv_bn(t, subm(3, m), p.dilated, tape, False)
    return t.replace_features(relu(add(t.features, main.features, wide.features, tape=tape), tape))


def dlsfe_block(t: SparseTensor, p: DLSFEParams, tape: Tape | None = None) -> SparseTensor:
    """Residual + 3x3 branch + (1x9 then 9x1) branch, all submanifold."""
    _check_rank2(t, p.fine.conv.weight.shape[1])
    fine = conv_bn(t, subm(3), p.fine, tape, False)
    wide = conv_bn(conv_bn(t, subm((1, 9)), p.wide_row, tape, True), subm((9, 1)), p.wide_col, tape, False)
    return t.replace_features(relu(add(t.features, fine.features, wide.features, tape=tape), tape))


def downsample(t: SparseTensor, p: ConvBN, tape: Tape | None = None) -> SparseTensor:
    return conv_bn(t, DOWN_SPEC, p, tape, True)


def msfe_module(t: SparseTensor, p: MSFEParams, tape: Tape | None = None) -> SparseTensor:
    if p.down is not None:
        t = downsample(t, p.down, tape)
    t = dlsfe_block(t, p.dlsfe, tape)
    for block in p.lsfe:
        t = lsfe_block(t, block, tape=tape)
    return t


def backbone(t: SparseTensor, stages: list[MSFEParams], tape: Tape | None = None) -> list[SparseTensor]:
    outs = []
    for p in stages:
        if t.n == 0:
            c = p.dlsfe.fine.conv.weight.shape[2]
            shape = DOWN_SPEC.output_shape(t.spatial_shape) if p.down is not None else t.spatial_shape
            stride = t.stride * (2 if p.down is not None else 1)
            t = _empty_like(shape, c, t.batch_size, t.features.dtype, stride)
        else:
            t = msfe_module(t, p, tape)
        outs.append(t)
    return outs


def _empty_like(shape, channels, batch_size, dtype, stride) -> SparseTensor:
    keys = np.zeros(0, np.int64)
    return SparseTensor(np.zeros((0, len(shape) + 1), np.int64), np.zeros((0, channels), dtype),
                        tuple(shape), batch_size, CoordIndex(keys), stride)


def scatter_union(parts: list[tuple[SparseTensor, np.ndarray]], shape, batch_size: int,
                  stride: int, tape: Tape | None = None) -> SparseTensor:
    """Sum feature rows of several tensors placed at the given coordinates."""
    cache_key = ("union",) + tuple(t.index for t, _ in parts)
    cache = parts[0][0].index.rulebooks
    if cache_key in cache:
        index, rows = cache[cache_key]
    else:
        keys = [pack_keys(c) for _, c in parts]
        out_keys = np.unique(np.concatenate(keys)) if keys else np.zeros(0, np.int64)
        index = CoordIndex(out_keys)
        rows = [np.searchsorted(out_keys, k) for k in keys]
        cache[cache_key] = (index, rows)
    feats = [t.features for t, _ in parts]
    out = np.zeros((len(index), feats[0].shape[1]), feats[0].dtype)
    for r, f in zip(rows, feats):
        out[r] += f
    if tape is not None:
        tape.record("scatter_union", tuple(feats), out,
                    lambda e, g: tuple(g[r] for r in rows))
    return SparseTensor(unpack_keys(index.keys, len(shape)), out, tuple(shape), batch_size, index, stride)


def fuse_last_three(s4: SparseTensor, s5: SparseTensor, s6: SparseTensor, p: FuseParams,
                    tape: Tape | None = None) -> SparseTensor:
    """Project stages 4-6 to a common width and sum them on the stage-4 grid."""
    if s5.stride != 2 * s4.stride or s6.stride != 4 * s4.stride:
        raise StrideMismatch(f"strides {s4.stride}, {s5.stride}, {s6.stride} are not in ratio 1:2:4")
    parts = []
    for t, w, b, scale in zip((s4, s5, s6), p.weights, p.biases, (1, 2, 4)):
        feats = linear(t.features, w, b, tape) if t.n else np.zeros((0, w.shape[1]), w.dtype)
        coords = t.coords.copy()
        coords[:, 1:] *= scale
        parts.append((t.replace_features(feats), coords))
    return scatter_union(parts, s4.spatial_shape, s4.batch_size, s4.stride, tape)


def sparse_convnext_block(t: SparseTensor, p: ConvNeXtParams, tape: Tape | None = None) -> SparseTensor:
    """``t + project(gelu(expand(layer_norm(depthwise_kxk(t)))))``."""
    _check_rank2(t, p.ln_gamma.shape[0])
    spec = subm(p.kernel)
    dw = conv_forward(t, build_rulebook(t, spec), p.depthwise, tape, spec)
    h = layer_norm(dw.features, p.ln_gamma, p.ln_beta, tape=tape)
    h = gelu(linear(h, p.expand_w, p.expand_b, tape), tape)
    h = linear(h, p.project_w, p.project_b, tape)
    return t.replace_features(add(t.features, h, tape=tape))


def neck(t: SparseTensor, p: NeckParams, tape: Tape | None = None) -> SparseTensor:
    if t.n == 0:
        return _empty_like(t.spatial_shape, p.stem.conv.weight.shape[2], t.batch_size,
                           t.features.dtype, t.stride)
    t = conv_bn(t, STEM_SPEC, p.stem, tape, True)
    for block in p.blocks:
        t = sparse_convnext_block(t, block, tape)
    return t


def _branch(t: SparseTensor, p: HeadBranch, tape) -> np.ndarray:
    h = conv_bn(t, subm(3), p.conv, tape, True)
    return linear(h.features, p.out_w, p.out_b, tape)


def head(t: SparseTensor, p: HeadParams, tape: Tape | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-site class logits ``(n, classes)`` and raw box values ``(n, 8)``.

    Box layout: ``(ox, oy, z, log dx, log dy, log dz, sin yaw, cos yaw)``.
    """
    if t.n == 0:
        return (np.zeros((0, p.cls.out_w.shape[1]), t.features.dtype),
                np.zeros((0, 8), t.features.dtype))
    return _branch(t, p.cls, tape), _branch(t, p.box, tape)


# ---------------------------------------------------------------- forward ---

@dataclass
class ForwardResult:
    pillars: SparseTensor
    stages: list[SparseTensor]
    fused: SparseTensor
    neck: SparseTensor
    cls_logits: np.ndarray
    box: np.ndarray

    def active_counts(self) -> dict[str, int]:
        counts = {"pillars": self.pillars.n}
        counts.update({f"stage{i + 1}": s.n for i, s in enumerate(self.stages)})
        counts.update({"fused": self.fused.n, "neck": self.neck.n})
        return counts


def network_forward(params: NetworkParams, voxels: VoxelBatch, tape: Tape | None = None,
                    voxel_index: CoordIndex | None = None, check_finite: bool = True) -> ForwardResult:
    """Full pipeline from augmented rank-3 voxels to per-site predictions."""
    enc = params.encoder
    pillars = voxel2pillar_from_voxels(voxels, enc.mlp, enc.constructor, tape, voxel_index)
    stages = backbone(pillars, params.stages, tape)
    fused = fuse_last_three(*stages[3:], params.fuse, tape)
    n_out = neck(fused, params.neck, tape)
    cls, box = head(n_out, params.head, tape)
    if check_finite:
        for name, arr in [("pillars", pillars.features)] + \
                [(f"stage{i + 1}", s.features) for i, s in enumerate(stages)] + \
                [("fused", fused.features), ("neck", n_out.features), ("cls", cls), ("box", box)]:
            if not np.all(np.isfinite(arr)):
                raise FloatingPointError(f"non-finite values after {name}")
    return ForwardResult(pillars, stages, fused, n_out, cls, box)


# --------------------------------------------------------------- decoding ---

def sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def encode_box(center, size, yaw, site_yx, g: GridConfig, stride: int) -> np.ndarray:
    """Inverse of :func:`decode_boxes` for one box at one fused-grid site."""
    cell_x = stride * g.voxel_size[0]
    cell_y = stride * g.voxel_size[1]
    ox = (center[0] - g.x_range[0]) / cell_x - site_yx[1] - 0.5
    oy = (center[1] - g.y_range[0]) / cell_y - site_yx[0] - 0.5
    return np.array([ox, oy, center[2], math.log(size[0]), math.log(size[1]), math.log(size[2]),
                     math.sin(yaw), math.cos(yaw)])


def decode_boxes(box: np.ndarray, coords: np.ndarray, g: GridConfig, stride: int):
    """Centers, sizes and yaws for raw box rows at ``(b, y, x)`` sites."""
    cell_x = stride * g.voxel_size[0]
    cell_y = stride * g.voxel_size[1]
    cx = g.x_range[0] + (coords[:, 2] + 0.5 + box[:, 0]) * cell_x
    cy = g.y_range[0] + (coords[:, 1] + 0.5 + box[:, 1]) * cell_y
    centers = np.stack([cx, cy, box[:, 2]], axis=1)
    sizes = np.exp(box[:, 3:6])
    yaw = np.arctan2(box[:, 6], box[:, 7])
    yaw = np.where(yaw <= -math.pi, math.pi, yaw)
    return centers, sizes, yaw


def local_maxima(scores: np.ndarray, t: SparseTensor) -> np.ndarray:
    """Mask of sites whose score beats every active 3x3 neighbor.

    Equal scores are resolved in favor of the smaller ``(y, x)``.
    """
    keep = np.ones(t.n, dtype=bool)
    rb = build_rulebook(t, subm(3))
    center = len(rb.in_rows) // 2
    for k, (nb, site) in enumerate(zip(rb.in_rows, rb.out_rows)):
        if k == center or len(nb) == 0:
            continue
        s_nb, s_site = scores[nb], scores[site]
        nb_first = (t.coords[nb, 1] < t.coords[site, 1]) | (
            (t.coords[nb, 1] == t.coords[site, 1]) & (t.coords[nb, 2] < t.coords[site, 2]))
        beaten = (s_nb > s_site) | ((s_nb == s_site) & nb_first)
        keep[site[beaten]] = False
    return keep


def decode_detections(cls_logits: np.ndarray, box: np.ndarray, t: SparseTensor, g: GridConfig,
                      stride: int = 8, score_thresh: float = 0.3) -> list[Detection]:
    if t.n == 0:
        return []
    best = cls_logits.argmax(axis=1)
    scores = sigmoid(cls_logits.max(axis=1))
    keep = (scores > score_thresh) & local_maxima(scores, t)
    centers, sizes, yaws = decode_boxes(box, t.coords, g, stride)
    dets = []
    for i in np.nonzero(keep)[0]:
        dets.append(Detection(int(best[i]), float(scores[i]), tuple(map(float, centers[i])),
                              tuple(map(float, sizes[i])), float(yaws[i]), int(t.coords[i, 0])))
    dets.sort(key=lambda d: (d.batch, -d.score))
    return dets


def describe_pipeline(g: GridConfig, cfg: NetworkConfig) -> dict:
    """Structural constants of a configured pipeline (no parameters needed)."""
    shape = g.shape(2)
    shapes = []
    for s in cfg.stage_strides:
        if s == 2:
            shape = DOWN_SPEC.output_shape(shape)
        shapes.append(list(shape))
    return {
        "grid": [g.W, g.H, g.D],
        "constructor_offsets": constructor_taps(g),
        "stage_strides": cfg.cumulative_strides,
        "stage_shapes": shapes,
        "fused_stride": cfg.cumulative_strides[3],
        "neck_kernel": cfg.neck_kernel,
        "neck_repeats": cfg.neck_repeats,
        "dilation_schedule": list(cfg.dilation_schedule),
    }


def constructor_taps(g: GridConfig) -> int:
    return constructor_spec(g.D).volume
