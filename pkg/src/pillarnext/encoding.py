"""Point ingestion, voxelization and the pillar / Voxel2Pillar encoders."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conv import ConvParams, KernelSpec, build_rulebook, conv_forward, init_params
from .errors import ChannelMismatch, ConfigMismatch, EmptyGroup, MalformedLength, NonFinite
from .functional import NormParams, batchnorm, linear, relu
from .sparse import CoordIndex, GridConfig, SparseTensor, pack_keys
from .tape import Tape

POINT_DTYPE = np.dtype("<f4")
AUGMENTED_DIM = 7


@dataclass
class PointCloud:
    """``points`` is ``(n, F)`` with columns ``x, y, z, intensity, ...``."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = np.zeros((0, max(4, pts.shape[-1] if pts.ndim == 2 else 4)))
        self.points = pts
        if pts.ndim != 2 or pts.shape[1] < 4:
            raise ValueError("points need at least 4 columns (x, y, z, intensity)")
        if not np.all(np.isfinite(self.points)):
            raise NonFinite("point cloud contains NaN or Inf")

    def __len__(self) -> int:
        return len(self.points)


def load_points(data: bytes) -> PointCloud:
    """Parse headerless little-endian float32 ``x, y, z, intensity`` records."""
    if len(data) % 16:
        raise MalformedLength(f"{len(data)} bytes is not a multiple of 16")
    pts = np.frombuffer(data, dtype=POINT_DTYPE).reshape(-1, 4)
    if not np.all(np.isfinite(pts)):
        raise NonFinite("point file contains NaN or Inf records")
    return PointCloud(pts.astype(np.float64))


def dump_points(pc: PointCloud) -> bytes:
    return np.ascontiguousarray(pc.points[:, :4], dtype=POINT_DTYPE).tobytes()


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def point_priority(points: np.ndarray, seed: int) -> np.ndarray:
    """Seeded pseudo-random key that depends only on each point's values.

    Ordering and subsampling by this key make voxelization independent of
    the order points arrive in.
    """
    bits = np.ascontiguousarray(points[:, :4], dtype=np.float64).view(np.uint64)
    h = np.full(len(points), np.uint64(seed & 0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    with np.errstate(over="ignore"):
        for col in range(bits.shape[1]):
            h = _splitmix64(h ^ bits[:, col])
    return h


@dataclass
class VoxelBatch:
    """Occupied cells with their member points, stored flat.

    Members of group ``g`` are rows ``starts[g]:starts[g+1]`` of
    ``point_index``/``features``. ``padded()`` gives the ``(G, P_max, F)``
    view with a valid count per group.
    """

    coords: np.ndarray          # (G, 1 + rank) as (b, y, x[, z])
    starts: np.ndarray          # (G + 1,)
    point_index: np.ndarray     # (M,) source row of each kept point
    features: np.ndarray        # (M, F)
    spatial_shape: tuple[int, ...]
    batch_size: int = 1
    max_points: int = 32

    @property
    def rank(self) -> int:
        return len(self.spatial_shape)

    @property
    def n_groups(self) -> int:
        return len(self.coords)

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.starts)

    def group_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_groups), self.counts)

    def padded(self) -> tuple[np.ndarray, np.ndarray]:
        out = np.zeros((self.n_groups, self.max_points, self.features.shape[1]), self.features.dtype)
        slot = np.arange(len(self.features)) - np.repeat(self.starts[:-1], self.counts)
        out[self.group_ids(), slot] = self.features
        return out, self.counts

    def with_features(self, features: np.ndarray) -> "VoxelBatch":
        return VoxelBatch(self.coords, self.starts, self.point_index, features,
                          self.spatial_shape, self.batch_size, self.max_points)

    @staticmethod
    def concat(batches: list["VoxelBatch"]) -> "VoxelBatch":
        """Stack per-scene batches; scene ``i`` must carry batch index ``i``."""
        first = batches[0]
        offsets = np.cumsum([0] + [len(b.features) for b in batches[:-1]])
        starts = np.concatenate([[0]] + [b.starts[1:] + o for b, o in zip(batches, offsets)])
        return VoxelBatch(
            np.concatenate([b.coords for b in batches]),
            starts.astype(np.int64),
            np.concatenate([b.point_index for b in batches]),
            np.concatenate([b.features for b in batches]),
            first.spatial_shape, len(batches), first.max_points)


def voxelize(pc: PointCloud, g: GridConfig, rank: int = 3, rng_seed: int = 0,
             batch_index: int = 0, batch_size: int | None = None) -> VoxelBatch:
    """Bin points into cells; low range bounds inclusive, high exclusive.

    Points outside the z range are dropped for both ranks (the pillar spans
    the full z range). Cells holding more than ``max_points_per_voxel``
    points keep the ones with the smallest seeded priority.
    """
    if rank not in (2, 3):
        raise ValueError("rank must be 2 or 3")
    pts = pc.points
    shape = g.shape(rank)
    counts_xyz = np.array([g.W, g.H, g.D])
    cell = np.floor((pts[:, :3] - g.range_min) / np.array(g.voxel_size)).astype(np.int64) \
        if len(pts) else np.zeros((0, 3), np.int64)
    keep = np.all((cell >= 0) & (cell < counts_xyz), axis=1)
    rows = np.nonzero(keep)[0]
    cell = cell[rows]
    b = np.full((len(rows), 1), batch_index, dtype=np.int64)
    coords = np.concatenate([b, cell[:, [1, 0]]] + ([cell[:, 2:3]] if rank == 3 else []), axis=1)
    keys = pack_keys(coords)
    prio = point_priority(pts[rows], rng_seed)
    order = np.lexsort((prio, keys))
    keys, rows, coords = keys[order], rows[order], coords[order]
    if len(keys):
        first = np.concatenate([[True], keys[1:] != keys[:-1]])
        group_start = np.nonzero(first)[0]
        rank_in_group = np.arange(len(keys)) - np.repeat(group_start, np.diff(np.append(group_start, len(keys))))
        kept = rank_in_group < g.max_points_per_voxel
        keys, rows, coords = keys[kept], rows[kept], coords[kept]
        first = first[kept]
        starts = np.append(np.nonzero(first)[0], len(keys))
        gcoords = coords[first]
    else:
        starts = np.zeros(1, dtype=np.int64)
        gcoords = np.zeros((0, rank + 1), np.int64)
    return VoxelBatch(gcoords, starts.astype(np.int64), rows, pts[rows, :4].copy(), shape,
                      batch_size if batch_size is not None else batch_index + 1,
                      g.max_points_per_voxel)


def voxelize_many(clouds: list[PointCloud], g: GridConfig, rank: int = 3, rng_seed: int = 0) -> VoxelBatch:
    return VoxelBatch.concat([voxelize(pc, g, rank, rng_seed, i, len(clouds))
                              for i, pc in enumerate(clouds)])


def augment_point_features(vb: VoxelBatch, g: GridConfig) -> VoxelBatch:
    """Append offsets to the cell center: ``(x, y, z, i, dx, dy, dz)``.

    For pillars the vertical center is the middle of the z range.
    """
    gid = vb.group_ids()
    c = vb.coords[gid]
    size = np.array(g.voxel_size)
    cx = g.x_range[0] + (c[:, 2] + 0.5) * size[0]
    cy = g.y_range[0] + (c[:, 1] + 0.5) * size[1]
    if vb.rank == 3:
        cz = g.z_range[0] + (c[:, 3] + 0.5) * size[2]
    else:
        cz = np.full(len(c), 0.5 * (g.z_range[0] + g.z_range[1]))
    raw = vb.features[:, :4]
    offsets = raw[:, :3] - np.stack([cx, cy, cz], axis=1) if len(raw) else np.zeros((0, 3))
    return vb.with_features(np.concatenate([raw, offsets], axis=1))


@dataclass
class MlpParams:
    weight: np.ndarray     # (F', C_mid)
    norm: NormParams


def init_mlp(in_dim: int, c_mid: int, rng, dtype=np.float64) -> MlpParams:
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    bound = np.sqrt(6.0 / in_dim)
    return MlpParams(rng.uniform(-bound, bound, (in_dim, c_mid)).astype(dtype),
                     NormParams.identity(c_mid, dtype))


def point_mlp(vb: VoxelBatch, p: MlpParams, tape: Tape | None = None) -> np.ndarray:
    """``relu(batchnorm(x @ W))`` for every kept point; returns ``(M, C_mid)``."""
    if vb.features.shape[1] != p.weight.shape[0]:
        raise ChannelMismatch(f"MLP expects {p.weight.shape[0]} inputs, got {vb.features.shape[1]}")
    x = vb.features.astype(p.weight.dtype, copy=False)
    return relu(batchnorm(linear(x, p.weight, tape=tape), p.norm, tape), tape)


# ---------------------------------------------------------------- pooling ---

def _first_arg(values: np.ndarray, target: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """Row of the first member equal to the group's pooled value, per channel."""
    gid = np.repeat(np.arange(len(starts) - 1), np.diff(starts))
    rows = np.arange(len(values))[:, None]
    cand = np.where(values == target[gid], rows, len(values))
    return np.minimum.reduceat(cand, starts[:-1], axis=0)


def segment_extreme(values: np.ndarray, starts: np.ndarray, kind: str,
                    tape: Tape | None = None) -> np.ndarray:
    """Per-group channelwise max or min; gradient goes to the first achieving row."""
    if len(starts) > 1 and np.any(np.diff(starts) == 0):
        raise EmptyGroup("pooling over an empty group")
    if len(starts) == 1:
        return np.zeros((0, values.shape[1]), values.dtype)
    ufunc = np.maximum if kind == "max" else np.minimum
    out = ufunc.reduceat(values, starts[:-1], axis=0)
    if tape is not None:
        arg = _first_arg(values, out, starts)
        tape.note_branch(arg)

        def back(e, g):
            gv = np.zeros_like(e.inputs[0])
            cols = np.broadcast_to(np.arange(g.shape[1]), g.shape)
            gv[e.ctx["arg"], cols] = g
            return (gv,)
        tape.record(f"pool_{kind}", (values,), out, back, arg=arg)
    return out


def segment_mean(values: np.ndarray, starts: np.ndarray, tape: Tape | None = None) -> np.ndarray:
    if len(starts) > 1 and np.any(np.diff(starts) == 0):
        raise EmptyGroup("pooling over an empty group")
    if len(starts) == 1:
        return np.zeros((0, values.shape[1]), values.dtype)
    counts = np.diff(starts)
    out = np.add.reduceat(values, starts[:-1], axis=0) / counts[:, None]
    if tape is not None:
        def back(e, g):
            return (np.repeat(g / counts[:, None], counts, axis=0),)
        tape.record("pool_mean", (values,), out, back)
    return out


def concat_channels(parts: list[np.ndarray], tape: Tape | None = None) -> np.ndarray:
    out = np.concatenate(parts, axis=1)
    if tape is not None:
        edges = np.cumsum([0] + [p.shape[1] for p in parts])

        def back(e, g):
            return tuple(g[:, a:b] for a, b in zip(edges[:-1], edges[1:]))
        tape.record("concat", tuple(parts), out, back)
    return out


def segment_pool_mmm(values: np.ndarray, starts: np.ndarray, tape: Tape | None = None) -> np.ndarray:
    """``[max, min, mean]`` per group, concatenated along channels."""
    return concat_channels([segment_extreme(values, starts, "max", tape),
                            segment_extreme(values, starts, "min", tape),
                            segment_mean(values, starts, tape)], tape)


def pool_max(group: np.ndarray, tape: Tape | None = None) -> np.ndarray:
    group = np.atleast_2d(group)
    if len(group) == 0:
        raise EmptyGroup("pool_max over an empty group")
    return segment_extreme(group, np.array([0, len(group)]), "max", tape)[0]


def pool_mmm(group: np.ndarray, tape: Tape | None = None) -> np.ndarray:
    group = np.atleast_2d(group)
    if len(group) == 0:
        raise EmptyGroup("pool_mmm over an empty group")
    return segment_pool_mmm(group, np.array([0, len(group)]), tape)[0]


# --------------------------------------------------------------- encoders ---

def baseline_pillar_encode(pc: PointCloud | VoxelBatch, g: GridConfig, params: MlpParams,
                           tape: Tape | None = None, rng_seed: int = 0) -> SparseTensor:
    """Pillar MLP followed by channelwise max over each pillar's points."""
    vb = pc if isinstance(pc, VoxelBatch) else augment_point_features(voxelize(pc, g, 2, rng_seed), g)
    feats = point_mlp(vb, params, tape) if len(vb.features) else \
        np.zeros((0, params.weight.shape[1]), params.weight.dtype)
    pooled = segment_extreme(feats, vb.starts, "max", tape)
    return SparseTensor(vb.coords, pooled, vb.spatial_shape, vb.batch_size,
                        CoordIndex(pack_keys(vb.coords)))


@dataclass
class ConstructorParams:
    """Vertical-collapse convolution plus its norm."""

    conv: ConvParams       # weight (D, 3*C_mid, C_out)
    norm: NormParams


def constructor_spec(depth: int) -> KernelSpec:
    return KernelSpec.make((1, 1, depth), stride=(1, 1, depth), padding=0, mode="spatial")


def voxel_tensor(vb: VoxelBatch, mlp: MlpParams, tape: Tape | None = None,
                 index: CoordIndex | None = None) -> SparseTensor:
    """Rank-3 tensor of per-voxel ``[max, min, mean]`` MLP features."""
    c_mid = mlp.weight.shape[1]
    if len(vb.features):
        pooled = segment_pool_mmm(point_mlp(vb, mlp, tape), vb.starts, tape)
    else:
        pooled = np.zeros((0, 3 * c_mid), mlp.weight.dtype)
    if index is None:
        index = CoordIndex(pack_keys(vb.coords))
    return SparseTensor(vb.coords, pooled, vb.spatial_shape, vb.batch_size, index)


def collapse_to_pillars(t: SparseTensor) -> SparseTensor:
    """Drop the unit z axis of a constructor output; the 2-D index is cached."""
    if t.rank != 3 or t.spatial_shape[2] != 1:
        raise ConfigMismatch("expected a rank-3 tensor with z extent 1")
    cached = t.index.rulebooks.get("pillar_index")
    coords = t.coords[:, :3]
    if cached is None:
        cached = CoordIndex(pack_keys(coords))
        t.index.rulebooks["pillar_index"] = cached
    return SparseTensor(coords, t.features, t.spatial_shape[:2], t.batch_size, cached, t.stride)


def voxel2pillar_from_voxels(vb: VoxelBatch, mlp: MlpParams, constructor: ConstructorParams,
                             tape: Tape | None = None, index: CoordIndex | None = None,
                             relu_out: bool = True) -> SparseTensor:
    depth = vb.spatial_shape[2]
    if constructor.conv.weight.shape[0] != depth:
        raise ConfigMismatch(
            f"constructor has {constructor.conv.weight.shape[0]} vertical taps, grid D={depth}")
    vox = voxel_tensor(vb, mlp, tape, index)
    spec = constructor_spec(depth)
    col = conv_forward(vox, build_rulebook(vox, spec), constructor.conv, tape, spec)
    pillars = collapse_to_pillars(col)
    if pillars.n == 0:
        return pillars
    out = batchnorm(pillars.features, constructor.norm, tape)
    if relu_out:
        out = relu(out, tape)
    return pillars.replace_features(out)


def voxel2pillar_encode(pc: PointCloud, g: GridConfig, mlp: MlpParams, constructor: ConstructorParams,
                        tape: Tape | None = None, rng_seed: int = 0) -> SparseTensor:
    """Voxel MLP, [max, min, mean] pooling, then a 1x1xD spatial conv collapsing each column."""
    if constructor.conv.weight.shape[0] != g.D:
        raise ConfigMismatch(f"constructor has {constructor.conv.weight.shape[0]} taps, grid D={g.D}")
    vb = augment_point_features(voxelize(pc, g, 3, rng_seed), g)
    return voxel2pillar_from_voxels(vb, mlp, constructor, tape)


def init_constructor(depth: int, c_mid: int, c_out: int, rng, dtype=np.float64) -> ConstructorParams:
    conv = init_params(constructor_spec(depth), 3 * c_mid, c_out, rng, dtype=dtype)
    return ConstructorParams(conv, NormParams.identity(c_out, dtype))
