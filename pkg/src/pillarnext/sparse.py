"""Coordinate-indexed sparse tensors over 2D/3D integer grids.

Coordinates are stored as an ``(n, 1 + rank)`` int64 array in
``(batch, y, x[, z])`` order. Every tensor owns a :class:`CoordIndex`, a hash
index over packed 64-bit keys that tensors with identical coordinates share
(so rulebooks built for one of them can be reused by all).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DuplicateCoord, NonFinite, OutOfBounds, ShapeMismatch

# bit widths of the packed key: batch 8 bits, every spatial axis 16 bits
BATCH_BITS = 8
AXIS_BITS = 16
MAX_BATCH = 1 << BATCH_BITS
MAX_EXTENT = 1 << AXIS_BITS

DENSE_BUDGET = 1 << 28  # elements


@dataclass(frozen=True)
class GridConfig:
    """Detection range and voxel geometry.

    ``W``/``H``/``D`` are the cell counts along x, y and z.
    """

    x_range: tuple[float, float] = (-75.2, 75.2)
    y_range: tuple[float, float] = (-75.2, 75.2)
    z_range: tuple[float, float] = (-2.0, 4.0)
    voxel_size: tuple[float, float, float] = (0.1, 0.1, 0.2)
    max_points_per_voxel: int = 32

    def __post_init__(self):
        for name in ("x_range", "y_range", "z_range", "voxel_size"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        for name in ("x_range", "y_range", "z_range"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi) and hi > lo):
                raise ValueError(f"{name} must satisfy max > min, got {(lo, hi)}")
        if len(self.voxel_size) != 3 or min(self.voxel_size) <= 0:
            raise ValueError(f"voxel_size must be three positive values, got {self.voxel_size}")
        if self.max_points_per_voxel < 1:
            raise ValueError("max_points_per_voxel must be >= 1")
        for (lo, hi), size, axis in zip(
            (self.x_range, self.y_range, self.z_range), self.voxel_size, "xyz"
        ):
            count = round((hi - lo) / size)
            if count < 1 or abs(count * size - (hi - lo)) > 1e-6:
                raise ValueError(
                    f"{axis} extent {hi - lo} is not a whole number of {size} m cells"
                )

    @property
    def W(self) -> int:
        return round((self.x_range[1] - self.x_range[0]) / self.voxel_size[0])

    @property
    def H(self) -> int:
        return round((self.y_range[1] - self.y_range[0]) / self.voxel_size[1])

    @property
    def D(self) -> int:
        return round((self.z_range[1] - self.z_range[0]) / self.voxel_size[2])

    @property
    def range_min(self) -> np.ndarray:
        return np.array([self.x_range[0], self.y_range[0], self.z_range[0]])

    @property
    def range_max(self) -> np.ndarray:
        return np.array([self.x_range[1], self.y_range[1], self.z_range[1]])

    def shape(self, rank: int) -> tuple[int, ...]:
        """Spatial shape in coordinate order: ``(H, W)`` or ``(H, W, D)``."""
        return (self.H, self.W) if rank == 2 else (self.H, self.W, self.D)


def pack_keys(coords: np.ndarray) -> np.ndarray:
    """Pack ``(b, y, x[, z])`` rows into unique int64 keys."""
    coords = np.asarray(coords, dtype=np.int64)
    keys = coords[:, 0].copy()
    for axis in range(1, coords.shape[1]):
        keys = (keys << AXIS_BITS) | coords[:, axis]
    return keys


def unpack_keys(keys: np.ndarray, rank: int) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    out = np.empty((len(keys), rank + 1), dtype=np.int64)
    mask = MAX_EXTENT - 1
    rest = keys.copy()
    for axis in range(rank, 0, -1):
        out[:, axis] = rest & mask
        rest >>= AXIS_BITS
    out[:, 0] = rest
    return out


class CoordIndex:
    """Hash index mapping packed coordinate keys to rows.

    Bulk queries go through a sorted key array (``searchsorted``); single
    lookups use a lazily built dict. ``rulebooks`` caches rulebooks keyed by
    kernel spec so that repeated convolutions over the same active set skip
    rebuilding.
    """

    def __init__(self, keys: np.ndarray):
        self.keys = keys
        self.order = np.argsort(keys, kind="stable")
        self.sorted_keys = keys[self.order]
        self._table: dict[int, int] | None = None
        self.rulebooks: dict = {}

    def __len__(self) -> int:
        return len(self.keys)

    def has_duplicates(self) -> bool:
        return bool(len(self.sorted_keys) > 1 and np.any(np.diff(self.sorted_keys) == 0))

    def find(self, query: np.ndarray) -> np.ndarray:
        """Rows for each query key, ``-1`` where absent."""
        query = np.asarray(query, dtype=np.int64)
        if len(self.sorted_keys) == 0:
            return np.full(query.shape, -1, dtype=np.int64)
        pos = np.searchsorted(self.sorted_keys, query)
        pos_c = np.minimum(pos, len(self.sorted_keys) - 1)
        hit = self.sorted_keys[pos_c] == query
        return np.where(hit, self.order[pos_c], -1)

    def get(self, key: int) -> int | None:
        if self._table is None:
            self._table = dict(zip(self.keys.tolist(), range(len(self.keys))))
        return self._table.get(int(key))


@dataclass(eq=False)
class SparseTensor:
    """Batched sparse feature map.

    Row order is not meaningful; compare tensors with :func:`tensors_equal`.
    Instances are treated as immutable.
    """

    coords: np.ndarray
    features: np.ndarray
    spatial_shape: tuple[int, ...]
    batch_size: int
    index: CoordIndex = field(repr=False)
    stride: int = 1

    @property
    def rank(self) -> int:
        return len(self.spatial_shape)

    @property
    def n(self) -> int:
        return len(self.coords)

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def replace_features(self, features: np.ndarray) -> "SparseTensor":
        """Same active set (and shared index), new feature rows."""
        if features.shape[0] != self.n:
            raise ShapeMismatch(f"expected {self.n} rows, got {features.shape[0]}")
        return SparseTensor(self.coords, features, self.spatial_shape, self.batch_size,
                            self.index, self.stride)

    def coord_set(self) -> set[tuple[int, ...]]:
        return set(map(tuple, self.coords.tolist()))


def _check_layout(coords: np.ndarray, shape: Sequence[int], batch_size: int):
    rank = len(shape)
    if rank not in (2, 3):
        raise ValueError(f"rank must be 2 or 3, got {rank}")
    if coords.ndim != 2 or coords.shape[1] != rank + 1:
        raise ShapeMismatch(f"coords must have shape (n, {rank + 1}), got {coords.shape}")
    if not 1 <= batch_size <= MAX_BATCH:
        raise ValueError(f"batch_size must be in [1, {MAX_BATCH}]")
    if any(s < 1 or s > MAX_EXTENT for s in shape):
        raise ValueError(f"spatial extents must be in [1, {MAX_EXTENT}], got {tuple(shape)}")
    if len(coords):
        upper = np.array([batch_size, *shape])
        bad = (coords < 0) | (coords >= upper)
        if bad.any():
            row = int(np.nonzero(bad.any(axis=1))[0][0])
            raise OutOfBounds(f"coord {tuple(coords[row])} outside batch/shape {tuple(upper)}")


def make_sparse(coords, features, shape, batch_size: int = 1, stride: int = 1) -> SparseTensor:
    """Validate inputs and build a tensor with a fresh index."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, len(shape) + 1)
    features = np.asarray(features)
    if features.ndim != 2:
        raise ShapeMismatch(f"features must be 2-D, got shape {features.shape}")
    if not np.issubdtype(features.dtype, np.floating):
        features = features.astype(np.float64)
    if len(coords) != len(features):
        raise ShapeMismatch(f"{len(coords)} coords but {len(features)} feature rows")
    shape = tuple(int(s) for s in shape)
    _check_layout(coords, shape, batch_size)
    if not np.all(np.isfinite(features)):
        raise NonFinite("features contain NaN or Inf")
    index = CoordIndex(pack_keys(coords))
    if index.has_duplicates():
        dup = index.sorted_keys[np.nonzero(np.diff(index.sorted_keys) == 0)[0][0]]
        raise DuplicateCoord(f"duplicate coordinate {tuple(unpack_keys([dup], len(shape))[0])}")
    return SparseTensor(coords, features, shape, batch_size, index, stride)


def from_sorted_keys(keys: np.ndarray, features: np.ndarray, shape, batch_size: int,
                     stride: int = 1) -> SparseTensor:
    """Internal constructor for already-unique keys (no validation)."""
    coords = unpack_keys(keys, len(shape))
    return SparseTensor(coords, features, tuple(shape), batch_size, CoordIndex(keys), stride)


def empty(shape, channels: int, batch_size: int = 1, dtype=np.float64, stride: int = 1) -> SparseTensor:
    return make_sparse(np.zeros((0, len(shape) + 1), np.int64),
                       np.zeros((0, channels), dtype), shape, batch_size, stride)


def to_dense(t: SparseTensor) -> np.ndarray:
    """Dense ``[batch, C, *spatial]`` array with zeros at inactive sites."""
    size = t.batch_size * t.channels * int(np.prod(t.spatial_shape))
    if size > DENSE_BUDGET:
        raise MemoryError(f"dense array of {size} elements exceeds budget {DENSE_BUDGET}")
    dense = np.zeros((t.batch_size, t.channels, *t.spatial_shape), dtype=t.features.dtype)
    if t.n:
        idx = (t.coords[:, 0], slice(None), *t.coords[:, 1:].T)
        # advanced indices separated by a slice put the row axis first
        dense[idx] = t.features
    return dense


def from_dense(dense: np.ndarray, active_mask: np.ndarray, stride: int = 1) -> SparseTensor:
    """Collect ``dense[b, :, site]`` for every true entry of ``active_mask``.

    ``active_mask`` has shape ``[batch, *spatial]``.
    """
    dense = np.asarray(dense)
    active_mask = np.asarray(active_mask, dtype=bool)
    if dense.ndim < 4 or active_mask.shape != (dense.shape[0], *dense.shape[2:]):
        raise ShapeMismatch(
            f"mask shape {active_mask.shape} does not match dense {dense.shape}"
        )
    coords = np.argwhere(active_mask).astype(np.int64)
    idx = (coords[:, 0], slice(None), *coords[:, 1:].T)
    features = dense[idx] if len(coords) else np.zeros((0, dense.shape[1]), dense.dtype)
    return make_sparse(coords, features, dense.shape[2:], dense.shape[0], stride)


def lookup(t: SparseTensor, c: Sequence[int]) -> int | None:
    """Row holding coordinate ``c`` or ``None`` when the site is inactive."""
    c = tuple(int(v) for v in c)
    if len(c) != t.rank + 1:
        raise ShapeMismatch(f"coordinate {c} has wrong length for rank {t.rank}")
    upper = (t.batch_size, *t.spatial_shape)
    if any(v < 0 or v >= u for v, u in zip(c, upper)):
        raise OutOfBounds(f"coord {c} outside {upper}")
    return t.index.get(int(pack_keys(np.array([c]))[0]))


def tensors_equal(a: SparseTensor, b: SparseTensor, atol: float = 0.0) -> bool:
    """Equality up to row permutation."""
    if (a.spatial_shape != b.spatial_shape or a.batch_size != b.batch_size
            or a.n != b.n or a.channels != b.channels):
        return False
    rows = b.index.find(a.index.keys)
    if np.any(rows < 0):
        return False
    return bool(np.all(np.abs(a.features - b.features[rows]) <= atol))


def random_sparse(rng: np.random.Generator, shape, density: float, channels: int,
                  batch_size: int = 1, dtype=np.float64, min_active: int = 1) -> SparseTensor:
    """Uniformly sampled active set with standard-normal features."""
    total = batch_size * int(np.prod(shape))
    n = min(total, max(min_active, int(round(density * total))))
    flat = np.sort(rng.choice(total, size=n, replace=False))
    coords = np.stack(np.unravel_index(flat, (batch_size, *shape)), axis=1).astype(np.int64)
    feats = rng.standard_normal((n, channels)).astype(dtype)
    return make_sparse(coords, feats, shape, batch_size)
