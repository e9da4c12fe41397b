import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pillarnext.errors import DuplicateCoord, NonFinite, OutOfBounds, ShapeMismatch
from pillarnext.sparse import (GridConfig, empty, from_dense, lookup, make_sparse, pack_keys,
                               random_sparse, tensors_equal, to_dense, unpack_keys)


def test_default_grid_counts():
    g = GridConfig()
    assert (g.W, g.H, g.D) == (1504, 1504, 30)
    assert g.shape(2) == (1504, 1504)
    assert g.shape(3) == (1504, 1504, 30)


@pytest.mark.parametrize("kw", [
    {"x_range": (1.0, 1.0)},
    {"voxel_size": (0.1, 0.1, 0.0)},
    {"voxel_size": (0.3, 0.1, 0.2)},      # 150.4 / 0.3 is not whole
    {"max_points_per_voxel": 0},
])
def test_grid_rejects_invalid(kw):
    with pytest.raises(ValueError):
        GridConfig(**kw)


def test_make_sparse_minimal():
    t = make_sparse([(0, 0, 0)], [[1.0]], (4, 4))
    assert t.n == 1 and t.channels == 1


def test_make_sparse_errors():
    with pytest.raises(DuplicateCoord):
        make_sparse([(0, 1, 1), (0, 1, 1)], [[1.0], [2.0]], (4, 4))
    with pytest.raises(OutOfBounds):
        make_sparse([(0, 5, 0)], [[1.0]], (4, 4))
    with pytest.raises(OutOfBounds):
        make_sparse([(1, 0, 0)], [[1.0]], (4, 4), batch_size=1)
    with pytest.raises(NonFinite):
        make_sparse([(0, 0, 0)], [[np.nan]], (4, 4))
    with pytest.raises(ShapeMismatch):
        make_sparse([(0, 0, 0)], [[1.0], [2.0]], (4, 4))


def test_to_dense_single_site():
    t = make_sparse([(0, 2, 3)], [[7.0]], (4, 4))
    d = to_dense(t)
    expected = np.zeros((1, 1, 4, 4))
    expected[0, 0, 2, 3] = 7.0
    np.testing.assert_array_equal(d, expected)


def test_empty_tensor_dense_is_zero():
    assert not to_dense(empty((3, 5), 2, batch_size=2)).any()


def test_from_dense_masks():
    d = np.arange(2 * 3 * 2 * 2, dtype=float).reshape(2, 3, 2, 2)
    assert from_dense(d, np.zeros((2, 2, 2), bool)).n == 0
    assert from_dense(d, np.ones((2, 2, 2), bool)).n == 8
    with pytest.raises(ShapeMismatch):
        from_dense(d, np.ones((2, 3, 3), bool))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), rank=st.sampled_from([2, 3]),
       density=st.floats(0.01, 0.6), batch=st.integers(1, 3))
def test_dense_round_trip(seed, rank, density, batch):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 9, size=rank))
    t = random_sparse(rng, shape, density, 3, batch_size=batch)
    mask = np.zeros((batch, *shape), bool)
    mask[tuple(t.coords.T)] = True
    back = from_dense(to_dense(t), mask)
    assert tensors_equal(t, back)


def test_lookup_active_inactive_and_bounds():
    t = make_sparse([(0, 1, 2), (0, 3, 3)], [[1.0], [2.0]], (4, 4))
    assert lookup(t, (0, 3, 3)) == 1
    assert lookup(t, (0, 0, 0)) is None
    with pytest.raises(OutOfBounds):
        lookup(t, (0, 4, 0))


def test_lookup_resolves_insertion_rows():
    rng = np.random.default_rng(3)
    flat = rng.choice(2 * 64 * 64, size=1000, replace=False)
    coords = np.stack(np.unravel_index(flat, (2, 64, 64)), axis=1)
    t = make_sparse(coords, rng.standard_normal((1000, 2)), (64, 64), batch_size=2)
    assert all(lookup(t, c) == i for i, c in enumerate(coords))
    np.testing.assert_array_equal(t.index.find(pack_keys(coords)), np.arange(1000))


@given(st.lists(st.tuples(st.integers(0, 255), st.integers(0, 65535), st.integers(0, 65535),
                          st.integers(0, 65535)), min_size=1, max_size=50))
def test_pack_unpack_round_trip(rows):
    coords = np.array(rows, dtype=np.int64)
    np.testing.assert_array_equal(unpack_keys(pack_keys(coords), 3), coords)


def test_tensors_equal_ignores_row_order():
    a = make_sparse([(0, 0, 0), (0, 1, 1)], [[1.0], [2.0]], (2, 2))
    b = make_sparse([(0, 1, 1), (0, 0, 0)], [[2.0], [1.0]], (2, 2))
    c = make_sparse([(0, 1, 1), (0, 0, 0)], [[2.0], [1.5]], (2, 2))
    assert tensors_equal(a, b)
    assert not tensors_equal(a, c)
