"""Acceptance criteria 1-10, one test each.

Every test prints a single ``[criterion N] PASS|FAIL ...`` line (visible with
``pytest -s`` or in the terminal summary). Running this file directly with
``python3 tests/test_acceptance.py`` executes all criteria without pytest.
"""

import csv
import functools
import json
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from pillarnext.cli import main
from pillarnext.conv import ConvParams, KernelSpec, build_rulebook, dense_conv_oracle, init_params, sparse_conv
from pillarnext.encoding import (PointCloud, baseline_pillar_encode, init_constructor, init_mlp, pool_max,
                                 pool_mmm, voxel2pillar_encode)
from pillarnext.gradcheck import registered_cases
from pillarnext.network import describe_pipeline, init_dlsfe, NetworkConfig, subm
from pillarnext.sparse import GridConfig, random_sparse, to_dense

ROOT = Path(__file__).resolve().parents[1]
TOY = str(ROOT / "configs" / "toy.json")
RESULTS: dict[int, str] = {}

SUBM = [((3, 3), 1), ((3, 3), 2), ((3, 3), 3), ((1, 9), 1), ((9, 1), 1), ((5, 5), 1)]


def _record(n: int, ok: bool, detail: str) -> None:
    line = f"[criterion {n:2d}] {'PASS' if ok else 'FAIL'} {detail}"
    RESULTS[n] = line
    print(line, file=sys.__stdout__, flush=True)


def _criterion(n):
    """Run the wrapped check, print its line and re-raise assertion failures."""
    def wrap(fn):
        @functools.wraps(fn)
        def test(*args, **kwargs):
            start = time.perf_counter()
            try:
                detail = fn(*args, **kwargs)
            except AssertionError as exc:
                _record(n, False, f"{fn.__name__}: {exc}")
                raise
            _record(n, True, f"{detail} ({time.perf_counter() - start:.1f}s)")
        return test
    return wrap


def _sweep(rng, count, max_side):
    for i in range(count):
        shape = tuple(int(v) for v in rng.integers(4, max_side + 1, size=2))
        density = float(rng.uniform(0.01, 0.20))
        batch = int(rng.integers(1, 3))
        yield random_sparse(rng, shape, density, 2, batch_size=batch)


def _rel(a, b):
    return float(np.max(np.abs(a - b), initial=0.0) / max(np.max(np.abs(b), initial=0.0), 1e-300))


@_criterion(1)
def test_c01_submanifold_invariance():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    checked = 0
    for t in _sweep(rng, 200, 64):
        for kernel, m in SUBM:
            spec = KernelSpec.make(kernel, dilation=m, rank=2)
            out = sparse_conv(t, spec, init_params(spec, 2, 2, rng))
            assert out.coord_set() == t.coord_set(), f"active set changed for {kernel} m={m}"
            checked += 1
    elapsed = time.perf_counter() - start
    assert elapsed < 10, f"took {elapsed:.1f}s"
    return f"{checked} tensor/kernel pairs keep their active set exactly"


@_criterion(2)
def test_c02_dense_oracle_equivalence():
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    worst_sub = worst_spatial = worst_col = 0.0
    spatial = [KernelSpec.make(k, stride=s, padding=k // 2, mode="spatial", rank=2)
               for k in (1, 2, 3) for s in (1, 2)]
    for t in _sweep(rng, 200, 16):
        mask = np.zeros((t.batch_size, *t.spatial_shape), bool)
        mask[tuple(t.coords.T)] = True
        dense = to_dense(t)
        for kernel, m in SUBM:
            spec = KernelSpec.make(kernel, dilation=m, rank=2)
            p = init_params(spec, 2, 3, rng, bias=True)
            p.bias[:] = rng.standard_normal(3)
            got = to_dense(sparse_conv(t, spec, p)).transpose(0, 2, 3, 1)[mask]
            ref = dense_conv_oracle(dense, spec, p).transpose(0, 2, 3, 1)[mask]
            worst_sub = max(worst_sub, _rel(got, ref))
        for spec in spatial:
            p = init_params(spec, 2, 3, rng)
            worst_spatial = max(worst_spatial, _rel(to_dense(sparse_conv(t, spec, p)),
                                                    dense_conv_oracle(dense, spec, p)))
    for n in range(1, 9):
        spec = KernelSpec.make((1, 1, n), stride=(1, 1, n), padding=0, mode="spatial")
        for _ in range(5):
            t = random_sparse(rng, (int(rng.integers(2, 9)), int(rng.integers(2, 9)), n),
                              float(rng.uniform(0.05, 0.3)), 2, batch_size=int(rng.integers(1, 3)))
            p = init_params(spec, 2, 3, rng)
            worst_col = max(worst_col, _rel(to_dense(sparse_conv(t, spec, p)),
                                            dense_conv_oracle(to_dense(t), spec, p)))
    elapsed = time.perf_counter() - start
    assert worst_sub <= 1e-12, f"submanifold rel err {worst_sub:.2e}"
    assert worst_spatial <= 1e-12, f"spatial rel err {worst_spatial:.2e}"
    assert worst_col <= 1e-12, f"column kernel rel err {worst_col:.2e}"
    assert elapsed < 30, f"took {elapsed:.1f}s"
    return (f"max rel err submanifold {worst_sub:.1e}, spatial {worst_spatial:.1e}, "
            f"1x1xN {worst_col:.1e}")


@_criterion(3)
def test_c03_gradient_suite(tmp_path):
    report = tmp_path / "gradcheck.csv"
    start = time.perf_counter()
    code = main(["gradcheck", "--seed", "0", "--tol", "1e-5", "--report", str(report)])
    elapsed = time.perf_counter() - start
    rows = list(csv.DictReader(open(report)))
    worst = max(rows, key=lambda r: float(r["max_rel_error"]))
    assert code == 0, f"failures: {[r['check'] for r in rows if r['passed'] != '1']}"
    assert len(rows) == len(registered_cases())
    assert elapsed < 300, f"took {elapsed:.1f}s"
    return f"{len(rows)} checks pass at 1e-5, worst {worst['check']} {worst['max_rel_error']}"


@_criterion(4)
def test_c04_pooling_properties():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        n, c = int(rng.integers(1, 33)), int(rng.integers(1, 9))
        g = rng.standard_normal((n, c))
        out = pool_mmm(g)
        perm = pool_mmm(g[rng.permutation(n)])
        assert np.array_equal(perm[:2 * c], out[:2 * c]), "max/min not permutation invariant"
        assert np.max(np.abs(perm[2 * c:] - out[2 * c:])) <= 1e-12, "mean not permutation invariant"
        mx, mn, mean = out[:c], out[c:2 * c], out[2 * c:]
        assert np.all(mx >= mean - 1e-12) and np.all(mean >= mn - 1e-12), "max >= mean >= min violated"
        assert np.array_equal(out[:c], pool_max(g)), "pool_mmm[0:C] != pool_max"
        single = g[:1]
        assert np.array_equal(pool_mmm(single), np.tile(single[0], 3)), "single point does not collapse"
    return "1000 random groups"


def _random_cloud(rng, g, n):
    xyz = rng.uniform(g.range_min - 0.3, g.range_max + 0.3, size=(n, 3))
    return PointCloud(np.concatenate([xyz, rng.uniform(0, 1, (n, 1))], axis=1))


def _column_occupancy(pc, g):
    xyz = pc.points[:, :3]
    occupied = set()
    for p in xyz:
        cell = [int(np.floor((p[a] - g.range_min[a]) / g.voxel_size[a])) for a in range(3)]
        if all(0 <= cell[a] < (g.W, g.H, g.D)[a] for a in range(3)):
            occupied.add((0, cell[1], cell[0]))
    return occupied


@_criterion(5)
def test_c05_voxel2pillar_structure():
    rng = np.random.default_rng(5)
    g = GridConfig((-6.4, 6.4), (-6.4, 6.4), (-2.0, 4.0), (0.4, 0.4, 0.5))
    g1 = GridConfig((-6.4, 6.4), (-6.4, 6.4), (-2.0, 4.0), (0.4, 0.4, 6.0))
    mlp = init_mlp(7, 4, rng)
    mlp.norm.mode = "eval"
    cons, cons1 = init_constructor(g.D, 4, 6, rng), init_constructor(1, 4, 6, rng)
    cons.norm.mode = cons1.norm.mode = "eval"
    for _ in range(100):
        pc = _random_cloud(rng, g, int(rng.integers(0, 400)))
        assert voxel2pillar_encode(pc, g, mlp, cons).coord_set() == _column_occupancy(pc, g)
        assert voxel2pillar_encode(pc, g1, mlp, cons1).coord_set() == \
            baseline_pillar_encode(pc, g1, mlp).coord_set()
    return "100 clouds: active set equals column occupancy; D=1 equals baseline"


@_criterion(6)
def test_c06_default_constants(tmp_path):
    d = describe_pipeline(GridConfig(), NetworkConfig())
    assert d["grid"] == [1504, 1504, 30]
    assert d["constructor_offsets"] == 30
    assert d["stage_strides"] == [1, 2, 4, 8, 16, 32]
    assert d["fused_stride"] == 8
    assert d["neck_kernel"] == 5 and d["neck_repeats"] == 1
    (tmp_path / "empty.bin").write_bytes(b"")
    assert main(["forward", "--input", str(tmp_path / "empty.bin"), "--out", str(tmp_path / "d.json")]) == 0
    stats = json.loads((tmp_path / "d.json").read_text())["stats"]
    assert stats["grid"] == [1504, 1504, 30] and stats["stage_strides"] == [1, 2, 4, 8, 16, 32]
    return "grid [1504,1504,30], 30 offsets, strides 1..32, fused 8, neck 5x5 x1"


@_criterion(7)
def test_c07_separable_branch_equivalence():
    c = 16
    p = init_dlsfe(c, np.random.default_rng(7))
    sep_params = p.wide_row.conv.weight.size + p.wide_col.conv.weight.size
    assert sep_params == 2 * 9 * c * c
    impulse = np.zeros((1, 1, 25, 25))
    impulse[0, 0, 12, 12] = 1.0
    ones = ConvParams(np.ones((9, 1, 1)))
    sep = dense_conv_oracle(dense_conv_oracle(impulse, subm((1, 9)), ones), subm((9, 1)), ones)[0, 0]
    two = dense_conv_oracle(dense_conv_oracle(impulse, subm(3), ones), subm(3), ones)[0, 0]

    def support(a):
        ys, xs = np.nonzero(a)
        return (int(np.ptp(ys)) + 1, int(np.ptp(xs)) + 1)
    assert support(sep) == (9, 9) and support(two) == (5, 5)
    return f"params {sep_params} == 2*9*C^2, support 9x9 vs 5x5"


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy") / "run"
    start = time.perf_counter()
    code = main(["--config", TOY, "--seed", "0", "train-toy", "--steps", "500", "--out", str(out)])
    return code, out, time.perf_counter() - start


@_criterion(8)
def test_c08_toy_overfit(toy_run):
    code, out, elapsed = toy_run
    assert code == 0
    loss = [float(r["loss"]) for r in csv.DictReader(open(out / "curve.csv"))]
    assert len(loss) == 500
    ratio = np.mean(loss[-10:]) / np.mean(loss[:10])
    ev = json.loads((out / "eval.json").read_text())
    assert ratio <= 0.10, f"loss ratio {ratio:.3f}"
    assert ev["precision"] == 1.0 and ev["recall"] == 1.0, f"P={ev['precision']} R={ev['recall']}"
    assert elapsed < 600, f"took {elapsed:.0f}s"
    return f"loss ratio {ratio:.4f}, P=R=1.0 on {ev['n_gt']} boxes, train {elapsed:.0f}s"


@_criterion(9)
def test_c09_determinism(toy_run, tmp_path):
    _, first, _ = toy_run
    second = tmp_path / "run2"
    assert main(["--config", TOY, "--seed", "0", "train-toy", "--steps", "500", "--out", str(second)]) == 0
    for name in ("curve.csv", "weights.ckpt", "eval.json"):
        assert (first / name).read_bytes() == (second / name).read_bytes(), f"{name} differs"
    for d in ("s1", "s2"):
        assert main(["--config", TOY, "--seed", "0", "synth", "--scenes", "3", "--out", str(tmp_path / d)]) == 0
    names = sorted(p.name for p in (tmp_path / "s1").iterdir())
    assert len(names) == 6
    for name in names:
        assert (tmp_path / "s1" / name).read_bytes() == (tmp_path / "s2" / name).read_bytes()
    return "synth and train-toy reruns are byte-identical"


def _incidences(t):
    active = t.coord_set()
    return sum((b, y + dy, x + dx) in active for b, y, x in active for dy in (-1, 0, 1) for dx in (-1, 0, 1))


@_criterion(10)
def test_c10_bench_sanity(tmp_path):
    rng = np.random.default_rng(10)
    spec = KernelSpec.make(3, rank=2)
    for density in (0.02, 0.1, 0.3, 0.7):
        for batch in (1, 2):
            t = random_sparse(rng, (16, 16), density, 1, batch_size=batch)
            assert build_rulebook(t, spec, use_cache=False).n_pairs == _incidences(t)
    out = tmp_path / "bench.csv"
    start = time.perf_counter()
    assert main(["bench", "--density", "0.005,0.02,0.1", "--out", str(out)]) == 0
    elapsed = time.perf_counter() - start
    rows = list(csv.DictReader(open(out)))
    assert {r["density"] for r in rows} == {"0.005", "0.02", "0.1"} and len(rows) == 12
    assert elapsed < 60, f"bench took {elapsed:.1f}s"
    return f"pair counts match brute force; 1504^2 bench in {elapsed:.1f}s"


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
