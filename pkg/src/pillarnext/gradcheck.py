"""Central finite-difference checks of every tape backward rule.

A check case builds a fresh random instance and returns the arrays to
perturb plus a forward function. The scalar probed is ``sum(out * proj)``
for a random projection ``proj``. Perturbations that change any non-smooth
decision (tape branch digest) are rejected and another entry is sampled.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import conv as C
from . import encoding as E
from . import functional as F
from . import network as N
from .errors import NonDifferentiablePoint
from .sparse import GridConfig, random_sparse
from .tape import Tape
from .training import GTBox, assign_targets, detection_loss, prepare_voxels

Forward = Callable[[Tape], np.ndarray]
Builder = Callable[[np.random.Generator], tuple[dict[str, np.ndarray], Forward]]


@dataclass
class GradCase:
    name: str
    build: Builder
    max_entries: int | None = 24


@dataclass
class GradReport:
    name: str
    errors: dict[str, float]
    tol: float
    attempts: int
    seconds: float = 0.0
    checked: int = 0

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol


def rel_error(a: np.ndarray, n: np.ndarray) -> float:
    """``|a - n| / max(1e-8, |a|, |n|)`` with Euclidean norms over a group."""
    a, n = np.ravel(a), np.ravel(n)
    return float(np.linalg.norm(a - n) / max(1e-8, np.linalg.norm(a), np.linalg.norm(n)))


class _Resample(Exception):
    pass


def _attempt(case: GradCase, rng, step: float, resamples: int):
    arrays, forward = case.build(rng)
    tape = Tape()
    out = forward(tape)
    proj = rng.standard_normal(np.shape(out))
    tape.backward(out, proj)
    digest = tape.branch_digest
    analytic = {k: tape.grad(a).copy() for k, a in arrays.items()}

    def probe() -> tuple[float, bytes]:
        t = Tape()
        o = forward(t)
        return float(np.sum(o * proj)), t.branch_digest

    errors, checked = {}, 0
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise TypeError(f"array {name!r} must be contiguous for in-place perturbation")
        order = rng.permutation(arr.size)
        want = arr.size if case.max_entries is None else min(case.max_entries, arr.size)
        idx, num, rejected = [], [], 0
        for j in order:
            if len(idx) == want:
                break
            orig = flat[j]
            flat[j] = orig + step
            fp, dp = probe()
            flat[j] = orig - step
            fm, dm = probe()
            flat[j] = orig
            if dp != digest or dm != digest:
                rejected += 1
                if rejected > resamples:
                    raise _Resample(name)
                continue
            idx.append(j)
            num.append((fp - fm) / (2 * step))
        if arr.size and not idx:
            raise _Resample(name)   # every entry sat on a kink
        checked += len(idx)
        errors[name] = rel_error(analytic[name].reshape(-1)[idx], np.array(num))
    return errors, checked


def grad_check(case: GradCase, seed: int = 0, tol: float = 1e-5, step: float = 1e-5,
               resamples: int = 5) -> GradReport:
    """Compare tape gradients to central differences for every array of ``case``."""
    start = time.perf_counter()
    for attempt in range(resamples + 1):
        rng = np.random.default_rng([seed, attempt])
        try:
            errors, checked = _attempt(case, rng, step, resamples)
        except _Resample:
            continue
        return GradReport(case.name, errors, tol, attempt + 1, time.perf_counter() - start, checked)
    raise NonDifferentiablePoint(f"{case.name}: kinks hit after {resamples} resamples")


# ------------------------------------------------------------------ cases ---

def _rt(rng, shape=(7, 7), density=0.35, channels=3, batch=1):
    return random_sparse(rng, shape, density, channels, batch, min_active=3)


def _norm(rng, c, mode="train") -> F.NormParams:
    return F.NormParams(rng.uniform(0.5, 1.5, c), rng.normal(0, 0.2, c),
                        rng.normal(0, 0.3, c), rng.uniform(0.5, 2.0, c),
                        mode=mode, update_stats=False)


def _randomize(params, rng, mode="train"):
    """Replace every norm by a random one and nudge zero-initialized arrays."""
    for name, arr, trainable in N.iter_arrays(params):
        if not trainable:
            continue
        if name.endswith("gamma"):
            arr[...] = rng.uniform(0.5, 1.5, arr.shape)
        elif np.all(arr == 0):
            arr[...] = rng.normal(0, 0.1, arr.shape)
    for p in N.norms(params):
        p.running_mean[...] = rng.normal(0, 0.3, p.running_mean.shape)
        p.running_var[...] = rng.uniform(0.5, 2.0, p.running_var.shape)
    N.set_norm_mode(params, mode, update_stats=False)
    return params


def _named(params, prefix="") -> dict[str, np.ndarray]:
    return {f"{prefix}{n}": a for n, a in N.trainable(params)}


def _conv_case(name, spec_fn, depthwise=False, rank=2, bias=True):
    def build(rng):
        if rank == 2:
            t = _rt(rng)
        else:
            t = random_sparse(rng, (3, 3, 4), 0.4, 3, 1, min_active=3)
        spec = spec_fn()
        c_out = 3 if depthwise else 2
        p = C.init_params(spec, 3, c_out, rng, bias=bias, depthwise=depthwise)
        if bias:
            p.bias[...] = rng.normal(size=p.bias.shape)
        arrays = {"input": t.features, "weight": p.weight}
        if bias:
            arrays["bias"] = p.bias

        def fwd(tape):
            return C.sparse_conv(t, spec, p, tape).features
        return arrays, fwd
    return GradCase(name, build)


def _feature_case(name, fn, channels=4, mode=None):
    def build(rng):
        x = rng.standard_normal((9, channels))
        extra = {}
        if mode is not None:
            p = _norm(rng, channels, mode)
            extra = {"gamma": p.gamma, "beta": p.beta}
            return {"input": x, **extra}, lambda tape: F.batchnorm(x, p, tape)
        if name == "layer_norm":
            g, b = rng.uniform(0.5, 1.5, channels), rng.normal(0, 0.2, channels)
            return {"input": x, "gamma": g, "beta": b}, lambda tape: F.layer_norm(x, g, b, tape=tape)
        return {"input": x}, lambda tape: fn(x, tape)
    return GradCase(name, build, None)


def _linear_case():
    def build(rng):
        x, w, b = rng.standard_normal((5, 3)), rng.standard_normal((3, 4)), rng.standard_normal(4)
        return {"input": x, "weight": w, "bias": b}, lambda tape: F.linear(x, w, b, tape)
    return GradCase("linear", build, None)


def _pool_case(kind):
    def build(rng):
        starts = np.array([0, 3, 4, 9])
        x = rng.standard_normal((9, 3))
        if kind == "mmm":
            return {"input": x}, lambda tape: E.segment_pool_mmm(x, starts, tape)
        if kind == "mean":
            return {"input": x}, lambda tape: E.segment_mean(x, starts, tape)
        return {"input": x}, lambda tape: E.segment_extreme(x, starts, kind, tape)
    return GradCase(f"pool_{kind}", build, None)


def _toy_grid(depth=4) -> GridConfig:
    return GridConfig((-1.6, 1.6), (-1.6, 1.6), (-1.0, 1.0), (0.2, 0.2, 2.0 / depth), 4)


def _cloud(rng, g: GridConfig, n=80) -> E.PointCloud:
    lo, hi = g.range_min, g.range_max
    xyz = rng.uniform(lo, hi, (n, 3))
    return E.PointCloud(np.concatenate([xyz, rng.uniform(0, 1, (n, 1))], axis=1))


def _point_mlp_case():
    def build(rng):
        g = _toy_grid()
        vb = E.augment_point_features(E.voxelize(_cloud(rng, g, 40), g, 3), g)
        mlp = E.MlpParams(rng.normal(0, 0.5, (7, 4)), _norm(rng, 4))
        return {"input": vb.features, "weight": mlp.weight, "gamma": mlp.norm.gamma,
                "beta": mlp.norm.beta}, lambda tape: E.point_mlp(vb, mlp, tape)
    return GradCase("point_mlp", build, None)


def _encoder_case(kind):
    def build(rng):
        g = _toy_grid()
        if kind == "voxel2pillar":
            vb = E.augment_point_features(E.voxelize(_cloud(rng, g), g, 3), g)
            mlp = E.MlpParams(rng.normal(0, 0.5, (7, 4)), _norm(rng, 4))
            cons = E.init_constructor(g.D, 4, 3, rng)
            cons.norm = _norm(rng, 3)
            arrays = {"mlp.weight": mlp.weight, "mlp.gamma": mlp.norm.gamma, "mlp.beta": mlp.norm.beta,
                      "constructor.weight": cons.conv.weight, "constructor.gamma": cons.norm.gamma,
                      "constructor.beta": cons.norm.beta}
            return arrays, lambda tape: E.voxel2pillar_from_voxels(vb, mlp, cons, tape).features
        vb = E.augment_point_features(E.voxelize(_cloud(rng, g), g, 2), g)
        mlp = E.MlpParams(rng.normal(0, 0.5, (7, 4)), _norm(rng, 4))
        arrays = {"mlp.weight": mlp.weight, "mlp.gamma": mlp.norm.gamma, "mlp.beta": mlp.norm.beta}
        return arrays, lambda tape: E.baseline_pillar_encode(vb, g, mlp, tape).features
    return GradCase(f"{kind}_encoder", build)


def _block_case(name, make, apply, channels=3, shape=(9, 9), density=0.3):
    def build(rng):
        t = random_sparse(rng, shape, density, channels, 1, min_active=4)
        p = _randomize(make(rng, channels), rng)
        arrays = {"input": t.features, **_named(p)}
        return arrays, lambda tape: apply(t, p, tape)
    return GradCase(name, build, 8)


def _fuse_case():
    def build(rng):
        s4 = random_sparse(rng, (8, 8), 0.3, 3, 1, min_active=3)
        s5 = random_sparse(rng, (4, 4), 0.4, 2, 1, min_active=2)
        s6 = random_sparse(rng, (2, 2), 0.5, 2, 1, min_active=1)
        s4.stride, s5.stride, s6.stride = 8, 16, 32
        p = N.FuseParams([rng.normal(size=(3, 4)), rng.normal(size=(2, 4)), rng.normal(size=(2, 4))],
                         [rng.normal(size=4) for _ in range(3)])
        arrays = {"s4": s4.features, "s5": s5.features, "s6": s6.features, **_named(p)}
        return arrays, lambda tape: N.fuse_last_three(s4, s5, s6, p, tape).features
    return GradCase("fuse_last_three", build, None)


def _head_case():
    def build(rng):
        t = random_sparse(rng, (8, 8), 0.3, 4, 1, min_active=4)
        hp = N.HeadParams(N._init_branch(4, 5, 3, rng, np.float64), N._init_branch(4, 5, 8, rng, np.float64))
        p = _randomize(hp, rng)
        arrays = {"input": t.features, **_named(p)}

        def fwd(tape):
            cls, box = N.head(t, p, tape)
            return E.concat_channels([cls, box], tape)
        return arrays, fwd
    return GradCase("head", build, 8)


def _loss_case():
    def build(rng):
        t = random_sparse(rng, (6, 6), 0.5, 1, 1, min_active=6)
        g = GridConfig((0, 4.8), (0, 4.8), (-1, 1), (0.1, 0.1, 0.5))
        gt = [GTBox((1.0, 2.0, 0.0), (1.5, 0.8, 1.2), 0.4, 1), GTBox((3.5, 0.7, 0.1), (0.9, 0.6, 1.1), -2.0, 2)]
        targets = assign_targets(gt, t, g, 8, 3)
        cls = rng.standard_normal((t.n, 3))
        box = rng.standard_normal((t.n, 8))
        return {"cls_logits": cls, "box": box}, lambda tape: detection_loss(cls, box, targets, tape)[0]
    return GradCase("detection_loss", build, None)


def tiny_network_config() -> N.NetworkConfig:
    return N.NetworkConfig(stage_channels=(3, 3, 4, 4, 4, 4), fuse_channels=4, neck_repeats=1,
                           neck_kernel=5, convnext_expand=2, num_classes=2, head_channels=4,
                           mlp_channels=3)


def _full_network_case():
    def build(rng):
        g = GridConfig((-3.2, 3.2), (-3.2, 3.2), (-1.0, 1.0), (0.2, 0.2, 0.5), 4)
        cfg = tiny_network_config()
        params = _randomize(N.init_network(cfg, g.D, rng), rng, mode="eval")
        clouds = [_cloud(rng, g, 60), _cloud(rng, g, 60)]
        vox = prepare_voxels(clouds, g)
        gt = [GTBox((0.5, -1.0, 0.0), (1.2, 0.6, 0.8), 0.3, 0, 0),
              GTBox((-1.5, 1.5, 0.0), (0.8, 0.8, 0.9), -1.0, 1, 1)]
        stride = cfg.cumulative_strides[3]
        res = N.network_forward(params, vox)
        targets = assign_targets(gt, res.neck, g, stride, cfg.num_classes)

        def fwd(tape):
            r = N.network_forward(params, vox, tape)
            return detection_loss(r.cls_logits, r.box, targets, tape)[0]
        return _named(params), fwd
    return GradCase("full_network", build, 3)


def _subm(k, d=1):
    return lambda: C.KernelSpec.make(k, dilation=d, rank=2)


def _msfe(rng, c):
    return N.MSFEParams(N._conv_bn(N.DOWN_SPEC, c, c, rng, np.float64), N.init_dlsfe(c, rng),
                        [N.init_lsfe(c, 2, rng), N.init_lsfe(c, 3, rng)])


def registered_cases() -> list[GradCase]:
    return [
        _linear_case(),
        _conv_case("conv_submanifold_3x3", _subm(3)),
        _conv_case("conv_dilated_3x3_m2", _subm(3, 2)),
        _conv_case("conv_1x9", _subm((1, 9))),
        _conv_case("conv_9x1", _subm((9, 1))),
        _conv_case("conv_submanifold_5x5", _subm(5)),
        _conv_case("conv_spatial_3x3_s2", lambda: C.KernelSpec.make(3, stride=2, padding=1,
                                                                     mode="spatial", rank=2)),
        _conv_case("conv_constructor_1x1x4", lambda: E.constructor_spec(4), rank=3, bias=False),
        _conv_case("conv_depthwise_5x5", _subm(5), depthwise=True),
        _feature_case("batchnorm_train", None, mode="train"),
        _feature_case("batchnorm_eval", None, mode="eval"),
        _feature_case("layer_norm", None),
        _feature_case("relu", F.relu),
        _feature_case("gelu", F.gelu),
        _pool_case("max"), _pool_case("min"), _pool_case("mean"), _pool_case("mmm"),
        _point_mlp_case(),
        _encoder_case("baseline_pillar"),
        _encoder_case("voxel2pillar"),
        _block_case("lsfe_block", lambda rng, c: N.init_lsfe(c, 2, rng),
                    lambda t, p, tape: N.lsfe_block(t, p, tape=tape).features),
        _block_case("dlsfe_block", lambda rng, c: N.init_dlsfe(c, rng),
                    lambda t, p, tape: N.dlsfe_block(t, p, tape).features),
        _block_case("msfe_module", _msfe, lambda t, p, tape: N.msfe_module(t, p, tape).features,
                    shape=(12, 12)),
        _block_case("convnext_block", lambda rng, c: N.init_convnext(c, 5, 2, rng),
                    lambda t, p, tape: N.sparse_convnext_block(t, p, tape).features),
        _block_case("neck", lambda rng, c: N.NeckParams(N._conv_bn(N.STEM_SPEC, c, c, rng, np.float64),
                                                        [N.init_convnext(c, 5, 2, rng)]),
                    lambda t, p, tape: N.neck(t, p, tape).features),
        _fuse_case(),
        _head_case(),
        _loss_case(),
        _full_network_case(),
    ]


def run_suite(seed: int = 0, tol: float = 1e-5, names: list[str] | None = None) -> list[GradReport]:
    reports = []
    for case in registered_cases():
        if names is not None and case.name not in names:
            continue
        try:
            reports.append(grad_check(case, seed, tol))
        except NonDifferentiablePoint:
            reports.append(GradReport(case.name, {"*": float("inf")}, tol, 6))
    return reports


def write_report(reports: list[GradReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["check", "max_rel_error", "tol", "passed", "attempts", "entries", "worst_group"])
        for r in reports:
            worst = max(r.errors, key=r.errors.get) if r.errors else ""
            w.writerow([r.name, f"{r.max_error:.3e}", f"{r.tol:.1e}", int(r.passed), r.attempts,
                        r.checked, worst])
