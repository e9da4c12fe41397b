"""Rulebook and convolution timings over random sparse tensors."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from .conv import KernelSpec, build_rulebook, conv_forward, init_params
from .sparse import random_sparse

BENCH_KERNELS = {
    "submanifold3x3": KernelSpec.make(3, rank=2),
    "dilated3x3m2": KernelSpec.make(3, dilation=2, rank=2),
    "spatial3x3s2": KernelSpec.make(3, stride=2, padding=1, mode="spatial", rank=2),
    "sep1x9": KernelSpec.make((1, 9), rank=2),
}

COLUMNS = ["density", "kernel", "n_active", "rulebook_pairs", "rulebook_build_ms", "conv_forward_ms"]


@dataclass
class BenchRow:
    density: float
    kernel: str
    n_active: int
    rulebook_pairs: int
    rulebook_build_ms: float
    conv_forward_ms: float

    def as_list(self) -> list:
        return [f"{self.density:g}", self.kernel, self.n_active, self.rulebook_pairs,
                f"{self.rulebook_build_ms:.3f}", f"{self.conv_forward_ms:.3f}"]


def run_bench(shape, densities, channels: int = 16, rng: np.random.Generator | None = None,
              dtype=np.float64) -> list[BenchRow]:
    rng = rng if rng is not None else np.random.default_rng(0)
    for d in densities:
        if not 0 < d <= 1:
            raise ValueError(f"density must lie in (0, 1], got {d}")
    rows = []
    for d in densities:
        t = random_sparse(rng, shape, d, channels, dtype=dtype)
        for name, spec in BENCH_KERNELS.items():
            p = init_params(spec, channels, channels, rng, dtype=dtype)
            t0 = time.perf_counter()
            rb = build_rulebook(t, spec, use_cache=False)
            t1 = time.perf_counter()
            conv_forward(t, rb, p, spec=spec)
            t2 = time.perf_counter()
            rows.append(BenchRow(d, name, t.n, rb.n_pairs, 1e3 * (t1 - t0), 1e3 * (t2 - t1)))
    return rows


def write_bench(rows: list[BenchRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow(r.as_list())
