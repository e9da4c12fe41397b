#!/usr/bin/env python3
"""Overfit the detector on the toy scenes and print the loss ratio and P/R."""

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from pillarnext.cli import main

ROOT = Path(__file__).resolve().parents[1]


def run(args) -> int:
    start = time.perf_counter()
    code = main(["--config", args.config, "--seed", str(args.seed), "train-toy",
                 "--steps", str(args.steps), "--out", args.out])
    if code:
        return code
    out = Path(args.out)
    loss = [float(r["loss"]) for r in csv.DictReader(open(out / "curve.csv"))]
    ev = json.loads((out / "eval.json").read_text())
    if len(loss) >= 20:
        print(f"loss ratio (last 10 / first 10): {np.mean(loss[-10:]) / np.mean(loss[:10]):.4f}")
    print(f"precision {ev['precision']:.3f}  recall {ev['recall']:.3f}  "
          f"wall {time.perf_counter() - start:.1f}s")
    return 0


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs" / "toy.json"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--out", default="runs/toy")
    sys.exit(run(ap.parse_args()))
