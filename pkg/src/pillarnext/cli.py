"""``pillarnext`` command line: synth | forward | gradcheck | bench | train-toy.

Exit codes: 0 success, 1 validation failure (bad config, malformed input,
checkpoint mismatch, I/O error), 2 check failure (gradient suite).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import sys
from pathlib import Path

from . import bench as B
from . import gradcheck as G
from .checkpoint import checkpoint_bytes, load_checkpoint
from .config import RunConfig, config_from_dict, load_config, stream, stream_seed
from .encoding import PointCloud, dump_points, load_points
from .errors import InvalidConfig, PillarNeXtError
from .network import describe_pipeline, init_network
from .training import (GTBox, boxes_to_json, detect, eval_toy, overfit_toy, synth_scene)

EXIT_OK, EXIT_INVALID, EXIT_CHECK = 0, 1, 2


def _write(path: Path, data: bytes | str) -> None:
    """Write through a temporary sibling so readers never see a half-written file."""
    if isinstance(data, str):
        data = data.encode()
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _out_dir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "precision", None) is not None:
        overrides["precision"] = args.precision
    if overrides:
        data = cfg.to_dict()
        data["run"].update(overrides)
        cfg = config_from_dict(data)
    return cfg


def scene_seed(run_seed: int, i: int) -> int:
    return stream_seed(run_seed, f"scene/{i}")


def make_scenes(cfg: RunConfig, k: int) -> list[tuple[PointCloud, list[GTBox]]]:
    return [synth_scene(cfg.scene, scene_seed(cfg.run.seed, i)) for i in range(k)]


# --------------------------------------------------------------- commands ---

def cmd_synth(cfg: RunConfig, scenes: int, out: str) -> int:
    if scenes < 0:
        raise InvalidConfig("must be >= 0", "--scenes")
    files = {}
    for i, (pc, boxes) in enumerate(make_scenes(cfg, scenes)):
        files[f"scene_{i}.bin"] = dump_points(pc)
        files[f"scene_{i}.json"] = boxes_to_json(boxes) + "\n"
    d = _out_dir(out)
    for name, data in files.items():
        _write(d / name, data)
    return EXIT_OK


def cmd_forward(cfg: RunConfig, weights: str | None, input_path: str, out: str) -> int:
    pc = load_points(Path(input_path).read_bytes())
    run = cfg.run
    params = init_network(cfg.network, cfg.grid.D, stream(run.seed, "init"), run.dtype)
    if weights:
        load_checkpoint(params, weights)
    dets, res = detect(params, cfg.network, cfg.grid, [pc], run.score_thresh,
                       stream_seed(run.seed, "voxelize"))
    desc = describe_pipeline(cfg.grid, cfg.network)
    stats = {"grid": desc["grid"], "stage_strides": desc["stage_strides"],
             "fused_stride": desc["fused_stride"], "active_counts": res.active_counts()}
    doc = {"detections": [d.to_dict() for d in dets], "stats": stats}
    _write(Path(out), json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_gradcheck(seed: int, tol: float, report: str) -> int:
    if not tol > 0:
        raise InvalidConfig("must be positive", "--tol")
    reports = G.run_suite(seed, tol)
    G.write_report(reports, report)
    failed = [r.name for r in reports if not r.passed]
    for r in reports:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:28s} max_rel_err={r.max_error:.3e}")
    if failed:
        print(f"{len(failed)} of {len(reports)} checks failed", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_bench(cfg: RunConfig, densities: list[float], out: str) -> int:
    for d in densities:
        if not 0 < d <= 1:
            raise InvalidConfig(f"density {d} outside (0, 1]", "--density")
    rows = B.run_bench(cfg.grid.shape(2), densities, cfg.run.bench_channels,
                       stream(cfg.run.seed, "bench"), cfg.run.dtype)
    B.write_bench(rows, out)
    return EXIT_OK


def train_toy_outputs(cfg: RunConfig, steps: int) -> dict[str, bytes]:
    """Run the toy experiment and return the three output files as bytes."""
    run = cfg.run
    scenes = make_scenes(cfg, run.scenes)
    vseed = stream_seed(run.seed, "voxelize")
    params = init_network(cfg.network, cfg.grid.D, stream(run.seed, "init"), run.dtype)
    result = overfit_toy(cfg.network, cfg.grid, scenes, steps, run.lr, vseed, params, run.dtype)
    dets, _ = detect(result.params, cfg.network, cfg.grid, [pc for pc, _ in scenes],
                     run.score_thresh, vseed)
    gt = [GTBox(b.center, b.size, b.yaw, b.class_id, i) for i, (_, bs) in enumerate(scenes) for b in bs]
    precision, recall = eval_toy(dets, gt, run.iou_thresh)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "cls_loss", "reg_loss"])
    for r in result.curve:
        w.writerow([r.step, repr(r.loss), repr(r.cls_loss), repr(r.reg_loss)])
    report = {"precision": precision, "recall": recall, "iou_thresh": run.iou_thresh,
              "score_thresh": run.score_thresh, "n_detections": len(dets), "n_gt": len(gt),
              "steps": steps}
    meta = {"grid": dataclasses.asdict(cfg.grid), "network": dataclasses.asdict(cfg.network)}
    return {"curve.csv": buf.getvalue().encode(),
            "weights.ckpt": checkpoint_bytes(result.params, meta),
            "eval.json": (json.dumps(report, indent=2, sort_keys=True) + "\n").encode()}


def cmd_train_toy(cfg: RunConfig, steps: int | None, out: str) -> int:
    steps = cfg.run.steps if steps is None else steps
    if steps < 0:
        raise InvalidConfig("must be >= 0", "--steps")
    files = train_toy_outputs(cfg, steps)
    d = _out_dir(out)
    for name, data in files.items():
        _write(d / name, data)
    rep = json.loads(files["eval.json"])
    print(f"precision {rep['precision']:.3f} recall {rep['recall']:.3f} "
          f"({rep['n_detections']} detections, {rep['n_gt']} boxes)")
    return EXIT_OK


# ----------------------------------------------------------------- parser ---

def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _densities(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad density list {text!r}") from None


class _Parser(argparse.ArgumentParser):
    """Usage errors are validation failures (exit 1), not check failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON run configuration")
    common.add_argument("--seed", type=_u64, default=argparse.SUPPRESS, help="run seed (u64)")
    common.add_argument("--precision", type=int, choices=(32, 64), default=argparse.SUPPRESS)

    ap = _Parser(prog="pillarnext", parents=[common], description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write synthetic scenes and labels")
    p.add_argument("--scenes", type=int, default=1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("forward", parents=[common], help="run the network on one point file")
    p.add_argument("--weights", help="checkpoint; omitted means seed-initialized weights")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--report", default="gradcheck.csv")

    p = sub.add_parser("bench", parents=[common], help="rulebook and convolution timings")
    p.add_argument("--density", type=_densities, default=[0.005, 0.02, 0.1],
                   help="comma separated densities")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-toy", parents=[common], help="overfit the network on synthetic scenes")
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "synth":
            return cmd_synth(cfg, args.scenes, args.out)
        if args.command == "forward":
            return cmd_forward(cfg, args.weights, args.input, args.out)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg.run.seed, args.tol, args.report)
        if args.command == "bench":
            return cmd_bench(cfg, args.density, args.out)
        return cmd_train_toy(cfg, args.steps, args.out)
    except (PillarNeXtError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
