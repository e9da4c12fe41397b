"""Synthetic scenes, target assignment, losses, Adam and the toy training loop."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .encoding import PointCloud, augment_point_features, voxelize_many
from .errors import NoActiveSites, ShapeMismatch
from .geometry import bev_iou
from .network import (Detection, NetworkConfig, NetworkParams, decode_detections, encode_box,
                      init_network, network_forward, set_norm_mode, trainable)
from .sparse import CoordIndex, GridConfig, SparseTensor, pack_keys
from .tape import Tape


@dataclass
class GTBox:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    class_id: int
    batch: int = 0

    def __post_init__(self):
        self.center = tuple(float(v) for v in self.center)
        self.size = tuple(float(v) for v in self.size)
        if min(self.size) <= 0:
            raise ValueError("box sizes must be positive")
        yaw = math.remainder(float(self.yaw), 2 * math.pi)
        self.yaw = math.pi if yaw <= -math.pi else yaw

    def to_dict(self) -> dict:
        return {"center": list(self.center), "size": list(self.size), "yaw": self.yaw,
                "class_id": self.class_id}


def boxes_to_json(boxes: list[GTBox]) -> str:
    return json.dumps({"boxes": [b.to_dict() for b in boxes]}, indent=2, sort_keys=True)


def boxes_from_json(text: str, batch: int = 0) -> list[GTBox]:
    data = json.loads(text)
    return [GTBox(tuple(b["center"]), tuple(b["size"]), b["yaw"], int(b["class_id"]), batch)
            for b in data["boxes"]]


@dataclass
class SceneSpec:
    box_count: tuple[int, int] = (2, 3)
    class_sizes: tuple[tuple[float, float, float], ...] = ((4.5, 1.9, 1.6), (0.8, 0.8, 1.75),
                                                           (1.8, 0.8, 1.7))
    size_jitter: float = 0.1
    points_per_box: tuple[int, int] = (150, 300)
    ground_noise: int = 50
    x_range: tuple[float, float] = (-20.0, 20.0)
    y_range: tuple[float, float] = (-20.0, 20.0)
    z_ground: float = -2.0
    margin: float = 3.0
    min_gap: float = 4.0

    def __post_init__(self):
        if min(self.box_count) < 0 or self.box_count[0] > self.box_count[1]:
            raise ValueError("box_count must be a non-negative (min, max) pair")
        if min(self.points_per_box) < 0 or self.ground_noise < 0:
            raise ValueError("point counts must be non-negative")
        if not self.class_sizes:
            raise ValueError("at least one class is required")


def _surface_points(rng, center, size, yaw, n) -> np.ndarray:
    dx, dy, dz = size
    areas = np.array([dy * dz, dy * dz, dx * dz, dx * dz, dx * dy, dx * dy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.array(size)
    axis, sign = face // 2, np.where(face % 2 == 0, 0.5, -0.5)
    u[np.arange(n), axis] = sign * np.array(size)[axis]
    c, s = math.cos(yaw), math.sin(yaw)
    world = np.stack([c * u[:, 0] - s * u[:, 1], s * u[:, 0] + c * u[:, 1], u[:, 2]], axis=1)
    return world + np.asarray(center)


def synth_scene(spec: SceneSpec, seed: int) -> tuple[PointCloud, list[GTBox]]:
    """Boxes resting on the ground with surface-sampled points plus ground clutter."""
    rng = np.random.default_rng(seed)
    n_boxes = int(rng.integers(spec.box_count[0], spec.box_count[1] + 1))
    boxes: list[GTBox] = []
    tries = 0
    while len(boxes) < n_boxes:
        tries += 1
        if tries > 1000:
            raise RuntimeError("could not place boxes; enlarge the range or reduce min_gap")
        cls = int(rng.integers(len(spec.class_sizes)))
        size = np.array(spec.class_sizes[cls]) * (1 + rng.uniform(-spec.size_jitter, spec.size_jitter, 3))
        xy = rng.uniform([spec.x_range[0] + spec.margin, spec.y_range[0] + spec.margin],
                         [spec.x_range[1] - spec.margin, spec.y_range[1] - spec.margin])
        yaw = float(rng.uniform(-math.pi, math.pi))
        radius = math.hypot(size[0], size[1]) / 2
        if any(math.hypot(xy[0] - b.center[0], xy[1] - b.center[1])
               < radius + math.hypot(b.size[0], b.size[1]) / 2 + spec.min_gap for b in boxes):
            continue
        boxes.append(GTBox((xy[0], xy[1], spec.z_ground + size[2] / 2), tuple(size), yaw, cls))
    parts = []
    for b in boxes:
        n = int(rng.integers(spec.points_per_box[0], spec.points_per_box[1] + 1))
        xyz = _surface_points(rng, b.center, b.size, b.yaw, n)
        parts.append(np.concatenate([xyz, rng.uniform(0, 1, (n, 1))], axis=1))
    if spec.ground_noise:
        n = spec.ground_noise
        xy = rng.uniform([spec.x_range[0], spec.y_range[0]], [spec.x_range[1], spec.y_range[1]], (n, 2))
        z = spec.z_ground + rng.uniform(0.0, 0.05, (n, 1))
        parts.append(np.concatenate([xy, z, rng.uniform(0, 1, (n, 1))], axis=1))
    pts = np.concatenate(parts) if parts else np.zeros((0, 4))
    # float32 round trip so that written scenes reload to identical values
    return PointCloud(pts.astype(np.float32).astype(np.float64)), boxes


# ---------------------------------------------------------------- targets ---

@dataclass
class TargetSet:
    cls_target: np.ndarray          # (n, num_classes) one-hot, zeros for background
    box_target: np.ndarray          # (n, 8), meaningful on positive rows only
    positive: np.ndarray            # (n,) bool
    assigned_box: np.ndarray        # (n,) index into the GT list, -1 for background
    conflicts: int = 0

    @property
    def n_positive(self) -> int:
        return int(self.positive.sum())


def assign_targets(gt: list[GTBox], t: SparseTensor, g: GridConfig, stride: int = 8,
                   num_classes: int = 3) -> TargetSet:
    """Make each in-range box positive at the active site nearest its BEV center."""
    if t.n == 0:
        raise NoActiveSites("cannot assign targets on an empty tensor")
    cls_t = np.zeros((t.n, num_classes))
    box_t = np.zeros((t.n, 8))
    pos = np.zeros(t.n, dtype=bool)
    owner = np.full(t.n, -1, dtype=np.int64)
    conflicts = 0
    site_x = g.x_range[0] + (t.coords[:, 2] + 0.5) * stride * g.voxel_size[0]
    site_y = g.y_range[0] + (t.coords[:, 1] + 0.5) * stride * g.voxel_size[1]
    for j, box in enumerate(gt):
        if not (g.x_range[0] <= box.center[0] < g.x_range[1]
                and g.y_range[0] <= box.center[1] < g.y_range[1]):
            continue
        mask = t.coords[:, 0] == box.batch
        if not mask.any():
            continue
        rows = np.nonzero(mask)[0]
        dist = np.hypot(site_x[rows] - box.center[0], site_y[rows] - box.center[1])
        # rows are sorted by (b, y, x), so argmin picks the smallest (y, x) on ties
        i = rows[int(np.argmin(dist))]
        if pos[i]:
            conflicts += 1
            cls_t[i] = 0
        pos[i] = True
        owner[i] = j
        cls_t[i, box.class_id] = 1.0
        box_t[i] = encode_box(box.center, box.size, box.yaw, t.coords[i, 1:], g, stride)
    return TargetSet(cls_t, box_t, pos, owner, conflicts)


# ------------------------------------------------------------------- loss ---

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
REG_WEIGHT = 2.0


def _softplus(x):
    return np.logaddexp(0.0, x)


def focal_terms(logits: np.ndarray, target: np.ndarray, alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA):
    """Elementwise sigmoid focal loss and its derivative w.r.t. the logits."""
    p = np.exp(-_softplus(-logits))
    log_p = -_softplus(-logits)
    log_q = -_softplus(logits)
    q = 1.0 - p
    pos_loss = -alpha * q ** gamma * log_p
    neg_loss = -(1 - alpha) * p ** gamma * log_q
    pos_grad = alpha * q ** gamma * (gamma * p * log_p - q)
    neg_grad = (1 - alpha) * p ** gamma * (p - gamma * q * log_q)
    loss = np.where(target > 0.5, pos_loss, neg_loss)
    grad = np.where(target > 0.5, pos_grad, neg_grad)
    return loss, grad


def detection_loss(cls_logits: np.ndarray, box: np.ndarray, targets: TargetSet,
                   tape: Tape | None = None) -> tuple[np.ndarray, dict[str, float]]:
    """Focal classification (normalized by positives) + 2 x mean L1 box error on positives."""
    if cls_logits.shape != targets.cls_target.shape or box.shape != targets.box_target.shape:
        raise ShapeMismatch(f"predictions {cls_logits.shape}/{box.shape} vs targets "
                            f"{targets.cls_target.shape}/{targets.box_target.shape}")
    norm = max(1, targets.n_positive)
    focal, focal_grad = focal_terms(cls_logits, targets.cls_target)
    cls_loss = focal.sum() / norm
    pos = targets.positive
    n_reg = int(pos.sum()) * box.shape[1]
    diff = box[pos] - targets.box_target[pos]
    reg_loss = REG_WEIGHT * np.abs(diff).sum() / n_reg if n_reg else 0.0
    total = np.array(cls_loss + reg_loss, dtype=cls_logits.dtype)
    if tape is not None:
        tape.note_branch(np.packbits(diff > 0))

        def back(e, g):
            g_cls = g * focal_grad / norm
            g_box = np.zeros_like(box)
            if n_reg:
                g_box[pos] = g * REG_WEIGHT * np.sign(diff) / n_reg
            return g_cls, g_box
        tape.record("detection_loss", (cls_logits, box), total, back)
    return total, {"cls_loss": float(cls_loss), "reg_loss": float(reg_loss)}


# -------------------------------------------------------------- optimizer ---

@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def optimizer_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
                   lr: float) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params``."""
    if len(params) != len(grads):
        raise ShapeMismatch(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeMismatch(f"param {p.shape} vs grad {g.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# --------------------------------------------------------------- training ---

@dataclass
class StepRecord:
    step: int
    loss: float
    cls_loss: float
    reg_loss: float


@dataclass
class ToyRun:
    curve: list[StepRecord]
    params: NetworkParams
    precision: float | None = None
    recall: float | None = None
    detections: list[Detection] = field(default_factory=list)


def prepare_voxels(clouds: list[PointCloud], g: GridConfig, seed: int = 0):
    return augment_point_features(voxelize_many(clouds, g, 3, seed), g)


def overfit_toy(net_cfg: NetworkConfig, g: GridConfig, scenes: list[tuple[PointCloud, list[GTBox]]],
                steps: int, lr: float = 1e-3, seed: int = 0, params: NetworkParams | None = None,
                dtype=np.float64, log_every: int = 0) -> ToyRun:
    """Train the whole network on a fixed batch of scenes and record the loss per step."""
    if not scenes:
        raise ValueError("need at least one scene")
    if params is None:
        params = init_network(net_cfg, g.D, np.random.default_rng(seed), dtype)
    voxels = prepare_voxels([pc for pc, _ in scenes], g, seed)
    voxels = voxels.with_features(voxels.features.astype(dtype))
    gt = [GTBox(b.center, b.size, b.yaw, b.class_id, i) for i, (_, bs) in enumerate(scenes) for b in bs]
    vindex = CoordIndex(pack_keys(voxels.coords))
    stride = net_cfg.cumulative_strides[3]
    names, arrays = zip(*trainable(params))
    state = AdamState()
    curve = []
    targets = None
    set_norm_mode(params, "train")
    for step in range(steps):
        tape = Tape()
        res = network_forward(params, voxels, tape, vindex)
        if targets is None:
            targets = assign_targets(gt, res.neck, g, stride, net_cfg.num_classes)
        loss, parts = detection_loss(res.cls_logits, res.box, targets, tape)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step + 1}")
        tape.backward(loss)
        optimizer_step(list(arrays), [tape.grad(a) for a in arrays], state, lr)
        curve.append(StepRecord(step + 1, float(loss), parts["cls_loss"], parts["reg_loss"]))
        if log_every and (step + 1) % log_every == 0:
            print(f"step {step + 1:4d} loss {float(loss):.5f} cls {parts['cls_loss']:.5f} "
                  f"reg {parts['reg_loss']:.5f}", flush=True)
    return ToyRun(curve, params)


def detect(params: NetworkParams, net_cfg: NetworkConfig, g: GridConfig, clouds: list[PointCloud],
           score_thresh: float = 0.3, seed: int = 0):
    """Eval-mode forward pass plus decoding; returns ``(detections, ForwardResult)``."""
    set_norm_mode(params, "eval")
    voxels = prepare_voxels(clouds, g, seed)
    dtype = params.encoder.mlp.weight.dtype
    res = network_forward(params, voxels.with_features(voxels.features.astype(dtype)))
    stride = net_cfg.cumulative_strides[3]
    dets = decode_detections(res.cls_logits, res.box, res.neck, g, stride, score_thresh)
    return dets, res


# ------------------------------------------------------------- evaluation ---

def eval_toy(detections: list[Detection], gt: list[GTBox], iou_thresh: float = 0.7) -> tuple[float, float]:
    """Greedy score-ordered matching on oriented BEV IoU within (batch, class).

    With no detections precision is reported as 1.0; with no ground truth
    recall is 1.0.
    """
    if not 0 < iou_thresh < 1:
        raise ValueError("iou_thresh must lie in (0, 1)")
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    matched = [False] * len(gt)
    tp = 0
    for i in order:
        d = detections[i]
        best, best_iou = -1, iou_thresh
        for j, b in enumerate(gt):
            if matched[j] or b.batch != d.batch or b.class_id != d.class_id:
                continue
            iou = bev_iou(d.center, d.size, d.yaw, b.center, b.size, b.yaw)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = j, iou
        if best >= 0:
            matched[best] = True
            tp += 1
    precision = tp / len(detections) if detections else 1.0
    recall = tp / len(gt) if gt else 1.0
    return precision, recall
