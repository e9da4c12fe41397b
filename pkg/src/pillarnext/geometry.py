"""Oriented BEV box geometry: corners, convex clipping, IoU."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

Point = tuple[float, float]


def bev_corners(center: Sequence[float], size: Sequence[float], yaw: float) -> list[Point]:
    """Counter-clockwise footprint corners of a box rotated by ``yaw`` about z."""
    c, s = math.cos(yaw), math.sin(yaw)
    hx, hy = size[0] / 2, size[1] / 2
    out = []
    for lx, ly in ((hx, hy), (-hx, hy), (-hx, -hy), (hx, -hy)):
        out.append((center[0] + c * lx - s * ly, center[1] + s * lx + c * ly))
    return out


def polygon_area(poly: Sequence[Point]) -> float:
    """Shoelace area (positive for counter-clockwise order)."""
    if len(poly) < 3:
        return 0.0
    acc = 0.0
    for (x1, y1), (x2, y2) in zip(poly, list(poly[1:]) + [poly[0]]):
        acc += x1 * y2 - x2 * y1
    return 0.5 * acc


def _ccw(poly: Sequence[Point]) -> list[Point]:
    return list(poly) if polygon_area(poly) >= 0 else list(reversed(poly))


def clip_polygon(subject: Sequence[Point], clip: Sequence[Point]) -> list[Point]:
    """Sutherland-Hodgman clipping of ``subject`` by the convex ``clip`` polygon."""
    out = _ccw(subject)
    clip = _ccw(clip)
    for (ax, ay), (bx, by) in zip(clip, clip[1:] + clip[:1]):
        if not out:
            break
        src, out = out, []

        def side(p):
            return (bx - ax) * (p[1] - ay) - (by - ay) * (p[0] - ax)

        for p, q in zip(src, src[1:] + src[:1]):
            sp, sq = side(p), side(q)
            if sp >= 0:
                out.append(p)
            if (sp >= 0) != (sq >= 0):
                t = sp / (sp - sq)
                out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return out


def bev_iou(a_center, a_size, a_yaw, b_center, b_size, b_yaw) -> float:
    pa = bev_corners(a_center, a_size, a_yaw)
    pb = bev_corners(b_center, b_size, b_yaw)
    inter = abs(polygon_area(clip_polygon(pa, pb)))
    union = a_size[0] * a_size[1] + b_size[0] * b_size[1] - inter
    return float(inter / union) if union > 0 else 0.0


def points_in_box(points: np.ndarray, center, size, yaw, margin: float = 0.0) -> np.ndarray:
    """Boolean mask of points inside an oriented 3-D box (inflated by ``margin``)."""
    d = np.asarray(points)[:, :3] - np.asarray(center)
    c, s = math.cos(yaw), math.sin(yaw)
    local = np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]], axis=1)
    return np.all(np.abs(local) <= np.asarray(size) / 2 + margin, axis=1)
