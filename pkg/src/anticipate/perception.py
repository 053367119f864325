"""Geometric perception on ground-plane contours.

Corner extraction (Douglas-Peucker plus IoU-maximizing quad selection and
edge refinement), planar pose estimation with half-turn symmetry, and grasp
point computation for tables and chairs.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .geometry import (DegeneratePolygonError, Polygon2, Pose2, fold_pi, is_simple, polygon_iou,
                       signed_area, transform_points_from_frame)

TABLE_GRIPPER_SEPARATION = 0.4
CHAIR_GRIPPER_SEPARATION = 0.3
POSE_OUTLIER_RMS = 0.15


class InsufficientContourError(ValueError):
    def __init__(self, msg="insufficient contour"):
        super().__init__(msg)


class PoseOutlierError(ValueError):
    def __init__(self, rms: float):
        super().__init__(f"pose outlier (residual rms {rms:.3f} m)")
        self.rms = rms


@njit(cache=True)
def _dp_kernel(pts, epsilon):
    n = pts.shape[0]
    keep = np.zeros(n, np.bool_)
    keep[0] = True
    keep[n - 1] = True
    stack = [(0, n - 1)]
    while len(stack) > 0:
        first, last = stack.pop()
        if last - first < 2:
            continue
        ax, ay = pts[first, 0], pts[first, 1]
        abx, aby = pts[last, 0] - ax, pts[last, 1] - ay
        denom = abx * abx + aby * aby
        best, idx = -1.0, -1
        for i in range(first + 1, last):
            px, py = pts[i, 0] - ax, pts[i, 1] - ay
            if denom == 0.0:
                d = math.sqrt(px * px + py * py)
            else:
                t = min(1.0, max(0.0, (px * abx + py * aby) / denom))
                dx, dy = px - t * abx, py - t * aby
                d = math.sqrt(dx * dx + dy * dy)
            if d > best:
                best, idx = d, i
        if best > epsilon:
            keep[idx] = True
            stack.append((first, idx))
            stack.append((idx, last))
    return keep


def _dp_open(pts: np.ndarray, epsilon: float) -> list[int]:
    return np.flatnonzero(_dp_kernel(np.ascontiguousarray(pts, dtype=np.float64), float(epsilon))).tolist()


def douglas_peucker(contour, epsilon: float = 0.02, closed: bool = False) -> np.ndarray:
    """Ramer-Douglas-Peucker simplification.

    For ``closed`` contours the ring is split at the point farthest from the
    centroid and at the point farthest from that one; both are kept.
    """
    pts = np.asarray(contour, dtype=float)
    if len(pts) < 3:
        return pts.copy()
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if not closed:
        return pts[_dp_open(pts, epsilon)]
    start = int(np.argmax(np.linalg.norm(pts - pts.mean(axis=0), axis=1)))
    ring = np.roll(pts, -start, axis=0)
    split = int(np.argmax(np.linalg.norm(ring - ring[0], axis=1)))
    first = _dp_open(ring[:split + 1], epsilon)
    second = _dp_open(np.vstack((ring[split:], ring[:1])), epsilon)
    idx = first + [split + i for i in second[1:-1]]
    out = ring[idx]
    # restore the input's cyclic phase so the output is a subsequence in input order
    orig = [(i + start) % len(pts) for i in idx]
    order = np.argsort(orig)
    return out[order]


@dataclass(frozen=True)
class ContourQuad:
    corners: tuple  # four (x, y), counter-clockwise, starting at the smallest (y, x)
    iou_with_contour: float
    improved: bool = True

    @property
    def array(self) -> np.ndarray:
        return np.array(self.corners)

    @property
    def polygon(self) -> Polygon2:
        return Polygon2(self.corners)


def canonical_corner_order(corners) -> tuple:
    c = [tuple(map(float, p)) for p in corners]
    if signed_area(c) < 0:
        c = c[::-1]
    k = min(range(len(c)), key=lambda i: (c[i][1], c[i][0]))
    return tuple(c[k:] + c[:k])


def _contour_polygon(contour) -> Polygon2:
    if isinstance(contour, Polygon2):
        return contour
    return Polygon2.from_points(contour)


def select_four_corners(contour) -> ContourQuad:
    """Quad over the contour's points (kept in cyclic order) with maximal IoU.

    Every one of the C(n, 4) subsets is evaluated. Ties go to the larger quad
    area, then to the lexicographically smaller canonical corner tuple.
    """
    pts = np.asarray(contour.vertices if isinstance(contour, Polygon2) else contour, dtype=float)
    if len(pts) < 4:
        raise InsufficientContourError()
    if len(pts) > 12:
        raise ValueError(f"contour has {len(pts)} points; simplify to at most 12 first")
    target = _contour_polygon(pts)
    best_key, best = None, None
    for combo in itertools.combinations(range(len(pts)), 4):
        quad = pts[list(combo)]
        area = signed_area(quad)
        if area <= 1e-12 or not is_simple(quad):
            continue
        iou = polygon_iou(Polygon2(tuple(map(tuple, quad))), target)
        corners = canonical_corner_order(quad)
        key = (round(iou, 12), round(area, 12), tuple(-v for p in corners for v in p))
        if best_key is None or key > best_key:
            best_key, best = key, ContourQuad(corners, iou)
    if best is None:
        raise InsufficientContourError("no valid quad in contour")
    return best


def _fit_line(points: np.ndarray):
    """Total least squares line: (centroid, unit direction along the principal axis)."""
    c = points.mean(axis=0)
    q = points - c
    sxx, syy, sxy = float(q[:, 0] @ q[:, 0]), float(q[:, 1] @ q[:, 1]), float(q[:, 0] @ q[:, 1])
    phi = 0.5 * math.atan2(2.0 * sxy, sxx - syy)
    return c, np.array([math.cos(phi), math.sin(phi)])


def _intersect(l1, l2):
    (p, d), (q, e) = l1, l2
    den = d[0] * e[1] - d[1] * e[0]
    if abs(den) < 1e-12:
        return None
    t = ((q[0] - p[0]) * e[1] - (q[1] - p[1]) * e[0]) / den
    return p + t * d


def refine_quad_edges(quad: ContourQuad, contour, band: float = 0.05, max_shift: float = 10.0) -> ContourQuad:
    """Re-fit every quad edge to nearby contour points and intersect neighbours.

    The refined quad is accepted only when its IoU with the contour does not
    decrease; otherwise the input comes back with ``improved=False``.
    """
    pts = np.asarray(contour.vertices if isinstance(contour, Polygon2) else contour, dtype=float)
    corners = quad.array
    unchanged = ContourQuad(quad.corners, quad.iou_with_contour, improved=False)
    try:
        target = _contour_polygon(pts)
        base_iou = polygon_iou(quad.polygon, target)
    except DegeneratePolygonError:
        return unchanged
    unchanged = ContourQuad(quad.corners, base_iou, improved=False)
    if base_iou <= 0.5:
        return unchanged
    # distances of every contour point to all four edges at once
    a, ab = corners, np.roll(corners, -1, axis=0) - corners
    rel = pts[None, :, :] - a[:, None, :]
    den = np.maximum((ab * ab).sum(axis=1), 1e-300)
    t = np.clip((rel * ab[:, None, :]).sum(axis=2) / den[:, None], 0.0, 1.0)
    dist = np.hypot(rel[:, :, 0] - t * ab[:, None, 0], rel[:, :, 1] - t * ab[:, None, 1])
    lines = []
    for i in range(4):
        near = pts[dist[i] <= band]
        support = np.vstack((near, [a[i], a[i] + ab[i]])) if len(near) < 2 else near
        lines.append(_fit_line(support))
    new = corners.copy()
    for i in range(4):
        x = _intersect(lines[i - 1], lines[i])
        if x is not None and np.linalg.norm(x - corners[i]) <= max_shift:
            new[i] = x
    if signed_area(new) <= 1e-12 or not is_simple(new):
        return unchanged
    new_iou = polygon_iou(Polygon2(tuple(map(tuple, new))), target)
    if new_iou < base_iou:
        return unchanged
    return ContourQuad(canonical_corner_order(new), new_iou, improved=True)


@dataclass(frozen=True)
class PoseEstimate:
    pose: Pose2
    rms: float


def _rigid_fit_2d(model: np.ndarray, observed: np.ndarray):
    """Closed-form rotation + translation of ``model`` onto each of a stack of ``observed`` point sets.

    ``observed`` is (k, n, 2); returns per-candidate (theta, t, rms) arrays.
    """
    cm, co = model.mean(axis=0), observed.mean(axis=1)
    m, o = model - cm, observed - co[:, None, :]
    dot = np.einsum("nd,knd->k", m, o)
    cross = (m[None, :, 0] * o[:, :, 1] - m[None, :, 1] * o[:, :, 0]).sum(axis=1)
    theta = np.arctan2(cross, dot)
    c, s = np.cos(theta)[:, None], np.sin(theta)[:, None]
    t = co - np.column_stack((c[:, 0] * cm[0] - s[:, 0] * cm[1], s[:, 0] * cm[0] + c[:, 0] * cm[1]))
    fx = c * model[None, :, 0] - s * model[None, :, 1] + t[:, :1]
    fy = s * model[None, :, 0] + c * model[None, :, 1] + t[:, 1:]
    rms = np.sqrt(((observed[:, :, 0] - fx) ** 2 + (observed[:, :, 1] - fy) ** 2).mean(axis=1))
    return theta, t, rms


def estimate_planar_pose(model_corners, observed, symmetric: bool = True,
                         outlier_rms: float = POSE_OUTLIER_RMS) -> PoseEstimate:
    """Closed-form 3-DoF fit of object-frame ``model_corners`` onto observed corners.

    All 8 cyclic correspondences (4 shifts, both directions) are tried and the
    smallest residual wins. With ``symmetric`` the yaw is folded into [0, pi).
    """
    model = np.asarray(model_corners, dtype=float)
    obs = observed.array if isinstance(observed, ContourQuad) else np.asarray(observed, dtype=float)
    n = len(obs)
    shift = (np.arange(n)[None, :] + np.arange(n)[:, None]) % n
    cands = np.concatenate((obs[shift], obs[::-1][shift]))
    thetas, ts, rmss = _rigid_fit_2d(model, cands)
    best = 0
    for i in range(1, len(rmss)):
        if rmss[i] < rmss[best] - 1e-15:
            best = i
    theta, t, rms = float(thetas[best]), ts[best], float(rmss[best])
    if rms > outlier_rms:
        raise PoseOutlierError(rms)
    if symmetric:
        theta = fold_pi(theta)
    return PoseEstimate(Pose2(float(t[0]), float(t[1]), theta), rms)


def table_model_corners(size=(1.2, 0.8)) -> np.ndarray:
    return Polygon2.rectangle(*size).array


def table_pose_from_contour(contour, size=(1.2, 0.8), epsilon: float = 0.02) -> Pose2:
    """Full contour-to-pose pipeline for a table mask contour."""
    pts = np.asarray(contour.vertices if isinstance(contour, Polygon2) else contour, dtype=float)
    simplified = douglas_peucker(pts, epsilon, closed=True)
    eps = epsilon
    while len(simplified) > 12:
        eps *= 2
        simplified = douglas_peucker(pts, eps, closed=True)
    quad = select_four_corners(simplified)
    quad = refine_quad_edges(quad, pts)
    return estimate_planar_pose(table_model_corners(size), quad).pose


# ---------------------------------------------------------------- grasping

@dataclass(frozen=True)
class GraspPair:
    left: tuple
    right: tuple
    approach_dir: tuple
    side_sign: int

    @property
    def midpoint(self) -> tuple:
        return ((self.left[0] + self.right[0]) / 2, (self.left[1] + self.right[1]) / 2)


def _pose_of(obj) -> Pose2:
    return obj if isinstance(obj, Pose2) else obj.pose


def table_grasp_pair(table, side_sign: int, half_length: float = 0.6,
                     separation: float = TABLE_GRIPPER_SEPARATION) -> GraspPair:
    """Grippers placed symmetrically about the midpoint of the short edge facing the robot.

    ``side_sign`` picks the edge at ``side_sign * n_t`` where ``n_t`` is the
    table long axis; the approach direction points from there into the table.
    """
    if side_sign not in (1, -1):
        raise ValueError("side_sign must be +1 or -1")
    p = _pose_of(table)
    n = np.array([math.cos(p.theta), math.sin(p.theta)])
    approach = -side_sign * n
    mid = np.array([p.x, p.y]) + side_sign * half_length * n
    left_dir = np.array([-approach[1], approach[0]])
    h = separation / 2
    return GraspPair(tuple(mid + h * left_dir), tuple(mid - h * left_dir), tuple(approach), side_sign)


def chair_backrest_points(chair, size: float = 0.45) -> np.ndarray:
    """Backrest cross-section: the two -x footprint vertices and their midpoint, in world frame."""
    h = size / 2
    local = np.array([(-h, -h), (-h, 0.0), (-h, h)])
    return transform_points_from_frame(local, _pose_of(chair))


def chair_grasp_pair(chair, backrest_points=None, separation: float = CHAIR_GRIPPER_SEPARATION) -> GraspPair:
    """Grasps symmetric about the center of a line fitted to the backrest cross-section."""
    p = _pose_of(chair)
    pts = chair_backrest_points(chair) if backrest_points is None else np.asarray(backrest_points, dtype=float)
    center, d = _fit_line(pts)
    approach = np.array([math.cos(p.theta), math.sin(p.theta)])
    left_dir = np.array([-approach[1], approach[0]])
    if d @ left_dir < 0:
        d = -d
    h = separation / 2
    return GraspPair(tuple(center + h * d), tuple(center - h * d), tuple(approach), 1)
