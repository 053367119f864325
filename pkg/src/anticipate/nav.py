"""Anticipatory navigation: virtual person point cloud, layered cost map, lidar, grid planner."""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from numba import njit
from scipy import ndimage

from .geometry import (INSCRIBED, LETHAL, Grid2, Pose2, cast_rays, points_in_polygon, transform_points_from_frame,
                       transform_points_to_frame)
from .world import PERSON_RADIUS, WorldState

PATH_COST_WEIGHT = 0.02


class NoPathError(RuntimeError):
    def __init__(self, msg="goal unreachable"):
        super().__init__(msg)


@dataclass(frozen=True)
class AnticipationParams:
    t_pred: float = 2.0
    t_step: float = 0.5
    inflation_radius: float = 0.35   # static map and onboard lidar returns
    person_inflation: float = 1.1    # virtual person points: keeps the body surfaces >= 0.5 m apart
    person_range: float = 6.0
    min_keypoints: int = 5
    soft_radius: float = 0.6        # width of the decaying cost band outside the lethal disk
    soft_decay: float = 4.0         # 1/m
    person_soft_radius: float = 1.0
    person_soft_decay: float = 2.0
    obstacle_persistence: float = 30.0  # s a lidar mark survives unless a later ray clears it

    def __post_init__(self):
        if not 0 < self.t_step <= self.t_pred:
            raise ValueError("need 0 < t_step <= t_pred")
        if self.inflation_radius <= 0 or self.person_inflation <= 0 or self.person_range <= 0:
            raise ValueError("inflation and range must be positive")
        if self.obstacle_persistence < 0:
            raise ValueError("obstacle_persistence must be >= 0")


# ---------------------------------------------------------------- Algorithm 1

def _person_root(p) -> tuple:
    return p.root


def filter_outlier(persons, robot_pose: Pose2, params: AnticipationParams = AnticipationParams()) -> list:
    """Drop tracks that are too far from the robot or carry too few keypoints."""
    keep = []
    for p in persons:
        rx, ry = _person_root(p)
        if (math.hypot(rx - robot_pose.x, ry - robot_pose.y) <= params.person_range
                and len(p.keypoints) >= params.min_keypoints):
            keep.append(p)
    return keep


def prediction_offsets(params: AnticipationParams) -> np.ndarray:
    """Extrapolation times 0, t_step, ..., t_pred as k * t_step (no accumulation drift)."""
    n = int(math.floor(params.t_pred / params.t_step + 1e-9))
    return np.arange(n + 1) * params.t_step


def build_virtual_cloud(persons, robot_pose: Pose2, params: AnticipationParams = AnticipationParams()) -> np.ndarray:
    """Robot-frame ground points occupied now or within ``t_pred`` by the given persons.

    Each person's keypoints are moved into the robot frame and replicated at
    every extrapolation step along the root velocity. Exact duplicates
    (notably the current keypoints, which the zero offset repeats) are
    removed; rows come back sorted.
    """
    chunks = []
    c, s = math.cos(robot_pose.theta), math.sin(robot_pose.theta)
    offsets = prediction_offsets(params)
    for p in persons:
        kp = transform_points_to_frame(np.asarray(p.keypoints, dtype=float), robot_pose)
        vx, vy = p.velocity
        v_local = np.array([c * vx + s * vy, -s * vx + c * vy])
        chunks.append(kp)
        chunks.append((kp[None, :, :] + offsets[:, None, None] * v_local[None, None, :]).reshape(-1, 2))
    if not chunks:
        return np.zeros((0, 2))
    return np.unique(np.vstack(chunks), axis=0)


# ---------------------------------------------------------------- cost map

@njit(cache=True)
def _stamp_kernel(layer, ox, oy, res, pts, r_in, r_out, decay):
    h, w = layer.shape
    n = int(math.ceil(r_out / res)) + 1
    x0, x1, y0, y1 = w, -1, h, -1
    for k in range(pts.shape[0]):
        cx = int(math.floor((pts[k, 0] - ox) / res))
        cy = int(math.floor((pts[k, 1] - oy) / res))
        x0, x1 = min(x0, max(cx - n, 0)), max(x1, min(cx + n, w - 1))
        y0, y1 = min(y0, max(cy - n, 0)), max(y1, min(cy + n, h - 1))
    if x1 < x0 or y1 < y0:
        return
    best = np.full((y1 - y0 + 1, x1 - x0 + 1), np.inf)
    r2 = r_out * r_out
    for k in range(pts.shape[0]):
        px = pts[k, 0]
        py = pts[k, 1]
        cx = int(math.floor((px - ox) / res))
        cy = int(math.floor((py - oy) / res))
        for iy in range(max(cy - n, y0), min(cy + n, y1) + 1):
            yy = oy + (iy + 0.5) * res - py
            yy2 = yy * yy
            if yy2 > r2:
                continue
            half = math.sqrt(r2 - yy2)
            lo = int(math.floor((px - half - ox) / res - 0.5)) - 1
            hi = int(math.floor((px + half - ox) / res - 0.5)) + 2
            for ix in range(max(cx - n, x0, lo), min(cx + n, x1, hi) + 1):
                xx = ox + (ix + 0.5) * res - px
                d2 = xx * xx + yy2
                if d2 < best[iy - y0, ix - x0]:
                    best[iy - y0, ix - x0] = d2
    for iy in range(y0, y1 + 1):
        for ix in range(x0, x1 + 1):
            d2 = best[iy - y0, ix - x0]
            if d2 > r2:
                continue
            d = math.sqrt(d2)
            if d <= r_in:
                v = 254
            else:
                v = int(max(1.0, 252.0 * math.exp(-decay * (d - r_in))))
            if v > layer[iy, ix]:
                layer[iy, ix] = v


def _stamp(layer: np.ndarray, grid: Grid2, pts_world: np.ndarray, radius: float, soft: float, decay: float) -> None:
    """Lethal disk of ``radius`` plus a decaying soft band of width ``soft``, cell-center distances."""
    if len(pts_world) == 0:
        return
    _stamp_kernel(layer, float(grid.origin[0]), float(grid.origin[1]), float(grid.resolution),
                  np.ascontiguousarray(pts_world, dtype=np.float64), float(radius), float(radius + soft), float(decay))


def inflate_static(grid: Grid2, params: AnticipationParams) -> np.ndarray:
    """Static layer: lethal within ``inflation_radius`` of an occupied cell, soft band beyond."""
    occ = grid.cells >= LETHAL
    if not occ.any():
        return np.zeros_like(grid.cells)
    d = ndimage.distance_transform_edt(~occ) * grid.resolution
    r_in, r_out = params.inflation_radius, params.inflation_radius + params.soft_radius
    soft = np.maximum(1, 252.0 * np.exp(-params.soft_decay * (d - r_in)))
    out = np.where(d <= r_in, LETHAL, np.where(d <= r_out, soft, 0)).astype(np.uint8)
    out[grid.cells == 255] = 255
    return out


@dataclass(frozen=True)
class CostMap:
    grid: Grid2                     # geometry (resolution, origin, size) and raw static cells
    static: np.ndarray
    onboard: np.ndarray
    virtual: np.ndarray
    combined: np.ndarray
    params: AnticipationParams = AnticipationParams()
    marks: Optional[np.ndarray] = None  # per-cell time of the last dynamic lidar hit, -inf if clear
    active: Optional[np.ndarray] = None  # marks the onboard layer was stamped from

    @classmethod
    def from_static(cls, grid: Grid2, params: AnticipationParams = AnticipationParams()) -> "CostMap":
        static = inflate_static(grid, params)
        zeros = np.zeros_like(static)
        marks = np.full(static.shape, -np.inf)
        return cls(grid, static, zeros, zeros, static.copy(), params, marks)

    def as_grid(self, layer: str = "combined") -> Grid2:
        g = self.grid
        return Grid2(g.resolution, g.origin, g.width, g.height, getattr(self, layer).copy())

    def cost_at(self, x: float, y: float) -> int:
        ix, iy = self.grid.world_to_cell(x, y)
        if not self.grid.in_bounds(ix, iy):
            return 255
        return int(self.combined[iy, ix])


@dataclass(frozen=True)
class LaserScan:
    angles: np.ndarray      # robot frame
    ranges: np.ndarray
    max_range: float
    hit_labels: np.ndarray  # 0 miss, -1 static, -2 object, otherwise person id

    def endpoints(self, only_hits: bool = True) -> np.ndarray:
        mask = self.ranges < self.max_range if only_hits else np.ones(len(self.ranges), bool)
        r, a = self.ranges[mask], self.angles[mask]
        return np.column_stack((r * np.cos(a), r * np.sin(a)))

    def dynamic_endpoints(self) -> np.ndarray:
        """Endpoints of rays that hit something not in the static map."""
        mask = (self.ranges < self.max_range) & (self.hit_labels != -1)
        r, a = self.ranges[mask], self.angles[mask]
        return np.column_stack((r * np.cos(a), r * np.sin(a)))

    def persons_seen(self) -> set:
        return {int(v) for v in np.unique(self.hit_labels) if v > 0}


@njit(cache=True)
def _raytrace(marks, ox, oy, res, px, py, th, angles, ranges, max_range, dynamic, now):
    h, w = marks.shape
    step = 0.5 * res
    for k in range(angles.shape[0]):
        a = th + angles[k]
        c, s = math.cos(a), math.sin(a)
        hit = ranges[k] < max_range
        reach = ranges[k] - res if hit else max_range
        n = int(reach / step)
        for j in range(n + 1):
            d = j * step
            ix = int(math.floor((px + d * c - ox) / res))
            iy = int(math.floor((py + d * s - oy) / res))
            if 0 <= ix < w and 0 <= iy < h:
                marks[iy, ix] = -np.inf
        if hit and dynamic[k]:
            ix = int(math.floor((px + ranges[k] * c - ox) / res))
            iy = int(math.floor((py + ranges[k] * s - oy) / res))
            if 0 <= ix < w and 0 <= iy < h:
                marks[iy, ix] = now


def update_marks(marks: np.ndarray, grid: Grid2, scan: LaserScan, robot_pose: Pose2, now: float) -> np.ndarray:
    """Clear cells each ray passed through, then mark its dynamic hit cell with ``now``."""
    out = marks.copy()
    dynamic = (scan.ranges < scan.max_range) & (scan.hit_labels != -1)
    _raytrace(out, float(grid.origin[0]), float(grid.origin[1]), float(grid.resolution),
              float(robot_pose.x), float(robot_pose.y), float(robot_pose.theta),
              np.ascontiguousarray(scan.angles, dtype=np.float64), np.ascontiguousarray(scan.ranges, dtype=np.float64),
              float(scan.max_range), dynamic, float(now))
    return out


def update_costmap(costmap: CostMap, scan: Optional[LaserScan], cloud, robot_pose: Pose2,
                   now: float = 0.0) -> CostMap:
    """Refresh the onboard and virtual layers and the cell-wise max.

    Both inputs are in the robot frame. Lidar returns explained by the static
    map are skipped; the static layer already carries them. Dynamic returns
    persist for ``obstacle_persistence`` seconds unless a later ray clears
    them. Without a new scan the onboard layer is kept as is.
    """
    grid, params = costmap.grid, costmap.params
    marks, onboard = costmap.marks, costmap.onboard
    if marks is None:
        marks = np.full(costmap.static.shape, -np.inf)
    if scan is not None:
        marks = update_marks(marks, grid, scan, robot_pose, now)
        active = marks >= now - params.obstacle_persistence
        if costmap.active is None or not np.array_equal(active, costmap.active):
            iy, ix = np.nonzero(active)
            pts = np.column_stack((grid.origin[0] + (ix + 0.5) * grid.resolution,
                                   grid.origin[1] + (iy + 0.5) * grid.resolution))
            onboard = np.zeros_like(costmap.static)
            _stamp(onboard, grid, pts, params.inflation_radius, params.soft_radius, params.soft_decay)
        costmap = replace(costmap, active=active)
    virtual = np.zeros_like(costmap.static)
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 2)
    if len(cloud):
        _stamp(virtual, grid, transform_points_from_frame(cloud, robot_pose), params.person_inflation,
               params.person_soft_radius, params.person_soft_decay)
    combined = np.maximum(np.maximum(costmap.static, onboard), virtual)
    return replace(costmap, onboard=onboard, virtual=virtual, combined=combined, marks=marks)


# ---------------------------------------------------------------- lidar

LIDAR_RAYS = 440
LIDAR_FOV = math.radians(220.0)
LIDAR_RANGE = 5.6


def dynamic_label_grid(world: WorldState, exclude_object: Optional[int] = None):
    """Static map plus person disks and free-standing object footprints, with per-cell labels."""
    grid = world.static_map
    cells = grid.cells.copy()
    labels = np.where(grid.cells >= LETHAL, -1, 0).astype(np.int32)
    res, (ox, oy) = grid.resolution, grid.origin
    for h in world.humans:
        px, py = h.root
        n = int(math.ceil(PERSON_RADIUS / res)) + 1
        cx, cy = int(math.floor((px - ox) / res)), int(math.floor((py - oy) / res))
        x0, x1 = max(cx - n, 0), min(cx + n + 1, grid.width)
        y0, y1 = max(cy - n, 0), min(cy + n + 1, grid.height)
        if x0 >= x1 or y0 >= y1:
            continue
        xs = ox + (np.arange(x0, x1) + 0.5) * res - px
        ys = oy + (np.arange(y0, y1) + 0.5) * res - py
        disk = ys[:, None] ** 2 + xs[None, :] ** 2 <= PERSON_RADIUS ** 2
        cells[y0:y1, x0:x1][disk] = LETHAL
        labels[y0:y1, x0:x1][disk] = h.id
    for o in world.objects:
        if o.carried_by != "none" or o.id == exclude_object:
            continue
        fp = o.world_footprint()
        lo, hi = fp.min(axis=0), fp.max(axis=0)
        x0, y0 = max(int(math.floor((lo[0] - ox) / res)), 0), max(int(math.floor((lo[1] - oy) / res)), 0)
        x1 = min(int(math.ceil((hi[0] - ox) / res)) + 1, grid.width)
        y1 = min(int(math.ceil((hi[1] - oy) / res)) + 1, grid.height)
        if x0 >= x1 or y0 >= y1:
            continue
        gx, gy = np.meshgrid(ox + (np.arange(x0, x1) + 0.5) * res, oy + (np.arange(y0, y1) + 0.5) * res)
        inside = points_in_polygon(np.column_stack((gx.ravel(), gy.ravel())), fp).reshape(gx.shape)
        cells[y0:y1, x0:x1][inside] = LETHAL
        sub = labels[y0:y1, x0:x1]
        sub[inside & (sub == 0)] = -2
    return cells, labels


def simulate_lidar(world: WorldState, robot_pose: Optional[Pose2] = None, n_rays: int = LIDAR_RAYS,
                   fov: float = LIDAR_FOV, max_range: float = LIDAR_RANGE) -> LaserScan:
    """Planar scan against the static map and ground-truth person/object footprints."""
    pose = world.robot.pose if robot_pose is None else robot_pose
    cells, labels = dynamic_label_grid(world)
    grid = world.static_map
    local = np.linspace(-fov / 2, fov / 2, n_rays)
    ranges, hx, hy = cast_rays(cells, grid.origin[0], grid.origin[1], grid.resolution,
                               pose.x, pose.y, local + pose.theta, max_range, LETHAL)
    lab = np.zeros(n_rays, dtype=np.int32)
    hit = hx >= 0
    lab[hit] = labels[hy[hit], hx[hit]]
    lab[hit & (lab == 0)] = -1
    return LaserScan(local, ranges, max_range, lab)


# ---------------------------------------------------------------- planner

_NEIGH = np.array([(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)], dtype=np.int64)


@njit(cache=True)
def _astar(cost, passable_below, sx, sy, gx, gy, res, weight):
    h, w = cost.shape
    n = h * w
    g = np.full(n, np.inf)
    parent = np.full(n, -1, np.int64)
    closed = np.zeros(n, np.bool_)
    start = sy * w + sx
    goal = gy * w + gx
    g[start] = 0.0
    sq2 = math.sqrt(2.0)
    heap = [(0.0, 0, start)]
    counter = 1
    while len(heap) > 0:
        f, _, cur = heapq.heappop(heap)
        if closed[cur]:
            continue
        closed[cur] = True
        if cur == goal:
            break
        cy = cur // w
        cx = cur - cy * w
        for k in range(8):
            dx = _NEIGH[k, 0]
            dy = _NEIGH[k, 1]
            nx = cx + dx
            ny = cy + dy
            if nx < 0 or ny < 0 or nx >= w or ny >= h:
                continue
            if cost[ny, nx] >= passable_below:
                continue
            diag = dx != 0 and dy != 0
            if diag and (cost[cy, nx] >= passable_below or cost[ny, cx] >= passable_below):
                continue
            nid = ny * w + nx
            if closed[nid]:
                continue
            step = (sq2 if diag else 1.0) * res + weight * cost[ny, nx]
            ng = g[cur] + step
            if ng < g[nid]:
                g[nid] = ng
                parent[nid] = cur
                ddx = abs(nx - gx)
                ddy = abs(ny - gy)
                hval = (max(ddx, ddy) + (sq2 - 1.0) * min(ddx, ddy)) * res
                heapq.heappush(heap, (ng + hval, counter, nid))
                counter += 1
    if not closed[goal]:
        return np.empty(0, np.int64), np.inf
    length = 0
    node = goal
    while node != -1:
        length += 1
        node = parent[node]
    path = np.empty(length, np.int64)
    node = goal
    for i in range(length - 1, -1, -1):
        path[i] = node
        node = parent[node]
    return path, g[goal]


@dataclass(frozen=True)
class PlannedPath:
    waypoints: np.ndarray   # (N, 2) world coordinates of cell centers
    cells: np.ndarray       # (N, 2) (ix, iy)
    cost: float

    @property
    def length(self) -> float:
        if len(self.waypoints) < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1).sum())


def _nearest_free(cost: np.ndarray, ix: int, iy: int, radius_cells: int, passable_below: int):
    h, w = cost.shape
    best = None
    for dy in range(-radius_cells, radius_cells + 1):
        for dx in range(-radius_cells, radius_cells + 1):
            d2 = dx * dx + dy * dy
            if d2 > radius_cells * radius_cells:
                continue
            x, y = ix + dx, iy + dy
            if 0 <= x < w and 0 <= y < h and cost[y, x] < passable_below:
                key = (d2, y, x)
                if best is None or key < best:
                    best = key
    return None if best is None else (best[2], best[1])


def path_cost(cost: np.ndarray, cells, res: float, weight: float = PATH_COST_WEIGHT) -> float:
    """Length plus ``weight`` times the cost of every entered cell."""
    total = 0.0
    for (x0, y0), (x1, y1) in zip(cells[:-1], cells[1:]):
        total += math.hypot(x1 - x0, y1 - y0) * res + weight * float(cost[y1, x1])
    return total


def plan_path(costmap, start: Pose2, goal: Pose2, substitute_radius: float = 0.5,
              passable_below: int = INSCRIBED, weight: float = PATH_COST_WEIGHT) -> PlannedPath:
    """8-connected A* over the combined layer.

    Step cost is metric length plus ``weight`` times the entered cell's cost;
    cells at or above ``passable_below`` are impassable and diagonal moves may
    not cut blocked corners. A blocked goal (or start) is replaced by the
    nearest passable cell within ``substitute_radius``.
    """
    if isinstance(costmap, CostMap):
        grid, cost = costmap.grid, costmap.combined
    else:
        grid, cost = costmap, costmap.cells
    res = grid.resolution
    sx, sy = grid.world_to_cell(start.x, start.y)
    gx, gy = grid.world_to_cell(goal.x, goal.y)
    if not grid.in_bounds(sx, sy) or not grid.in_bounds(gx, gy):
        raise NoPathError("goal unreachable: endpoint outside map")
    rc = int(round(substitute_radius / res))
    if cost[sy, sx] >= passable_below:
        sub = _nearest_free(cost, sx, sy, rc, passable_below)
        if sub is None:
            raise NoPathError("goal unreachable: start blocked")
        sx, sy = sub
    if cost[gy, gx] >= passable_below:
        sub = _nearest_free(cost, gx, gy, rc, passable_below)
        if sub is None:
            raise NoPathError()
        gx, gy = sub
    flat, total = _astar(cost, passable_below, sx, sy, gx, gy, res, weight)
    if len(flat) == 0:
        raise NoPathError()
    cells = np.column_stack((flat % grid.width, flat // grid.width))
    pts = np.column_stack((grid.origin[0] + (cells[:, 0] + 0.5) * res, grid.origin[1] + (cells[:, 1] + 0.5) * res))
    return PlannedPath(pts, cells, float(total))


# ---------------------------------------------------------------- metrics

def surface_distance(robot_xy, robot_radius: float, person_xy, person_radius: float = PERSON_RADIUS) -> float:
    d = math.hypot(robot_xy[0] - person_xy[0], robot_xy[1] - person_xy[1])
    return max(0.0, d - robot_radius - person_radius)


def min_safety_distance(trace, person_radius: float = PERSON_RADIUS) -> float:
    """Minimum surface-to-surface robot/person distance over a trace.

    ``trace`` yields ``(robot_xy, robot_radius, [person_xy, ...])`` per tick.
    """
    best = math.inf
    seen = False
    for robot_xy, radius, persons in trace:
        for p in persons:
            seen = True
            best = min(best, surface_distance(robot_xy, radius, p, person_radius))
    if not seen:
        raise ValueError("trace contains no person")
    return best
