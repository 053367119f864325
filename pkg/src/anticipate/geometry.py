"""Planar geometry primitives: SE(2) poses, angles, polygons, grids, ray casting.

Angles are wrapped to (-pi, pi]; the boundary maps to +pi.
Grid cell values follow cost-map semantics: 0 free, 1-252 soft cost,
253 inscribed, 254 lethal, 255 unknown.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

FREE = 0
INSCRIBED = 253
LETHAL = 254
UNKNOWN = 255

TWO_PI = 2.0 * math.pi


class GeometryError(ValueError):
    pass


class DegeneratePolygonError(GeometryError):
    def __init__(self, msg="degenerate polygon"):
        super().__init__(msg)


class OutOfBoundsError(GeometryError):
    def __init__(self, msg="out of bounds"):
        super().__init__(msg)


def wrap_angle(a: float) -> float:
    """Wrap ``a`` into (-pi, pi]."""
    w = math.remainder(a, TWO_PI)
    if w <= -math.pi:
        w += TWO_PI
    return w


def angle_diff(a: float, b: float) -> float:
    """Wrapped difference ``a - b`` in (-pi, pi]."""
    return wrap_angle(a - b)


def fold_pi(a: float) -> float:
    """Fold an angle into [0, pi) for objects with half-turn symmetry."""
    w = math.fmod(a, math.pi)
    if w < 0.0:
        w += math.pi
    if w >= math.pi:
        w -= math.pi
    return w


def wrap_half_pi(a: float) -> float:
    """Wrap into (-pi/2, pi/2], the innovation range for pi-symmetric yaw."""
    w = math.remainder(a, math.pi)
    if w <= -math.pi / 2:
        w += math.pi
    return w


@dataclass(frozen=True)
class Pose2:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def compose(self, other: "Pose2") -> "Pose2":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(self.x + c * other.x - s * other.y,
                     self.y + s * other.x + c * other.y,
                     self.theta + other.theta)

    def __matmul__(self, other: "Pose2") -> "Pose2":
        return self.compose(other)

    def inverse(self) -> "Pose2":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(-c * self.x - s * self.y, s * self.x - c * self.y, -self.theta)

    def between(self, other: "Pose2") -> "Pose2":
        """Pose of ``other`` expressed in this frame."""
        return self.inverse().compose(other)

    def distance_to(self, other) -> float:
        ox, oy = (other.x, other.y) if isinstance(other, Pose2) else other
        return math.hypot(ox - self.x, oy - self.y)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.theta)


@dataclass(frozen=True)
class Velocity2:
    vx: float = 0.0
    vy: float = 0.0
    omega: float = 0.0

    def __post_init__(self):
        for name in ("vx", "vy", "omega"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise GeometryError(f"non-finite velocity component {name}={v}")
            object.__setattr__(self, name, v)

    @property
    def linear_speed(self) -> float:
        return math.hypot(self.vx, self.vy)

    def clamped(self, v_max: float, w_max: float) -> "Velocity2":
        speed = self.linear_speed
        scale = v_max / speed if speed > v_max else 1.0
        omega = max(-w_max, min(w_max, self.omega))
        return Velocity2(self.vx * scale, self.vy * scale, omega)

    def __add__(self, other: "Velocity2") -> "Velocity2":
        return Velocity2(self.vx + other.vx, self.vy + other.vy, self.omega + other.omega)

    def scaled(self, k: float) -> "Velocity2":
        return Velocity2(k * self.vx, k * self.vy, k * self.omega)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.vx, self.vy, self.omega)


def transform_to_frame(p, frame: Pose2) -> tuple[float, float]:
    """Express world point ``p`` in ``frame``: R(-theta) (p - t)."""
    dx, dy = p[0] - frame.x, p[1] - frame.y
    c, s = math.cos(frame.theta), math.sin(frame.theta)
    return (c * dx + s * dy, -s * dx + c * dy)


def transform_from_frame(p, frame: Pose2) -> tuple[float, float]:
    """Inverse of :func:`transform_to_frame`."""
    c, s = math.cos(frame.theta), math.sin(frame.theta)
    return (frame.x + c * p[0] - s * p[1], frame.y + s * p[0] + c * p[1])


def rotate(v, theta: float) -> tuple[float, float]:
    c, s = math.cos(theta), math.sin(theta)
    return (c * v[0] - s * v[1], s * v[0] + c * v[1])


def transform_points_to_frame(points: np.ndarray, frame: Pose2) -> np.ndarray:
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    c, s = math.cos(frame.theta), math.sin(frame.theta)
    d = pts - (frame.x, frame.y)
    return np.column_stack((c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]))


def transform_points_from_frame(points: np.ndarray, frame: Pose2) -> np.ndarray:
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    c, s = math.cos(frame.theta), math.sin(frame.theta)
    return np.column_stack((frame.x + c * pts[:, 0] - s * pts[:, 1],
                            frame.y + s * pts[:, 0] + c * pts[:, 1]))


# ---------------------------------------------------------------- polygons

def signed_area(vertices) -> float:
    if len(vertices) <= 16:
        # plain shoelace; faster than numpy for the small polygons used everywhere
        total = 0.0
        px, py = vertices[-1]
        for x, y in vertices:
            total += px * y - x * py
            px, py = x, y
        return 0.5 * float(total)
    v = np.asarray(vertices, dtype=float)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x[:-1], y[1:]) - np.dot(x[1:], y[:-1]) + x[-1] * y[0] - x[0] * y[-1])


def _segments_intersect(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(p3, p4, p1), orient(p3, p4, p2)
    d3, d4 = orient(p1, p2, p3), orient(p1, p2, p4)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and 0 not in (d1, d2, d3, d4)


def is_simple(vertices) -> bool:
    v = [tuple(p) for p in vertices]
    n = len(v)
    for i in range(n):
        a1, a2 = v[i], v[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or j == (i + 1) % n:
                continue
            if _segments_intersect(a1, a2, v[j], v[(j + 1) % n]):
                return False
    return True


def is_convex(vertices) -> bool:
    n = len(vertices)
    if n <= 16:
        pos = neg = True
        for i in range(n):
            (x0, y0), (x1, y1), (x2, y2) = vertices[i], vertices[(i + 1) % n], vertices[(i + 2) % n]
            cr = (x1 - x0) * (y2 - y1) - (y1 - y0) * (x2 - x1)
            pos = pos and cr >= -1e-12
            neg = neg and cr <= 1e-12
        return bool(pos or neg)
    v = np.asarray(vertices, dtype=float)
    d1 = np.concatenate((v[1:], v[:1])) - v
    d2 = np.concatenate((d1[1:], d1[:1]))
    cross = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    return bool(np.all(cross >= -1e-12) or np.all(cross <= 1e-12))


@dataclass(frozen=True)
class Polygon2:
    """Simple polygon with counter-clockwise vertices."""

    vertices: tuple

    def __post_init__(self):
        verts = tuple((float(x), float(y)) for x, y in self.vertices)
        if len(verts) < 3:
            raise DegeneratePolygonError("polygon needs at least 3 vertices")
        if signed_area(verts) <= 0.0:
            raise DegeneratePolygonError("polygon must be counter-clockwise with positive area")
        object.__setattr__(self, "vertices", verts)

    @classmethod
    def from_points(cls, points) -> "Polygon2":
        """Build from points in either orientation."""
        pts = [tuple(map(float, p)) for p in points]
        if len(pts) >= 3 and signed_area(pts) < 0:
            pts = pts[::-1]
        return cls(tuple(pts))

    @classmethod
    def rectangle(cls, length: float, width: float) -> "Polygon2":
        hl, hw = length / 2, width / 2
        return cls(((-hl, -hw), (hl, -hw), (hl, hw), (-hl, hw)))

    @property
    def array(self) -> np.ndarray:
        return np.array(self.vertices)

    @property
    def area(self) -> float:
        return signed_area(self.vertices)

    def centroid(self) -> tuple[float, float]:
        v = self.array
        x, y = v[:, 0], v[:, 1]
        xn, yn = np.roll(x, -1), np.roll(y, -1)
        cr = x * yn - xn * y
        a = cr.sum() / 2
        return (float(((x + xn) * cr).sum() / (6 * a)), float(((y + yn) * cr).sum() / (6 * a)))

    def is_simple(self) -> bool:
        return is_simple(self.vertices)

    def is_convex(self) -> bool:
        return is_convex(self.vertices)

    def transformed(self, pose: Pose2) -> "Polygon2":
        return Polygon2(tuple(map(tuple, transform_points_from_frame(self.array, pose))))

    def contains(self, p) -> bool:
        return bool(points_in_polygon(np.asarray([p], dtype=float), self.array)[0])


def points_in_polygon(points: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """Even-odd point-in-polygon test, vectorized over points."""
    px, py = points[:, 0], points[:, 1]
    inside = np.zeros(len(points), dtype=bool)
    v = np.asarray(vertices, dtype=float)
    n = len(v)
    for i in range(n):
        x1, y1 = v[i]
        x2, y2 = v[(i + 1) % n]
        if y1 == y2:
            continue
        crosses = (y1 > py) != (y2 > py)
        xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < xint)
    return inside


def _clip_convex(subject, clip):
    """Sutherland-Hodgman: clip any simple ``subject`` by convex CCW ``clip``."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, output = output, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    t = sp / (sp - sc)
                    output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                output.append(cur)
            elif sp >= 0:
                t = sp / (sp - sc)
                output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, sp = cur, sc
    return output


def triangulate(vertices) -> list:
    """Ear-clipping triangulation of a simple CCW polygon; returns CCW triangles."""
    pts = [tuple(map(float, p)) for p in vertices]
    idx = list(range(len(pts)))
    tris = []

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    while len(idx) > 3:
        m = len(idx)
        for k in range(m):
            i, j, l = idx[k - 1], idx[k], idx[(k + 1) % m]
            a, b, c = pts[i], pts[j], pts[l]
            if cross(a, b, c) <= 0:
                continue
            if any(cross(a, b, pts[q]) >= 0 and cross(b, c, pts[q]) >= 0 and cross(c, a, pts[q]) >= 0
                   for q in idx if q not in (i, j, l) and pts[q] not in (a, b, c)):
                continue
            tris.append((a, b, c))
            idx.pop(k)
            break
        else:
            # only collinear or numerically flat ears remain: drop a zero-area vertex
            k = min(range(m), key=lambda k: abs(cross(pts[idx[k - 1]], pts[idx[k]], pts[idx[(k + 1) % m]])))
            idx.pop(k)
    if len(idx) == 3 and cross(pts[idx[0]], pts[idx[1]], pts[idx[2]]) > 0:
        tris.append(tuple(pts[q] for q in idx))
    return tris


def intersection_area(a: Polygon2, b: Polygon2) -> float:
    """Exact overlap area of two simple polygons.

    The clip operand is split into convex pieces (itself if convex, ear-clipped
    triangles otherwise); clipping the other polygon by each piece is exact for
    any simple subject.
    """
    subject, clip = (a, b) if b.is_convex() or not a.is_convex() else (b, a)
    pieces = [clip.vertices] if clip.is_convex() else triangulate(clip.vertices)
    total = 0.0
    for piece in pieces:
        inter = _clip_convex(subject.vertices, piece)
        if len(inter) >= 3:
            total += signed_area(inter)
    return max(total, 0.0)


def polygon_iou(a: Polygon2, b: Polygon2) -> float:
    """Intersection over union of two simple polygons (exact, convex or not)."""
    area_a, area_b = a.area, b.area
    if area_a <= 1e-12 or area_b <= 1e-12:
        raise DegeneratePolygonError()
    ia = min(intersection_area(a, b), area_a, area_b)
    return ia / (area_a + area_b - ia)


# ---------------------------------------------------------------- grids

@dataclass
class Grid2:
    """Row-major 2D grid; ``cells[iy, ix]``, origin at the lower-left corner of cell (0, 0)."""

    resolution: float
    origin: tuple = (0.0, 0.0)
    width: int = 0
    height: int = 0
    cells: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.resolution <= 0:
            raise GeometryError("resolution must be positive")
        if isinstance(self.origin, Pose2):
            self.origin = (self.origin.x, self.origin.y)
        self.origin = (float(self.origin[0]), float(self.origin[1]))
        if self.cells is None:
            self.cells = np.zeros((self.height, self.width), dtype=np.uint8)
        else:
            self.cells = np.ascontiguousarray(self.cells, dtype=np.uint8)
            self.height, self.width = self.cells.shape

    @classmethod
    def empty(cls, size_x: float, size_y: float, resolution: float = 0.05, origin=(0.0, 0.0)) -> "Grid2":
        w = int(round(size_x / resolution))
        h = int(round(size_y / resolution))
        return cls(resolution, origin, w, h)

    @property
    def origin_pose(self) -> Pose2:
        return Pose2(self.origin[0], self.origin[1], 0.0)

    @property
    def extent(self) -> tuple[float, float, float, float]:
        ox, oy = self.origin
        return (ox, oy, ox + self.width * self.resolution, oy + self.height * self.resolution)

    def copy(self) -> "Grid2":
        return Grid2(self.resolution, self.origin, self.width, self.height, self.cells.copy())

    def in_bounds(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.width and 0 <= iy < self.height

    def world_to_cell(self, x: float, y: float) -> tuple[int, int]:
        return (int(math.floor((x - self.origin[0]) / self.resolution)),
                int(math.floor((y - self.origin[1]) / self.resolution)))

    def cell_to_world(self, ix: int, iy: int) -> tuple[float, float]:
        return (self.origin[0] + (ix + 0.5) * self.resolution,
                self.origin[1] + (iy + 0.5) * self.resolution)

    def contains_point(self, x: float, y: float) -> bool:
        return self.in_bounds(*self.world_to_cell(x, y))

    def __getitem__(self, cell):
        ix, iy = cell
        if not self.in_bounds(ix, iy):
            raise OutOfBoundsError()
        return int(self.cells[iy, ix])

    def __setitem__(self, cell, value):
        ix, iy = cell
        if not self.in_bounds(ix, iy):
            raise OutOfBoundsError()
        self.cells[iy, ix] = value

    def value_at(self, x: float, y: float, default: int = UNKNOWN) -> int:
        ix, iy = self.world_to_cell(x, y)
        if not self.in_bounds(ix, iy):
            return default
        return int(self.cells[iy, ix])

    def fill_rect(self, x0: float, y0: float, x1: float, y1: float, value: int = LETHAL):
        """Set every cell whose center lies in the axis-aligned box."""
        res, (ox, oy) = self.resolution, self.origin
        ix0 = max(0, int(math.ceil((min(x0, x1) - ox) / res - 0.5)))
        ix1 = min(self.width - 1, int(math.floor((max(x0, x1) - ox) / res - 0.5)))
        iy0 = max(0, int(math.ceil((min(y0, y1) - oy) / res - 0.5)))
        iy1 = min(self.height - 1, int(math.floor((max(y0, y1) - oy) / res - 0.5)))
        if ix1 >= ix0 and iy1 >= iy0:
            self.cells[iy0:iy1 + 1, ix0:ix1 + 1] = value

    # serialization: text header followed by the row-major byte payload
    def dumps(self) -> bytes:
        header = (f"GRID2 1\nresolution {self.resolution!r}\norigin {self.origin[0]!r} {self.origin[1]!r}\n"
                  f"width {self.width}\nheight {self.height}\nDATA\n")
        return header.encode("ascii") + self.cells.tobytes(order="C")

    @classmethod
    def loads(cls, blob: bytes) -> "Grid2":
        fields = {}
        pos = 0
        while True:
            end = blob.index(b"\n", pos)
            line = blob[pos:end].decode("ascii").strip()
            pos = end + 1
            if line == "DATA":
                break
            key, _, rest = line.partition(" ")
            fields[key] = rest.split()
        if "GRID2" not in fields:
            raise GeometryError("not a grid file")
        w, h = int(fields["width"][0]), int(fields["height"][0])
        payload = blob[pos:pos + w * h]
        if len(payload) != w * h:
            raise GeometryError("truncated grid payload")
        cells = np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()
        return cls(float(fields["resolution"][0]),
                   (float(fields["origin"][0]), float(fields["origin"][1])), w, h, cells)

    def save(self, path) -> None:
        Path(path).write_bytes(self.dumps())

    @classmethod
    def load(cls, path) -> "Grid2":
        return cls.loads(Path(path).read_bytes())


@njit(cache=True)
def _dda_first_hit(cells, ox, oy, res, x0, y0, x1, y1, threshold, skip_first):
    """Amanatides-Woo traversal; returns (ix, iy, t) of the first blocked cell or (-1, -1, 1.0)."""
    h, w = cells.shape
    fx = (x0 - ox) / res
    fy = (y0 - oy) / res
    gx = (x1 - ox) / res
    gy = (y1 - oy) / res
    ix = int(np.floor(fx))
    iy = int(np.floor(fy))
    ex = int(np.floor(gx))
    ey = int(np.floor(gy))
    dx = gx - fx
    dy = gy - fy
    step_x = 1 if dx > 0 else -1
    step_y = 1 if dy > 0 else -1
    if dx != 0.0:
        t_dx = abs(1.0 / dx)
        t_mx = ((ix + 1) - fx) / dx if dx > 0 else (fx - ix) / -dx
    else:
        t_dx = np.inf
        t_mx = np.inf
    if dy != 0.0:
        t_dy = abs(1.0 / dy)
        t_my = ((iy + 1) - fy) / dy if dy > 0 else (fy - iy) / -dy
    else:
        t_dy = np.inf
        t_my = np.inf
    t = 0.0
    first = True
    n_steps = abs(ex - ix) + abs(ey - iy)
    for _ in range(n_steps + 1):
        if ix < 0 or iy < 0 or ix >= w or iy >= h:
            return -2, -2, t
        if not (first and skip_first) and cells[iy, ix] >= threshold:
            return ix, iy, t
        first = False
        if ix == ex and iy == ey:
            break
        if t_mx < t_my:
            t = t_mx
            t_mx += t_dx
            ix += step_x
        else:
            t = t_my
            t_my += t_dy
            iy += step_y
    return -1, -1, 1.0


def ray_cast(grid: Grid2, start, end, blocked_threshold: int = LETHAL, skip_start: bool = False):
    """First cell on the segment ``start``-``end`` with value >= threshold.

    Returns ``(ix, iy)`` or ``None`` when the segment is clear.
    """
    for p in (start, end):
        if not grid.contains_point(p[0], p[1]):
            raise OutOfBoundsError()
    ix, iy, _ = _dda_first_hit(grid.cells, grid.origin[0], grid.origin[1], grid.resolution,
                               float(start[0]), float(start[1]), float(end[0]), float(end[1]),
                               int(blocked_threshold), bool(skip_start))
    if ix == -1:
        return None
    if ix == -2:
        raise OutOfBoundsError()
    return (ix, iy)


def line_of_sight(grid: Grid2, start, end, blocked_threshold: int = LETHAL) -> bool:
    """True when no blocked cell lies between ``start`` and ``end``; endpoints outside the grid count as blocked."""
    try:
        return ray_cast(grid, start, end, blocked_threshold, skip_start=True) is None
    except OutOfBoundsError:
        return False


@njit(cache=True)
def cast_rays(cells, ox, oy, res, x0, y0, angles, max_range, threshold):
    """DDA per ray: (ranges, hit ix, hit iy); misses report ``max_range`` and index -1."""
    n = angles.shape[0]
    out = np.empty(n)
    hx = np.full(n, -1, np.int64)
    hy = np.full(n, -1, np.int64)
    for k in range(n):
        a = angles[k]
        x1 = x0 + max_range * np.cos(a)
        y1 = y0 + max_range * np.sin(a)
        ix, iy, t = _dda_first_hit(cells, ox, oy, res, x0, y0, x1, y1, threshold, False)
        if ix >= 0:
            out[k] = t * max_range
            hx[k] = ix
            hy[k] = iy
        else:
            out[k] = max_range
    return out, hx, hy
