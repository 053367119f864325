"""Pickup pose anticipation, compliant carrying with goal anticipation, layout bookkeeping."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .geometry import Polygon2, Pose2, Velocity2, angle_diff, fold_pi, points_in_polygon, rotate


class LayoutComplete(RuntimeError):
    def __init__(self, msg="layout complete"):
        super().__init__(msg)


class AlignmentTimeout(RuntimeError):
    def __init__(self, msg="alignment timeout"):
        super().__init__(msg)


class PlacementVerificationError(RuntimeError):
    def __init__(self, msg="placement verification failed"):
        super().__init__(msg)


class ChairTaskFailed(RuntimeError):
    def __init__(self, msg="chair task failed"):
        super().__init__(msg)


@dataclass(frozen=True)
class PickupArea:
    polygon: Polygon2
    class_filter: str = "table"

    def __post_init__(self):
        if not self.polygon.is_convex():
            raise ValueError("pickup area must be convex")

    @property
    def center(self) -> tuple:
        return self.polygon.centroid()

    def contains(self, p) -> bool:
        return self.polygon.contains(p)


@dataclass(frozen=True)
class LayoutEntry:
    cls: str
    target: Pose2
    occupied: bool = False

    def __post_init__(self):
        if self.cls == "table":
            object.__setattr__(self, "target", Pose2(self.target.x, self.target.y, fold_pi(self.target.theta)))


@dataclass(frozen=True)
class Layout:
    entries: tuple = ()

    def unoccupied(self, cls: Optional[str] = None) -> list:
        return [i for i, e in enumerate(self.entries) if not e.occupied and (cls is None or e.cls == cls)]

    def mark_occupied(self, index: int) -> "Layout":
        if self.entries[index].occupied:
            raise ValueError(f"layout entry {index} already occupied")
        return replace(self, entries=tuple(replace(e, occupied=True) if i == index else e
                                           for i, e in enumerate(self.entries)))

    @property
    def complete(self) -> bool:
        return all(e.occupied for e in self.entries)


@dataclass(frozen=True)
class CarryParams:
    tau_ee: float = 0.03
    tau_goal: float = 0.05
    tau_vel: float = 0.05
    tau_p: float = 2.5
    tau_direct: float = 1.0
    delta_grasp: float = 0.9
    k_e_lin: float = 1.0
    k_e_rot: float = 1.5
    k_a_lin: float = 0.2
    k_a_rot: float = 0.5
    k_direct: float = 2.0
    v_max: float = 0.3
    w_max: float = 0.6
    heading_tol: float = math.radians(10.0)
    goal_in_robot_frame: bool = True

    def __post_init__(self):
        for name in ("tau_ee", "tau_goal", "tau_vel", "tau_p", "tau_direct", "delta_grasp", "k_e_lin",
                     "k_e_rot", "k_a_lin", "k_a_rot", "k_direct", "v_max", "w_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.tau_goal < self.tau_direct:
            raise ValueError("tau_goal must be smaller than tau_direct")


class TaskPhase(enum.Enum):
    IDLE = "Idle"
    NAVIGATE = "Navigate"
    APPROACH_PICKUP = "ApproachPickup"
    ALIGN_BASE = "AlignBase"
    GRASP = "Grasp"
    CARRY_COMPLIANT = "CarryCompliant"
    DIRECT_APPROACH = "DirectApproach"
    PLACE = "Place"
    CHAIR_FETCH = "ChairFetch"
    CHAIR_PUSH = "ChairPush"
    RETURN_TO_STANDBY = "ReturnToStandby"


P = TaskPhase
LEGAL_TRANSITIONS = {
    P.IDLE: {P.NAVIGATE, P.APPROACH_PICKUP, P.CHAIR_FETCH, P.RETURN_TO_STANDBY},
    P.NAVIGATE: {P.IDLE},
    P.APPROACH_PICKUP: {P.ALIGN_BASE, P.IDLE, P.RETURN_TO_STANDBY},
    P.ALIGN_BASE: {P.GRASP, P.APPROACH_PICKUP, P.CHAIR_FETCH, P.IDLE},
    P.GRASP: {P.CARRY_COMPLIANT, P.CHAIR_PUSH, P.ALIGN_BASE},
    P.CARRY_COMPLIANT: {P.DIRECT_APPROACH, P.PLACE},
    P.DIRECT_APPROACH: {P.CARRY_COMPLIANT, P.PLACE},
    P.PLACE: {P.APPROACH_PICKUP, P.CHAIR_FETCH, P.RETURN_TO_STANDBY, P.IDLE},
    P.CHAIR_FETCH: {P.ALIGN_BASE, P.IDLE, P.RETURN_TO_STANDBY},
    P.CHAIR_PUSH: {P.PLACE, P.IDLE},
    P.RETURN_TO_STANDBY: {P.IDLE, P.APPROACH_PICKUP, P.CHAIR_FETCH},
}


def check_transition(src: TaskPhase, dst: TaskPhase) -> None:
    if dst is not src and dst not in LEGAL_TRANSITIONS[src]:
        raise ValueError(f"illegal phase transition {src.value} -> {dst.value}")


# ---------------------------------------------------------------- Algorithm 2

def _xy(obj) -> tuple:
    if hasattr(obj, "root"):
        return obj.root
    if hasattr(obj, "pose"):
        return (obj.pose.x, obj.pose.y)
    return (obj[0], obj[1])


def select_tables(objects, area: PickupArea, exclude=()) -> list:
    """Tables whose center lies inside the pickup area polygon."""
    tables = [o for o in objects if o.cls == "table" and o.id not in exclude]
    if not tables:
        return []
    pts = np.array([_xy(o) for o in tables], dtype=float)
    inside = points_in_polygon(pts, area.polygon.array)
    return [o for o, ok in zip(tables, inside) if ok]


def select_person(persons, area: PickupArea, tau_p: float):
    """Person closest to the area center within ``tau_p``; ties go to the lower id."""
    if tau_p <= 0:
        raise ValueError("tau_p must be positive")
    cx, cy = area.center
    best = None
    for p in persons:
        x, y = _xy(p)
        d = math.hypot(x - cx, y - cy)
        if d <= tau_p and (best is None or (d, p.id) < best[0]):
            best = ((d, p.id), p)
    return None if best is None else best[1]


def sign0(v: float) -> int:
    return -1 if v < 0 else 1


@dataclass(frozen=True)
class PickupGoal:
    table_id: int
    pose: Pose2
    side_sign: int


def anticipate_pickup_pose(person, tables, params: CarryParams = CarryParams()) -> PickupGoal:
    """Base pose for grasping the table closest to ``person`` from the opposite side.

    The goal sits ``delta_grasp`` along the table long axis on the side given
    by the sign of (table - person) . n_t (zero counts as +1), facing the
    table center.
    """
    if not tables:
        raise ValueError("no table selected")
    px, py = _xy(person)
    table = min(tables, key=lambda t: (math.hypot(t.pose.x - px, t.pose.y - py), t.id))
    xt, yt, th = table.pose.x, table.pose.y, table.pose.theta
    nt = (math.cos(th), math.sin(th))
    npx, npy = xt - px, yt - py
    s = sign0(npx * nt[0] + npy * nt[1])
    gx, gy = xt + s * params.delta_grasp * nt[0], yt + s * params.delta_grasp * nt[1]
    return PickupGoal(table.id, Pose2(gx, gy, math.atan2(yt - gy, xt - gx)), s)


def goal_reached(goal: Pose2, robot_pose: Pose2, robot_vel, params: CarryParams = CarryParams()) -> bool:
    speed = robot_vel.linear_speed if isinstance(robot_vel, Velocity2) else math.hypot(robot_vel[0], robot_vel[1])
    return (robot_pose.distance_to(goal) < params.tau_goal and speed < params.tau_vel
            and abs(angle_diff(goal.theta, robot_pose.theta)) < params.heading_tol)


# ---------------------------------------------------------------- base alignment

ALIGN_POS_TOL = 0.1
ALIGN_ANG_TOL = math.radians(5.0)
ALIGN_TIMEOUT = 15.0


@dataclass(frozen=True)
class AlignResult:
    aligned: bool
    command: Velocity2


def align_base(robot_pose: Pose2, target: Pose2, gain: float = 0.8, w_gain: float = 1.5,
               v_max: float = 0.25, w_max: float = 0.5, elapsed: float = 0.0,
               pos_tol: float = ALIGN_POS_TOL, ang_tol: float = ALIGN_ANG_TOL) -> AlignResult:
    """Proportional servo of the base onto the grasp-approach pose ``target``."""
    if elapsed > ALIGN_TIMEOUT:
        raise AlignmentTimeout()
    ex, ey = target.x - robot_pose.x, target.y - robot_pose.y
    eth = angle_diff(target.theta, robot_pose.theta)
    if math.hypot(ex, ey) < pos_tol and abs(eth) < ang_tol:
        return AlignResult(True, Velocity2())
    lx, ly = rotate((ex, ey), -robot_pose.theta)
    return AlignResult(False, Velocity2(gain * lx, gain * ly, w_gain * eth).clamped(v_max, w_max))


# ---------------------------------------------------------------- Algorithm 3

NOMINAL_TABLE_GRASP = Pose2(0.9, 0.0, 0.0)


def placement_pose(target: Pose2, grasp_offset: Pose2, robot_heading: Optional[float] = None,
                   symmetric: bool = True) -> Pose2:
    """Robot pose that puts the carried object (held at ``grasp_offset``) onto ``target``.

    For half-turn symmetric objects both target yaws are valid; the one whose
    robot heading is closer to ``robot_heading`` wins.
    """
    inv = grasp_offset.inverse()
    cands = [target.compose(inv)]
    if symmetric:
        cands.append(Pose2(target.x, target.y, target.theta + math.pi).compose(inv))
    if robot_heading is None or len(cands) == 1:
        return cands[0]
    return min(cands, key=lambda p: abs(angle_diff(p.theta, robot_heading)))


def update_goal(layout: Layout, robot_pose: Pose2, params: CarryParams = CarryParams(), cls: str = "table",
                grasp_offset: Optional[Pose2] = None):
    """Nearest unoccupied layout entry of ``cls`` and the robot pose that places the object there."""
    idx = layout.unoccupied(cls)
    if not idx:
        raise LayoutComplete()
    best = min(idx, key=lambda i: (robot_pose.distance_to(layout.entries[i].target), i))
    offset = grasp_offset if grasp_offset is not None else Pose2(params.delta_grasp, 0.0, 0.0)
    goal = placement_pose(layout.entries[best].target, offset, robot_pose.theta, symmetric=(cls == "table"))
    return best, goal


@dataclass(frozen=True)
class CarryCommand:
    velocity: Velocity2
    reached: bool = False
    direct: bool = False


def carry_velocity(ee_disp, goal_vec, heading_err: float, params: CarryParams = CarryParams(),
                   robot_heading: float = 0.0, anticipation: bool = True) -> CarryCommand:
    """Base velocity from operator end-effector displacement blended with goal attraction.

    ``ee_disp`` is in the robot frame, ``goal_vec`` in the world frame (it is
    rotated by ``-robot_heading`` when ``params.goal_in_robot_frame``). With
    ``anticipation`` off only the displacement term drives the base.
    """
    dx, dy = float(ee_disp[0]), float(ee_disp[1])
    gx, gy = float(goal_vec[0]), float(goal_vec[1])
    dist = math.hypot(gx, gy)
    if anticipation and dist < params.tau_goal:
        return CarryCommand(Velocity2(), reached=True)
    ee_x = ee_y = ee_w = 0.0
    forward = abs(dx) > params.tau_ee
    if forward:
        ee_x = params.k_e_lin * dx
    if abs(dy) > params.tau_ee:
        if forward:
            ee_w = params.k_e_rot * dy
        else:
            ee_y = params.k_e_lin * dy
    v_ee = Velocity2(ee_x, ee_y, ee_w)
    if not anticipation:
        return CarryCommand(v_ee.clamped(params.v_max, params.w_max))
    if params.goal_in_robot_frame:
        gx, gy = rotate((gx, gy), -robot_heading)
    v_a = Velocity2(params.k_a_lin * gx, params.k_a_lin * gy, params.k_a_rot * heading_err)
    if dist > params.tau_direct or forward:
        v = v_ee + v_a
        direct = False
    else:
        v = v_a.scaled(params.k_direct)
        direct = True
    return CarryCommand(v.clamped(params.v_max, params.w_max), direct=direct)


# ---------------------------------------------------------------- placement

@dataclass(frozen=True)
class PlacementResult:
    layout: Layout
    entry: int
    translation_error: float
    angular_error: float   # radians, folded for symmetric objects
    verified: bool


def placement_errors(obj_pose: Pose2, target: Pose2, symmetric: bool) -> tuple:
    trans = obj_pose.distance_to(target)
    ang = angle_diff(obj_pose.theta, target.theta)
    if symmetric:
        ang = math.remainder(ang, math.pi)
    return trans, abs(ang)


def place_object(layout: Layout, entry: int, obj_pose: Pose2, cls: str, params: CarryParams = CarryParams(),
                 ang_tol: float = math.radians(3.0), strict: bool = False) -> PlacementResult:
    """Mark ``entry`` occupied and verify the released object's pose against it."""
    target = layout.entries[entry].target
    trans, ang = placement_errors(obj_pose, target, cls == "table")
    verified = trans <= params.tau_goal and ang <= ang_tol
    new_layout = layout.mark_occupied(entry)
    if strict and not verified:
        raise PlacementVerificationError()
    return PlacementResult(new_layout, entry, trans, ang, verified)
