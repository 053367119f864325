"""Ground-truth discrete-time world: robot base, scripted humans, furniture."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from .geometry import (LETHAL, Grid2, Polygon2, Pose2, Velocity2, angle_diff, fold_pi,
                       transform_points_from_frame)

DT = 0.05
ROBOT_V_MAX = 0.5
ROBOT_W_MAX = 1.0
EE_REACH = 0.9
HUMAN_MAX_SPEED = 2.0
PERSON_RADIUS = 0.25

TABLE_SIZE = (1.2, 0.8)
CHAIR_SIZE = 0.45

# 17-point skeleton (COCO order) projected to the ground plane, offsets from the root in meters.
SKELETON = np.array([
    (0.10, 0.00),                  # nose
    (0.09, 0.03), (0.09, -0.03),   # eyes
    (0.05, 0.07), (0.05, -0.07),   # ears
    (0.00, 0.20), (0.00, -0.20),   # shoulders
    (0.02, 0.25), (0.02, -0.25),   # elbows
    (0.06, 0.24), (0.06, -0.24),   # wrists
    (0.00, 0.12), (0.00, -0.12),   # hips
    (0.03, 0.12), (0.03, -0.12),   # knees
    (0.00, 0.12), (0.00, -0.12),   # ankles
])
NUM_KEYPOINTS = len(SKELETON)


class WorldError(RuntimeError):
    pass


# ---------------------------------------------------------------- human policies

@dataclass(frozen=True)
class Idle:
    pass


@dataclass(frozen=True)
class Waypoint:
    points: tuple
    speed: float = 1.0
    start_time: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "points", tuple((float(x), float(y)) for x, y in self.points))
        if not 0.0 <= self.speed <= HUMAN_MAX_SPEED:
            raise WorldError(f"human speed {self.speed} outside [0, {HUMAN_MAX_SPEED}]")


@dataclass(frozen=True)
class Operator:
    """Human co-carrying ``object_id`` who steers it toward ``intent``."""

    intent: Pose2
    object_id: int
    gain: float = 0.12
    cap: float = 0.12
    stop_radius: float = 0.15


Policy = Union[Idle, Waypoint, Operator]


@dataclass(frozen=True)
class HumanAgent:
    id: int
    root: tuple
    velocity: tuple = (0.0, 0.0)
    policy: Policy = Idle()
    waypoint_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "root", (float(self.root[0]), float(self.root[1])))
        object.__setattr__(self, "velocity", (float(self.velocity[0]), float(self.velocity[1])))

    @property
    def keypoints(self) -> np.ndarray:
        return SKELETON + np.asarray(self.root)


@dataclass(frozen=True)
class FurnitureObject:
    id: int
    cls: str
    pose: Pose2
    carried_by: str = "none"

    def __post_init__(self):
        if self.cls not in ("table", "chair"):
            raise WorldError(f"unknown furniture class {self.cls!r}")
        object.__setattr__(self, "pose", canonical_pose(self.cls, self.pose))

    @property
    def footprint(self) -> Polygon2:
        return footprint_for(self.cls)

    def world_footprint(self) -> np.ndarray:
        return transform_points_from_frame(self.footprint.array, self.pose)


def footprint_for(cls: str) -> Polygon2:
    if cls == "table":
        return Polygon2.rectangle(*TABLE_SIZE)
    return Polygon2.rectangle(CHAIR_SIZE, CHAIR_SIZE)


def canonical_pose(cls: str, pose: Pose2) -> Pose2:
    """Tables are reported with yaw in [0, pi) because of their half-turn symmetry."""
    if cls == "table":
        return Pose2(pose.x, pose.y, fold_pi(pose.theta))
    return pose


@dataclass(frozen=True)
class RobotBody:
    pose: Pose2 = Pose2()
    velocity: Velocity2 = Velocity2()
    footprint_radius: float = 0.27
    ee_init: tuple = (0.45, 0.0)
    ee: tuple = (0.45, 0.0)
    attached_object: Optional[int] = None
    attach_offset: Optional[Pose2] = None  # object pose in the robot frame while attached

    @property
    def ee_displacement(self) -> tuple[float, float]:
        return (self.ee[0] - self.ee_init[0], self.ee[1] - self.ee_init[1])


@dataclass(frozen=True)
class WorldState:
    time: float
    robot: RobotBody
    humans: tuple
    objects: tuple
    static_map: Grid2 = field(repr=False, compare=False, default=None)
    tick: int = 0

    def object_by_id(self, oid: int) -> FurnitureObject:
        for o in self.objects:
            if o.id == oid:
                return o
        raise WorldError(f"no object with id {oid}")

    def human_by_id(self, hid: int) -> HumanAgent:
        for h in self.humans:
            if h.id == hid:
                return h
        raise WorldError(f"no human with id {hid}")

    def with_human(self, human: HumanAgent) -> "WorldState":
        return replace(self, humans=tuple(human if h.id == human.id else h for h in self.humans))


# ---------------------------------------------------------------- kinematics

def integrate_twist(pose: Pose2, cmd: Velocity2, dt: float) -> Pose2:
    """Body-frame twist integrated with the midpoint heading."""
    mid = pose.theta + 0.5 * cmd.omega * dt
    c, s = math.cos(mid), math.sin(mid)
    return Pose2(pose.x + (c * cmd.vx - s * cmd.vy) * dt,
                 pose.y + (s * cmd.vx + c * cmd.vy) * dt,
                 pose.theta + cmd.omega * dt)


_RING = np.array([(math.cos(a), math.sin(a)) for a in np.linspace(0, 2 * math.pi, 16, endpoint=False)])


def _hits_lethal(grid: Optional[Grid2], points: np.ndarray) -> bool:
    if grid is None:
        return False
    res, (ox, oy) = grid.resolution, grid.origin
    ix = np.floor((points[:, 0] - ox) / res).astype(int)
    iy = np.floor((points[:, 1] - oy) / res).astype(int)
    inside = (ix >= 0) & (iy >= 0) & (ix < grid.width) & (iy < grid.height)
    if not inside.all():
        return True
    return bool((grid.cells[iy, ix] >= LETHAL).any())


def _object_probe_points(cls: str, pose: Pose2) -> np.ndarray:
    fp = footprint_for(cls).array
    mids = 0.5 * (fp + np.roll(fp, -1, axis=0))
    return transform_points_from_frame(np.vstack((fp * 0.98, mids * 0.98)), pose)


def _robot_probe_points(robot: RobotBody, pose: Pose2) -> np.ndarray:
    return np.vstack(([pose.x, pose.y], _RING * robot.footprint_radius + (pose.x, pose.y)))


def robot_collides(state: WorldState, pose: Pose2) -> bool:
    robot = state.robot
    if _hits_lethal(state.static_map, _robot_probe_points(robot, pose)):
        return True
    if robot.attached_object is not None:
        obj = state.object_by_id(robot.attached_object)
        if _hits_lethal(state.static_map, _object_probe_points(obj.cls, pose.compose(robot.attach_offset))):
            return True
    return False


def operator_displacement(agent: HumanAgent, robot: RobotBody, carried: FurnitureObject) -> tuple[float, float]:
    """End-effector displacement the operator applies, in the robot frame.

    Proportional to the vector from the carried object to the operator's
    intended position, capped in norm; zero inside the stop radius.
    """
    pol = agent.policy
    if not isinstance(pol, Operator):
        raise WorldError("not an operator")
    if pol.object_id != carried.id:
        raise WorldError("operator does not hold the carried object")
    dx = pol.intent.x - carried.pose.x
    dy = pol.intent.y - carried.pose.y
    if math.hypot(dx, dy) < pol.stop_radius:
        return (0.0, 0.0)
    c, s = math.cos(robot.pose.theta), math.sin(robot.pose.theta)
    lx, ly = pol.gain * (c * dx + s * dy), pol.gain * (-s * dx + c * dy)
    n = math.hypot(lx, ly)
    if n > pol.cap:
        lx, ly = lx * pol.cap / n, ly * pol.cap / n
    return (lx, ly)


def _step_human(h: HumanAgent, t: float, dt: float, grid: Optional[Grid2], objects) -> HumanAgent:
    pol = h.policy
    if isinstance(pol, Waypoint):
        if t < pol.start_time or h.waypoint_index >= len(pol.points):
            return replace(h, velocity=(0.0, 0.0))
        budget = pol.speed * dt
        x, y = h.root
        idx = h.waypoint_index
        while budget > 1e-12 and idx < len(pol.points):
            tx, ty = pol.points[idx]
            d = math.hypot(tx - x, ty - y)
            if d <= budget:
                x, y, budget = tx, ty, budget - d
                idx += 1
            else:
                x += (tx - x) * budget / d
                y += (ty - y) * budget / d
                budget = 0.0
        if _hits_lethal(grid, np.array([[x, y]])):
            return replace(h, velocity=(0.0, 0.0))
        vel = ((x - h.root[0]) / dt, (y - h.root[1]) / dt)
        return replace(h, root=(x, y), velocity=vel, waypoint_index=idx)
    if isinstance(pol, Operator):
        obj = next((o for o in objects if o.id == pol.object_id), None)
        if obj is None:
            return replace(h, velocity=(0.0, 0.0))
        # stays at the far end of the carried object
        ext = TABLE_SIZE[0] / 2 + 0.3 if obj.cls == "table" else CHAIR_SIZE / 2 + 0.3
        ux, uy = h.root[0] - obj.pose.x, h.root[1] - obj.pose.y
        n = math.hypot(ux, uy) or 1.0
        x, y = obj.pose.x + ext * ux / n, obj.pose.y + ext * uy / n
        step = math.hypot(x - h.root[0], y - h.root[1])
        lim = HUMAN_MAX_SPEED * dt
        if step > lim:
            x = h.root[0] + (x - h.root[0]) * lim / step
            y = h.root[1] + (y - h.root[1]) * lim / step
        return replace(h, root=(x, y), velocity=((x - h.root[0]) / dt, (y - h.root[1]) / dt))
    return replace(h, velocity=(0.0, 0.0))


def step_world(state: WorldState, robot_cmd: Velocity2, dt: float = DT) -> WorldState:
    """Advance the world by one tick.

    The command is clamped to the base limits. A robot motion that would put
    the base or the carried object into a lethal static cell is shortened by
    bisection to the last collision-free fraction of the step.
    """
    robot = state.robot
    cmd = robot_cmd.clamped(ROBOT_V_MAX, ROBOT_W_MAX)
    new_pose = integrate_twist(robot.pose, cmd, dt)
    if robot_collides(state, new_pose):
        lo, hi = 0.0, 1.0
        for _ in range(12):
            mid = 0.5 * (lo + hi)
            if robot_collides(state, integrate_twist(robot.pose, cmd, dt * mid)):
                hi = mid
            else:
                lo = mid
        new_pose = integrate_twist(robot.pose, cmd, dt * lo)
        cmd = Velocity2()
    robot = replace(robot, pose=new_pose, velocity=cmd)

    objects = state.objects
    if robot.attached_object is not None and new_pose != state.robot.pose:
        carried_pose = new_pose.compose(robot.attach_offset)
        objects = tuple(replace(o, pose=canonical_pose(o.cls, carried_pose)) if o.id == robot.attached_object else o
                        for o in objects)

    t = state.time
    humans = tuple(_step_human(h, t, dt, state.static_map, objects) for h in state.humans)

    if robot.attached_object is not None:
        carried = next(o for o in objects if o.id == robot.attached_object)
        disp = (0.0, 0.0)
        for h in humans:
            if isinstance(h.policy, Operator) and h.policy.object_id == carried.id:
                disp = operator_displacement(h, robot, carried)
                break
        robot = replace(robot, ee=(robot.ee_init[0] + disp[0], robot.ee_init[1] + disp[1]))

    return replace(state, time=(state.tick + 1) * dt, tick=state.tick + 1, robot=robot, humans=humans,
                   objects=objects)


# ---------------------------------------------------------------- grasping

def grasp_robot_pose(obj: FurnitureObject, grasp_side: int, delta_grasp: float = 0.9,
                     chair_standoff: float = 0.55) -> Pose2:
    """Base pose from which ``obj`` is grasped.

    Tables: offset by ``grasp_side * delta_grasp`` along the long axis, facing
    the table center. Chairs: behind the backrest (object -x side), facing +x.
    """
    p = obj.pose
    if obj.cls == "table":
        nx, ny = math.cos(p.theta), math.sin(p.theta)
        gx, gy = p.x + grasp_side * delta_grasp * nx, p.y + grasp_side * delta_grasp * ny
        return Pose2(gx, gy, math.atan2(p.y - gy, p.x - gx))
    return p.compose(Pose2(-chair_standoff, 0.0, 0.0))


def attach_object(state: WorldState, object_id: int, grasp_side: int = 1, delta_grasp: float = 0.9,
                  pos_tol: float = 0.15, ang_tol: float = math.radians(10.0)) -> WorldState:
    if state.robot.attached_object is not None:
        raise WorldError("robot already carries an object")
    obj = state.object_by_id(object_id)
    want = grasp_robot_pose(obj, grasp_side, delta_grasp)
    pose = state.robot.pose
    if pose.distance_to(want) > pos_tol or abs(angle_diff(pose.theta, want.theta)) > ang_tol:
        raise WorldError("grasp alignment failed")
    offset = pose.between(obj.pose)
    robot = replace(state.robot, attached_object=object_id, attach_offset=offset)
    objects = tuple(replace(o, carried_by="robot") if o.id == object_id else o for o in state.objects)
    return replace(state, robot=robot, objects=objects)


def detach_object(state: WorldState) -> WorldState:
    robot = state.robot
    if robot.attached_object is None:
        return state
    oid = robot.attached_object
    objects = tuple(replace(o, carried_by="none") if o.id == oid else o for o in state.objects)
    robot = replace(robot, attached_object=None, attach_offset=None, ee=robot.ee_init)
    return replace(state, robot=robot, objects=objects)


def set_carried_by(state: WorldState, object_id: int, carried_by: str) -> WorldState:
    return replace(state, objects=tuple(replace(o, carried_by=carried_by) if o.id == object_id else o
                                        for o in state.objects))
