"""Robot-side task state machine: navigation, pickup, compliant carrying, placement, chair relocation."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .fusion import RobotState, correct_robot_localization
from .geometry import INSCRIBED, Pose2, Velocity2, angle_diff, rotate
from .nav import AnticipationParams, CostMap, NoPathError, build_virtual_cloud, filter_outlier, path_cost, \
    plan_path, update_costmap
from .perception import chair_grasp_pair, table_grasp_pair
from .tasks import (AlignmentTimeout, CarryParams, ChairTaskFailed, Layout, LayoutComplete,
                    PickupArea, TaskPhase, align_base, carry_velocity, check_transition, goal_reached,
                    place_object, placement_errors, update_goal)
from .world import DT, FurnitureObject, grasp_robot_pose, integrate_twist

P = TaskPhase
NAV_PHASES = {P.NAVIGATE, P.APPROACH_PICKUP, P.CHAIR_FETCH, P.CHAIR_PUSH, P.RETURN_TO_STANDBY}


@dataclass(frozen=True)
class ControllerConfig:
    carry: CarryParams = CarryParams()
    nav: AnticipationParams = AnticipationParams()
    anticipation: bool = True
    nav_speed: float = 0.5
    lookahead: float = 0.5
    fine_radius: float = 0.8
    fine_speed: float = 0.3
    accel: float = 1.0              # m/s^2
    ang_accel: float = 2.0          # rad/s^2
    grasp_duration: float = 3.0
    place_duration: float = 3.0
    settle_time: float = 1.0        # off-condition: stopped operator confirms the placement
    replan_period: float = 1.0
    deviation_threshold: float = 0.1
    switch_ratio: float = 0.9       # a fresh plan replaces a still-free path only if this much cheaper
    place_heading_tol: float = math.radians(1.5)
    chair_retry_delay: float = 1.0
    dt: float = DT


@dataclass(frozen=True)
class NavigateMission:
    goal: Pose2
    tolerance: float = 0.15


@dataclass(frozen=True)
class FurnishMission:
    layout: Layout
    table_area: Optional[PickupArea]
    chair_area: Optional[PickupArea]
    standby: Pose2


@dataclass(frozen=True)
class Proprio:
    """What the robot knows about itself without external feedback."""

    odom_velocity: Velocity2          # measured body twist (possibly drifting)
    velocity: Velocity2               # applied twist
    ee_disp: tuple = (0.0, 0.0)
    attached: Optional[int] = None    # ground-truth attach state reported by the gripper


@dataclass(frozen=True)
class HumanInput:
    """Touchscreen input in the no-anticipation condition: which table, grasped from which end."""

    table_pose: Pose2
    grasp_point: tuple


@dataclass
class ControlOutput:
    cmd: Velocity2
    actions: list = field(default_factory=list)
    events: list = field(default_factory=list)


@dataclass
class Placement:
    entry: int
    cls: str
    track_id: int
    believed_error: tuple
    verified: bool
    time: float


class RobotController:
    """Single control loop consuming the latest feedback snapshot each tick."""

    def __init__(self, static_map, mission, start_pose: Pose2, config: ControllerConfig = ControllerConfig()):
        self.cfg = config
        self.mission = mission
        self.costmap = CostMap.from_static(static_map, config.nav)
        self.est = RobotState(start_pose)
        self.history: deque = deque(maxlen=64)
        self.layout: Optional[Layout] = mission.layout if isinstance(mission, FurnishMission) else None
        self.phase = P.IDLE
        self.payload: dict = {}
        self.feedback = None
        self.last_robot_stamp = -math.inf
        self.person_reads = 0
        self.path = None
        self.path_goal: Optional[Pose2] = None
        self.path_time = -math.inf
        self.path_dirty = True
        self.prev_cmd = Velocity2()
        self.inputs: list = []
        self.placements: list[Placement] = []
        self.completed = False
        self.failed: Optional[str] = None
        self.deviation_time: Optional[float] = None
        self.nav_start: Optional[Pose2] = None
        self.events: list = []
        self.time = 0.0
        self.done_tables: set = set()

    # ------------------------------------------------------------ inputs

    def _persons(self):
        self.person_reads += 1
        return self.feedback.persons if self.feedback is not None else ()

    def _objects(self):
        return self.feedback.objects if self.feedback is not None else ()

    def _track(self, tid):
        for o in self._objects():
            if o.id == tid:
                return o
        return None

    def _nearest_track(self, cls, pose: Pose2, max_dist=0.5):
        best = None
        for o in self._objects():
            if o.cls != cls or o.id in self.done_tables:
                continue
            d = math.hypot(o.state[0] - pose.x, o.state[1] - pose.y)
            if d <= max_dist and (best is None or (d, o.id) < best[0]):
                best = ((d, o.id), o)
        return None if best is None else best[1]

    def _localize(self, fb, now):
        if fb.robot_pose is None or fb.robot_stamp <= self.last_robot_stamp:
            return
        self.last_robot_stamp = fb.robot_stamp
        external = fb.robot_pose
        # carry the external fix forward by the odometry accumulated since it was taken
        past = None
        for t, pose in self.history:
            if t <= fb.robot_stamp + 1e-9:
                past = pose
        if past is not None:
            external = external.compose(past.between(self.est.pose))
        self.est = correct_robot_localization(self.est, external, fb.robot_stamp, now)

    # ------------------------------------------------------------ phase handling

    def _goto(self, phase: TaskPhase, **payload):
        check_transition(self.phase, phase)
        if phase is not self.phase:
            self.events.append(f"phase {self.phase.value}->{phase.value}")
        self.phase = phase
        self.payload = dict(payload, since=self.time)
        self.path = None
        self.path_goal = None

    def _refresh_costmap(self, scan):
        cloud = ()
        if self.cfg.anticipation and self.feedback is not None:
            persons = filter_outlier(self._persons(), self.est.pose, self.cfg.nav)
            cloud = build_virtual_cloud(persons, self.est.pose, self.cfg.nav)
        new = update_costmap(self.costmap, scan, cloud, self.est.pose, self.time)
        changed = new.combined != self.costmap.combined
        if self.path is None:
            self.path_dirty = self.path_dirty or bool(changed.any())
        else:
            # changes off the current path wait for the periodic replan
            cells = self.path.cells
            self.path_dirty = self.path_dirty or bool(changed[cells[:, 1], cells[:, 0]].any())
        self.costmap = new

    # ------------------------------------------------------------ motion primitives

    def _servo(self, goal: Pose2, v_max: float, w_max: float = 0.6) -> Velocity2:
        pose = self.est.pose
        lx, ly = rotate((goal.x - pose.x, goal.y - pose.y), -pose.theta)
        return Velocity2(1.0 * lx, 1.0 * ly, 1.5 * angle_diff(goal.theta, pose.theta)).clamped(v_max, w_max)

    def _remaining_cost(self, goal: Pose2):
        """Cost of the rest of the current path, or None if it is gone or blocked."""
        if self.path is None or self.path_goal is None or self.path_goal.distance_to(goal) > 0.1:
            return None
        pose = self.est.pose
        wp = self.path.waypoints
        i = int(np.argmin(np.hypot(wp[:, 0] - pose.x, wp[:, 1] - pose.y)))
        cells = self.path.cells[i:]
        cost = self.costmap.combined
        if np.any(cost[cells[:, 1], cells[:, 0]] >= INSCRIBED):
            return None
        return path_cost(cost, cells, self.costmap.grid.resolution)

    def _plan(self, goal: Pose2):
        old = self._remaining_cost(goal)
        try:
            new = plan_path(self.costmap, self.est.pose, goal)
        except NoPathError:
            new = None
        # hysteresis: near-equal alternatives would otherwise flip every replan
        if new is not None and (old is None or new.cost < self.cfg.switch_ratio * old):
            self.path = new
        elif new is None:
            self.path = None
        self.path_goal = goal
        self.path_time = self.time
        self.path_dirty = False
        if self.phase is P.NAVIGATE and self.deviation_time is None:
            if self.path is None or self._path_deviation(self.path) > self.cfg.deviation_threshold:
                self.deviation_time = self.time
                self.events.append("path deviates from straight line")
        return self.path

    def _path_deviation(self, path) -> float:
        a = np.array(self.nav_start.xy)
        b = np.array(self.mission.goal.xy)
        ab = b - a
        n = np.linalg.norm(ab)
        if n < 1e-9:
            return 0.0
        rel = path.waypoints - a
        return float(np.max(np.abs(rel[:, 0] * ab[1] - rel[:, 1] * ab[0]) / n))

    def _follow(self, goal: Pose2, v_max: float) -> Velocity2:
        """Plan-and-follow toward ``goal``; servo directly once inside the fine radius."""
        pose = self.est.pose
        dist = pose.distance_to(goal)
        if dist < self.cfg.fine_radius:
            return self._servo(goal, min(v_max, self.cfg.fine_speed))
        need = (self.path is None or self.path_goal is None or self.path_dirty
                or self.path_goal.distance_to(goal) > 0.1
                or self.time - self.path_time >= self.cfg.replan_period)
        if need:
            self._plan(goal)
        if self.path is None:
            return Velocity2()
        wp = self.path.waypoints
        d = np.hypot(wp[:, 0] - pose.x, wp[:, 1] - pose.y)
        i = int(np.argmin(d))
        ahead = np.nonzero(d[i:] >= self.cfg.lookahead)[0]
        carrot = wp[i + ahead[0]] if len(ahead) else wp[-1]
        dx, dy = carrot[0] - pose.x, carrot[1] - pose.y
        n = math.hypot(dx, dy)
        remaining = float(np.hypot(np.diff(wp[i:, 0]), np.diff(wp[i:, 1])).sum()) + d[i]
        speed = min(v_max, 0.8 * remaining + 0.05)
        if n < 1e-9:
            return Velocity2()
        heading = math.atan2(dy, dx) if remaining > self.cfg.fine_radius else goal.theta
        lx, ly = rotate((dx / n * speed, dy / n * speed), -pose.theta)
        return Velocity2(lx, ly, 1.5 * angle_diff(heading, pose.theta)).clamped(v_max, 1.0)

    def _limit(self, cmd: Velocity2) -> Velocity2:
        a, b = self.cfg.accel * self.cfg.dt, self.cfg.ang_accel * self.cfg.dt
        p = self.prev_cmd
        dvx, dvy = cmd.vx - p.vx, cmd.vy - p.vy
        n = math.hypot(dvx, dvy)
        if n > a:
            dvx, dvy = dvx * a / n, dvy * a / n
        dw = max(-b, min(b, cmd.omega - p.omega))
        return Velocity2(p.vx + dvx, p.vy + dvy, p.omega + dw)

    # ------------------------------------------------------------ task helpers

    def _grasp_pose(self, cls, pose: Pose2, ref) -> Pose2:
        """Grasp base pose on the end of the object nearest ``ref``.

        Sides are re-derived from the current track yaw every time; a table
        yaw folded across 0/pi would otherwise swap the ends.
        """
        obj = FurnitureObject(-1, cls, pose)
        if cls != "table":
            return grasp_robot_pose(obj, 1, self.cfg.carry.delta_grasp)
        cands = [grasp_robot_pose(obj, s, self.cfg.carry.delta_grasp) for s in (1, -1)]
        return min(cands, key=lambda p: math.hypot(p.x - ref[0], p.y - ref[1]))

    def _tables_remaining(self) -> bool:
        if self.layout is None or not self.layout.unoccupied("table"):
            return False
        area = self.mission.table_area
        return area is not None and any(o.cls == "table" and o.id not in self.done_tables and area.contains(o.pose.xy)
                                        for o in self._objects())

    def _chair_candidate(self):
        if self.layout is None or not self.layout.unoccupied("chair") or self.mission.chair_area is None:
            return None
        area = self.mission.chair_area
        chairs = [o for o in self._objects() if o.cls == "chair" and o.id not in self.done_tables
                  and area.contains(o.pose.xy)]
        if not chairs:
            return None
        p = self.est.pose
        return min(chairs, key=lambda o: (math.hypot(o.state[0] - p.x, o.state[1] - p.y), o.id))

    def _pickup_request(self):
        """(table pose, side) of the next pickup if one is known, else None."""
        if not self._tables_remaining():
            return None
        if self.cfg.anticipation:
            g = self.feedback.pickup_goal if self.feedback is not None else None
            if g is None:
                return None
            tid, goal, _ = g
            tr = self._track(tid)
            return None if tr is None else (tr.id, goal.xy)
        while self.inputs:
            inp = self.inputs[0]
            tr = self._nearest_track("table", inp.table_pose)
            if tr is None:
                return None
            return tr.id, tuple(inp.grasp_point)
        return None

    def _next_job(self):
        req = self._pickup_request()
        if req is not None:
            if not self.cfg.anticipation:
                self.inputs.pop(0)
            self._goto(P.APPROACH_PICKUP, track=req[0], ref=req[1], cls="table")
            return True
        if self.layout is not None and not self.layout.unoccupied("table") or not self._tables_remaining():
            chair = self._chair_candidate()
            if chair is not None:
                if self._chair_at_target(chair):
                    return True
                self._goto(P.CHAIR_FETCH, track=chair.id, ref=chair.pose.xy, cls="chair", failures=0)
                return True
        return False

    def _chair_at_target(self, chair) -> bool:
        """A chair already standing on a free chair slot completes without motion."""
        for i in self.layout.unoccupied("chair"):
            trans, ang = placement_errors(chair.pose, self.layout.entries[i].target, False)
            if trans <= self.cfg.carry.tau_goal and ang <= math.radians(3.0):
                res = place_object(self.layout, i, chair.pose, "chair", self.cfg.carry)
                self.layout = res.layout
                self.done_tables.add(chair.id)
                self.placements.append(Placement(i, "chair", chair.id, (res.translation_error, res.angular_error),
                                                 res.verified, self.time))
                self.events.append(f"chair {chair.id} already at layout entry {i}")
                self._check_complete()
                return True
        return False

    def _check_complete(self):
        if self.layout is not None and self.layout.complete:
            self.completed = True
            self.events.append("layout complete")

    # ------------------------------------------------------------ main step

    def step(self, t: float, proprio: Proprio, feedback=(), scan=None, inputs=()) -> ControlOutput:
        self.time = t
        self.events = []
        self.est = RobotState(integrate_twist(self.est.pose, proprio.odom_velocity, self.cfg.dt),
                              self.est.velocity, self.est.stale_count)
        for fb in feedback:
            self.feedback = fb
            self._localize(fb, t)
        self.history.append((t, self.est.pose))
        self.inputs.extend(inputs)
        if self.phase in NAV_PHASES and (scan is not None or feedback):
            self._refresh_costmap(scan)
        actions = []
        cmd = Velocity2()
        if not self.completed and self.failed is None:
            cmd, actions = self._dispatch(proprio)
        out = self._limit(cmd)
        self.prev_cmd = out
        return ControlOutput(out, actions, list(self.events))

    def _dispatch(self, proprio: Proprio):
        ph, pay, cfg = self.phase, self.payload, self.cfg
        pose = self.est.pose
        cp = cfg.carry

        if ph is P.IDLE:
            if isinstance(self.mission, NavigateMission):
                if pose.distance_to(self.mission.goal) <= self.mission.tolerance:
                    self.completed = True
                    return Velocity2(), []
                self.nav_start = pose
                self._goto(P.NAVIGATE)
                return self._dispatch(proprio)
            if self.layout is not None and self.layout.complete:
                self._check_complete()
                return Velocity2(), []
            if self._next_job():
                return Velocity2(), []
            return Velocity2(), []

        if ph is P.NAVIGATE:
            goal = self.mission.goal
            if pose.distance_to(goal) <= self.mission.tolerance:
                self._goto(P.IDLE)
                self.completed = True
                return Velocity2(), []
            return self._follow(goal, cfg.nav_speed), []

        if ph in (P.APPROACH_PICKUP, P.CHAIR_FETCH):
            if ph is P.APPROACH_PICKUP and cfg.anticipation and self.feedback is not None \
                    and self.feedback.pickup_goal is not None:
                tid, g, _ = self.feedback.pickup_goal
                if self._track(tid) is not None:
                    if tid != pay["track"] or math.hypot(g.x - pay["ref"][0], g.y - pay["ref"][1]) > 0.5:
                        self.events.append(f"pickup goal switched to track {tid} at ({g.x:.2f}, {g.y:.2f})")
                    pay.update(track=tid, ref=g.xy)
            tr = self._track(pay["track"])
            if tr is None:
                return Velocity2(), []
            goal = self._grasp_pose(pay["cls"], tr.pose, pay["ref"])
            pay["goal"] = goal
            if goal_reached(goal, pose, proprio.velocity, cp):
                self._goto(P.ALIGN_BASE, track=pay["track"], ref=goal.xy, cls=pay["cls"],
                           failures=pay.get("failures", 0))
                return Velocity2(), []
            return self._follow(goal, cfg.nav_speed), []

        if ph is P.ALIGN_BASE:
            tr = self._track(pay["track"])
            if tr is None:
                return Velocity2(), []
            target = self._grasp_pose(pay["cls"], tr.pose, pay["ref"])
            try:
                res = align_base(pose, target, elapsed=self.time - pay["since"])
            except AlignmentTimeout as e:
                self.events.append(str(e))
                back = P.APPROACH_PICKUP if pay["cls"] == "table" else P.CHAIR_FETCH
                self._goto(back, track=pay["track"], ref=pay["ref"], cls=pay["cls"],
                           failures=pay.get("failures", 0))
                return Velocity2(), []
            if res.aligned:
                if pay["cls"] == "table":
                    side = 1 if (target.x - tr.pose.x) * math.cos(tr.pose.theta) + \
                        (target.y - tr.pose.y) * math.sin(tr.pose.theta) > 0 else -1
                    grasp = table_grasp_pair(tr.pose, side)
                else:
                    grasp = chair_grasp_pair(tr.pose)
                self.events.append("grasp points ({:.3f},{:.3f}) ({:.3f},{:.3f})".format(*grasp.left, *grasp.right))
                self._goto(P.GRASP, track=pay["track"], ref=pay["ref"], cls=pay["cls"], obj_pose=tr.pose,
                           grasp_pose=target, issued=False, failures=pay.get("failures", 0))
            return res.command, []

        if ph is P.GRASP:
            if proprio.attached is not None and pay["issued"]:
                offset = pose.between(pay["obj_pose"])
                self.done_tables.add(pay["track"])
                if pay["cls"] == "table":
                    self._goto(P.CARRY_COMPLIANT, track=pay["track"], offset=offset, entry=None,
                               still_since=None)
                else:
                    self._goto(P.CHAIR_PUSH, track=pay["track"], offset=offset, failures=0, fail_time=None)
                return Velocity2(), []
            if pay["issued"]:
                self.events.append("grasp failed")
                self._goto(P.ALIGN_BASE, track=pay["track"], ref=pay["ref"], cls=pay["cls"])
                return Velocity2(), []
            if self.time - pay["since"] >= cfg.grasp_duration - 1e-9:
                pay["issued"] = True
                return Velocity2(), [("attach", pay["obj_pose"], pay["cls"], pay["grasp_pose"])]
            return Velocity2(), []

        if ph in (P.CARRY_COMPLIANT, P.DIRECT_APPROACH):
            return self._carry(proprio)

        if ph is P.CHAIR_PUSH:
            try:
                entry, goal = update_goal(self.layout, pose, cp, "chair", pay["offset"])
            except LayoutComplete as e:
                self.failed = str(e)
                return Velocity2(), []
            pay["entry"] = entry
            if (pose.distance_to(goal) < cp.tau_goal and proprio.velocity.linear_speed < cp.tau_vel
                    and abs(angle_diff(goal.theta, pose.theta)) < cfg.place_heading_tol):
                self._goto(P.PLACE, entry=entry, cls="chair", track=pay["track"], offset=pay["offset"],
                           issued=False)
                return Velocity2(), []
            if pose.distance_to(goal) >= cfg.fine_radius:
                if self.path is None or self.path_dirty or self.time - self.path_time >= cfg.replan_period:
                    if pay["fail_time"] is not None and self.time - pay["fail_time"] < cfg.chair_retry_delay:
                        return Velocity2(), []
                    if self._plan(goal) is None:
                        pay["failures"] += 1
                        pay["fail_time"] = self.time
                        self.events.append(f"chair path planning failed ({pay['failures']})")
                        if pay["failures"] > 1:
                            self.failed = str(ChairTaskFailed())
                            self.events.append(self.failed)
                        return Velocity2(), []
                    pay["failures"] = 0
            return self._follow(goal, cfg.nav_speed * 0.6), []

        if ph is P.PLACE:
            if not pay["issued"]:
                if self.time - pay["since"] >= cfg.place_duration - 1e-9:
                    pay["issued"] = True
                    return Velocity2(), [("detach",)]
                return Velocity2(), []
            believed = pose.compose(pay["offset"])
            res = place_object(self.layout, pay["entry"], believed, pay["cls"], cp)
            self.layout = res.layout
            self.placements.append(Placement(pay["entry"], pay["cls"], pay["track"],
                                             (res.translation_error, res.angular_error), res.verified, self.time))
            if not res.verified:
                self.events.append("placement verification failed")
            self._check_complete()
            if self.completed:
                return Velocity2(), []
            if isinstance(self.mission, FurnishMission):
                self._goto(P.RETURN_TO_STANDBY)
            return Velocity2(), []

        if ph is P.RETURN_TO_STANDBY:
            if self.cfg.anticipation and self._pickup_request() is not None:
                self._goto(P.IDLE)
                self._next_job()
                return Velocity2(), []
            goal = self.mission.standby
            if pose.distance_to(goal) < 0.1 and abs(angle_diff(goal.theta, pose.theta)) < 0.1:
                self._goto(P.IDLE)
                return Velocity2(), []
            return self._follow(goal, cfg.nav_speed), []

        raise RuntimeError(f"unhandled phase {ph}")

    def _carry(self, proprio: Proprio):
        pay, cfg, cp = self.payload, self.cfg, self.cfg.carry
        pose = self.est.pose
        if not cfg.anticipation:
            cmd = carry_velocity(proprio.ee_disp, (0.0, 0.0), 0.0, cp, pose.theta, anticipation=False)
            still = cmd.velocity.linear_speed == 0.0 and cmd.velocity.omega == 0.0
            if pay["entry"] is None:
                pay["entry"] = -1
                self.events.append("look at operator")
            if still and proprio.velocity.linear_speed < cp.tau_vel:
                if pay["still_since"] is None:
                    pay["still_since"] = self.time
                elif self.time - pay["still_since"] >= cfg.settle_time:
                    believed = pose.compose(pay["offset"])
                    idx = self.layout.unoccupied("table")
                    entry = min(idx, key=lambda i: (believed.distance_to(self.layout.entries[i].target), i))
                    self._goto(P.PLACE, entry=entry, cls="table", track=pay["track"], offset=pay["offset"],
                               issued=False)
                    return Velocity2(), []
            else:
                pay["still_since"] = None
            return cmd.velocity, []
        entry, goal = update_goal(self.layout, pose, cp, "table", pay["offset"])
        if entry != pay["entry"]:
            pay["entry"] = entry
            self.events.append(f"look at layout entry {entry}")
        gvec = (goal.x - pose.x, goal.y - pose.y)
        cmd = carry_velocity(proprio.ee_disp, gvec, angle_diff(goal.theta, pose.theta), cp, pose.theta)
        if cmd.reached:
            self._goto(P.PLACE, entry=entry, cls="table", track=pay["track"], offset=pay["offset"], issued=False)
            return Velocity2(), []
        want = P.DIRECT_APPROACH if cmd.direct else P.CARRY_COMPLIANT
        if want is not self.phase:
            self.events.append(f"phase {self.phase.value}->{want.value}")
            self.phase = want
        return cmd.velocity, []
