"""Closed-loop simulation: world -> sensors -> channel -> backend -> feedback -> robot -> world."""
from __future__ import annotations

import hashlib
import json
import math
import zlib
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .controller import (NAV_PHASES, ControllerConfig, FurnishMission, HumanInput, NavigateMission, Proprio,
                         RobotController)
from .fusion import Backend, emit_feedback
from .geometry import Velocity2
from .nav import simulate_lidar, surface_distance
from .scenario import ScenarioConfig
from .sensors import Channel, observe
from .tasks import anticipate_pickup_pose, placement_errors, select_person, select_tables
from .world import (DT, PERSON_RADIUS, TABLE_SIZE, HumanAgent, Idle, Operator, RobotBody, Waypoint, WorldError,
                    WorldState, attach_object, detach_object, grasp_robot_pose, step_world)

PARTNER_STANDOFF = TABLE_SIZE[0] / 2 + 0.35


def _r(v) -> float:
    return round(float(v), 6)


class Partner:
    """Scripted human co-worker: walks to a table, waits for the grasp, steers it to a layout slot."""

    def __init__(self, spec, scenario: ScenarioConfig, rng: np.random.Generator):
        self.id = spec.id
        self.speed = spec.speed + (rng.uniform(-spec.speed_jitter, spec.speed_jitter) if spec.speed_jitter else 0.0)
        self.rest = spec.start
        self.start_time = spec.start_time + (rng.uniform(0.0, spec.start_jitter) if spec.start_jitter else 0.0)
        area = scenario.table_area
        tables = [o.id for o in scenario.objects if o.cls == "table" and area is not None and area.contains(o.pose.xy)]
        self.order = [int(i) for i in rng.permutation(sorted(tables))]
        self.slots = [i for i, e in enumerate(scenario.layout.entries) if e.cls == "table" and not e.occupied]
        self.layout = scenario.layout
        self.filled: set = set()
        self.state = "start"
        self.table: Optional[int] = None
        self.slot: Optional[int] = None
        self.arrivals: list = []        # (time, table id, robot side)
        self.side = 1

    def _choose(self, world: WorldState):
        while self.order:
            tid = self.order.pop(0)
            obj = world.object_by_id(tid)
            free = [i for i in self.slots if i not in self.filled]
            if not free:
                return None
            slot = min(free, key=lambda i: (obj.pose.distance_to(self.layout.entries[i].target), i))
            return tid, slot
        return None

    def update(self, world: WorldState) -> WorldState:
        h = world.human_by_id(self.id)
        t = world.time
        if self.state == "start":
            if t < self.start_time:
                return world
            return self._next_table(world, h)
        if self.state == "to_table":
            if h.waypoint_index >= len(h.policy.points):
                self.state = "wait_grasp"
                self.arrivals.append((t, self.table, -self.side))
            return world
        if self.state == "wait_grasp":
            if world.robot.attached_object == self.table:
                self.state = "carry"
                target = self.layout.entries[self.slot].target
                return world.with_human(replace(h, policy=Operator(target, self.table)))
            return world
        if self.state == "carry":
            if world.robot.attached_object != self.table:
                self.filled.add(self.slot)
                return self._next_table(world, h)
            return world
        return world

    def _next_table(self, world: WorldState, h: HumanAgent) -> WorldState:
        nxt = self._choose(world)
        if nxt is None:
            self.state = "done"
            pol = Waypoint((self.rest,), self.speed, 0.0)
            return world.with_human(replace(h, policy=pol, waypoint_index=0))
        self.table, self.slot = nxt
        obj = world.object_by_id(self.table)
        target = self.layout.entries[self.slot].target
        n = (math.cos(obj.pose.theta), math.sin(obj.pose.theta))
        toward = (target.x - obj.pose.x) * n[0] + (target.y - obj.pose.y) * n[1]
        self.side = 1 if toward >= 0 else -1
        stand = (obj.pose.x + self.side * PARTNER_STANDOFF * n[0], obj.pose.y + self.side * PARTNER_STANDOFF * n[1])
        lead = (stand[0] + self.side * 1.0 * n[0], stand[1] + self.side * 1.0 * n[1])
        self.state = "to_table"
        return world.with_human(replace(h, policy=Waypoint((lead, stand), self.speed, 0.0), waypoint_index=0))


@dataclass
class RunResult:
    scenario_id: str
    seed: int
    anticipation: bool
    completed: bool
    duration: float
    ticks: int
    min_safety: Optional[float]
    avg_safety: Optional[float]
    placements: list                 # dicts: entry, cls, object_id, translation_error, angular_error_deg, verified
    digest: str
    deviation_time: Optional[float] = None
    first_seen_time: Optional[float] = None
    person_reads: int = 0
    failure: Optional[str] = None
    events: list = field(default_factory=list)


def _streams(scenario: ScenarioConfig, seed: int):
    ss = np.random.SeedSequence([int(scenario.seed), int(seed), zlib.crc32(scenario.id.encode())])
    return ss.spawn(6)


def _build_world(scenario: ScenarioConfig, rng: np.random.Generator):
    humans, partners = [], []
    for spec in scenario.humans:
        if spec.role == "walker":
            speed = spec.speed + (rng.uniform(-spec.speed_jitter, spec.speed_jitter) if spec.speed_jitter else 0.0)
            start = spec.start_time + (rng.uniform(-spec.start_jitter, spec.start_jitter) if spec.start_jitter else 0.0)
            pol = Waypoint(spec.waypoints, speed, max(0.0, start))
        else:
            pol = Idle()
        humans.append(HumanAgent(spec.id, spec.start, policy=pol))
    for spec in scenario.humans:
        if spec.role == "partner":
            partners.append(Partner(spec, scenario, rng))
    world = WorldState(0.0, RobotBody(pose=scenario.robot_start), tuple(humans), tuple(scenario.objects),
                       scenario.grid)
    return world, partners


def _mission(scenario: ScenarioConfig):
    if scenario.mission == "navigate":
        return NavigateMission(scenario.nav_goal)
    if scenario.mission == "furnish":
        return FurnishMission(scenario.layout, scenario.table_area, scenario.chair_area, scenario.standby)
    return None


def _pickup_goal(scene, scenario: ScenarioConfig):
    if scenario.table_area is None:
        return None
    objects = [o for o in scene.objects if o.confirmed]
    tables = select_tables(objects, scenario.table_area)
    if not tables:
        return None
    person = select_person([p for p in scene.persons if p.confirmed], scenario.table_area, scenario.carry.tau_p)
    if person is None:
        return None
    g = anticipate_pickup_pose(person, tables, scenario.carry)
    return (g.table_id, g.pose, g.side_sign)


def simulate(scenario: ScenarioConfig, seed: int, anticipation: bool, trace=None,
             controller_config: Optional[ControllerConfig] = None) -> RunResult:
    """Run one closed-loop episode; ``trace`` (a writable text file) receives one JSON line per tick."""
    s_human, s_sense, s_chan, s_fb, s_odom, _ = _streams(scenario, seed)
    world, partners = _build_world(scenario, np.random.default_rng(s_human))
    sense_rng = np.random.default_rng(s_sense)
    odom_rng = np.random.default_rng(s_odom)
    chan = Channel(scenario.channel.latency, scenario.channel.jitter, scenario.channel.drop_prob,
                   seed=int(s_chan.generate_state(1)[0]))
    fb_chan = Channel(scenario.feedback_channel.latency, scenario.feedback_channel.jitter,
                      scenario.feedback_channel.drop_prob, seed=int(s_fb.generate_state(1)[0]))
    backend = Backend(scenario.grid)
    mission = _mission(scenario)
    cfg = controller_config or ControllerConfig()
    cfg = replace(cfg, carry=scenario.carry, nav=scenario.anticipation, anticipation=anticipation, dt=DT)
    robot = RobotController(scenario.grid, mission, scenario.robot_start, cfg) if mission is not None else None

    fb_period = max(1, round(1.0 / (scenario.feedback_rate * DT)))
    lidar_period = max(1, round(1.0 / (scenario.lidar_rate * DT)))
    periods = [n.period_ticks(DT) for n in scenario.sensors]
    seqs = [0] * len(scenario.sensors)
    pending_inputs: list = []
    input_cursor = [0] * len(partners)
    hasher = hashlib.sha256()
    safeties = []
    first_seen = None
    events_log = []
    max_ticks = int(round(scenario.max_duration / DT))
    completed = mission is None
    tick = 0

    while not completed and tick < max_ticks:
        t = world.time
        for k, node in enumerate(scenario.sensors):
            if tick % periods[k] == 0:
                chan.send(observe(node, world, sense_rng, seqs[k]))
                seqs[k] += 1
        scene = backend.step(t, chan.deliver(t))
        if tick % fb_period == 0:
            goal = _pickup_goal(scene, scenario) if anticipation and scenario.mission == "furnish" else None
            fb = emit_feedback(scene, backend.robot_pose, scenario.anticipation.person_range, pickup_goal=goal,
                               include_persons=anticipation)
            fb_chan.send(fb, sender=0, stamp=t)
        feedback = fb_chan.deliver(t)

        scan = None
        if tick % lidar_period == 0 and robot.phase in NAV_PHASES:
            scan = simulate_lidar(world)
            if first_seen is None and scan.persons_seen():
                first_seen = t

        for i, p in enumerate(partners):
            while input_cursor[i] < len(p.arrivals):
                ta, tid, side = p.arrivals[input_cursor[i]]
                pending_inputs.append((ta + scenario.human_input_delay, tid, side))
                input_cursor[i] += 1
        due = []
        if not anticipation:
            for item in sorted(pending_inputs):
                if item[0] <= t + 1e-9:
                    pending_inputs.remove(item)
                    obj = world.object_by_id(item[1])
                    g = grasp_robot_pose(obj, item[2], scenario.carry.delta_grasp)
                    due.append(HumanInput(obj.pose, (g.x, g.y)))

        v = world.robot.velocity
        odom = Velocity2(v.vx + scenario.odom_drift[0], v.vy + scenario.odom_drift[1], v.omega + scenario.odom_drift[2])
        if scenario.odom_noise > 0:
            e = odom_rng.normal(0.0, scenario.odom_noise, 3)
            odom = Velocity2(odom.vx + e[0], odom.vy + e[1], odom.omega + e[2])
        proprio = Proprio(odom, v, world.robot.ee_displacement, world.robot.attached_object)
        out = robot.step(t, proprio, feedback, scan, due)

        for act in out.actions:
            if act[0] == "attach":
                _, believed, cls, intended = act
                cands = [o for o in world.objects if o.cls == cls and o.carried_by == "none"]
                obj = min(cands, key=lambda o: o.pose.distance_to(believed), default=None)
                try:
                    if obj is None or obj.pose.distance_to(believed) > 0.5:
                        raise WorldError("grasp alignment failed")
                    side = min((1, -1), key=lambda k: grasp_robot_pose(obj, k, scenario.carry.delta_grasp)
                               .distance_to(intended))
                    world = attach_object(world, obj.id, side, scenario.carry.delta_grasp)
                except WorldError as e:
                    out.events.append(str(e))
            elif act[0] == "detach":
                world = detach_object(world)

        world = step_world(world, out.cmd, DT)
        for p in partners:
            world = p.update(world)

        rp = world.robot.pose
        dists = [surface_distance((rp.x, rp.y), world.robot.footprint_radius, h.root, PERSON_RADIUS)
                 for h in world.humans if not isinstance(h.policy, Operator)]
        if dists:
            safeties.append(min(dists))

        rec = {
            "tick": tick, "t": _r(t), "phase": robot.phase.value,
            "robot": [_r(rp.x), _r(rp.y), _r(rp.theta)],
            "est": [_r(a) for a in robot.est.pose.as_tuple()],
            "cmd": [_r(a) for a in out.cmd.as_tuple()],
            "humans": [[h.id, _r(h.root[0]), _r(h.root[1])] for h in world.humans],
            "objects": [[o.id, _r(o.pose.x), _r(o.pose.y), _r(o.pose.theta)] for o in world.objects],
        }
        if out.events:
            rec["events"] = out.events
            events_log.extend(f"{t:.2f} {e}" for e in out.events)
        line = json.dumps(rec, separators=(",", ":"))
        hasher.update(line.encode())
        hasher.update(b"\n")
        if trace is not None:
            trace.write(line + "\n")
        tick += 1
        completed = robot.completed
        if robot.failed is not None:
            break

    placements = []
    if robot is not None and robot.layout is not None:
        for pl in robot.placements:
            target = robot.layout.entries[pl.entry].target
            cands = [o for o in world.objects if o.cls == pl.cls and o.carried_by == "none"]
            obj = min(cands, key=lambda o: o.pose.distance_to(target))
            trans, ang = placement_errors(obj.pose, target, pl.cls == "table")
            placements.append({"entry": pl.entry, "cls": pl.cls, "object_id": obj.id,
                               "translation_error": trans, "angular_error_deg": math.degrees(ang),
                               "verified": pl.verified, "time": pl.time})
    return RunResult(
        scenario_id=scenario.id, seed=seed, anticipation=anticipation, completed=bool(completed),
        duration=world.time, ticks=tick,
        min_safety=min(safeties) if safeties else None,
        avg_safety=float(np.mean(safeties)) if safeties else None,
        placements=placements, digest=hasher.hexdigest(),
        deviation_time=robot.deviation_time if robot else None, first_seen_time=first_seen,
        person_reads=robot.person_reads if robot else 0,
        failure=robot.failed if robot else None, events=events_log,
    )


@dataclass
class FusionResult:
    scenario_id: str
    seed: int
    errors: dict             # object id -> (n, 3) array of (dx, dy, dyaw) per tick with a matched track
    table_yaws: list         # every fused table yaw observed
    covariances_spd: bool
    sigma_pos: float         # smallest single-sensor position sigma in the scenario

    def rmse(self, oid: int) -> float:
        e = self.errors[oid]
        return float(np.sqrt(np.mean(e[:, 0] ** 2 + e[:, 1] ** 2)))


def observe_static(scenario: ScenarioConfig, seed: int, duration: Optional[float] = None) -> FusionResult:
    """Sensing and fusion only: the robot stays parked and walkers follow their policies.

    Every tick, each free object is matched to the nearest confirmed track of its
    class within the object gate and the pose error is recorded.
    """
    from .fusion import OBJECT_GATE, is_spd
    from .geometry import angle_diff, wrap_half_pi

    s_human, s_sense, s_chan, *_ = _streams(scenario, seed)
    world, _ = _build_world(scenario, np.random.default_rng(s_human))
    sense_rng = np.random.default_rng(s_sense)
    chan = Channel(scenario.channel.latency, scenario.channel.jitter, scenario.channel.drop_prob,
                   seed=int(s_chan.generate_state(1)[0]))
    backend = Backend(scenario.grid)
    periods = [n.period_ticks(DT) for n in scenario.sensors]
    seqs = [0] * len(scenario.sensors)
    errors = {o.id: [] for o in world.objects}
    yaws, spd = [], True
    ticks = int(round((scenario.max_duration if duration is None else duration) / DT))
    for tick in range(ticks):
        t = world.time
        for k, node in enumerate(scenario.sensors):
            if tick % periods[k] == 0:
                chan.send(observe(node, world, sense_rng, seqs[k]))
                seqs[k] += 1
        scene = backend.step(t, chan.deliver(t))
        for tr in scene.objects + scene.persons:
            spd = spd and is_spd(tr.cov)
        for tr in scene.objects:
            if tr.cls == "table":
                yaws.append(float(tr.state[2]))
        for o in world.objects:
            cands = [tr for tr in scene.objects if tr.confirmed and tr.cls == o.cls
                     and math.hypot(tr.state[0] - o.pose.x, tr.state[1] - o.pose.y) <= OBJECT_GATE]
            if not cands:
                continue
            tr = min(cands, key=lambda c: math.hypot(c.state[0] - o.pose.x, c.state[1] - o.pose.y))
            dyaw = wrap_half_pi(tr.state[2] - o.pose.theta) if o.cls == "table" \
                else angle_diff(tr.state[2], o.pose.theta)
            errors[o.id].append((tr.state[0] - o.pose.x, tr.state[1] - o.pose.y, dyaw))
        world = step_world(world, Velocity2(), DT)
    sigma = min((n.noise_sigma_pos for n in scenario.sensors), default=0.0)
    return FusionResult(scenario.id, seed, {k: np.array(v).reshape(-1, 3) for k, v in errors.items()}, yaws,
                        spd, sigma)
