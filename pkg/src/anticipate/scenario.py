"""Scenario configuration: YAML loading, map construction and validation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .geometry import LETHAL, Grid2, Polygon2, Pose2
from .nav import AnticipationParams
from .sensors import SensorNode
from .tasks import CarryParams, Layout, LayoutEntry, PickupArea
from .world import FurnitureObject, WorldError

SCENARIO_DIR = Path(__file__).parent / "scenarios"


class ScenarioError(ValueError):
    """Structured validation error: ``problems`` lists every failed check."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid scenario: " + "; ".join(self.problems))


@dataclass(frozen=True)
class HumanSpec:
    id: int
    start: tuple
    role: str = "walker"           # walker | partner | idle
    waypoints: tuple = ()
    speed: float = 1.0
    start_time: float = 0.0
    speed_jitter: float = 0.0
    start_jitter: float = 0.0


@dataclass(frozen=True)
class ChannelSpec:
    latency: float = 0.05
    jitter: float = 0.02
    drop_prob: float = 0.02


@dataclass(frozen=True)
class ScenarioConfig:
    id: str
    grid: Grid2 = field(repr=False)
    sensors: tuple
    humans: tuple
    objects: tuple
    robot_start: Pose2
    mission: str                    # navigate | furnish | none
    nav_goal: Optional[Pose2] = None
    standby: Optional[Pose2] = None
    table_area: Optional[PickupArea] = None
    chair_area: Optional[PickupArea] = None
    layout: Layout = Layout()
    carry: CarryParams = CarryParams()
    anticipation: AnticipationParams = AnticipationParams()
    channel: ChannelSpec = ChannelSpec()
    feedback_channel: ChannelSpec = ChannelSpec(0.05, 0.01, 0.0)
    feedback_rate: float = 10.0
    lidar_rate: float = 10.0
    odom_drift: tuple = (0.0, 0.0, 0.0)     # body-frame bias of the measured twist
    odom_noise: float = 0.0
    human_input_delay: float = 20.0
    max_duration: float = 120.0
    seed: int = 0
    source: Optional[str] = None


def _pose(v, what, problems) -> Optional[Pose2]:
    try:
        vals = [float(a) for a in v]
        if len(vals) == 2:
            vals.append(0.0)
        if len(vals) != 3 or not all(math.isfinite(a) for a in vals):
            raise ValueError
        return Pose2(*vals)
    except (TypeError, ValueError):
        problems.append(f"{what}: expected [x, y] or [x, y, theta], got {v!r}")
        return None


def build_map(spec: dict, base: Optional[Path] = None) -> Grid2:
    """Grid from a map file or from a box description (size, resolution, origin, border, walls)."""
    if "file" in spec:
        path = Path(spec["file"])
        if base is not None and not path.is_absolute():
            path = base / path
        return Grid2.load(path)
    res = float(spec.get("resolution", 0.05))
    sx, sy = (float(a) for a in spec["size"])
    origin = tuple(float(a) for a in spec.get("origin", (0.0, 0.0)))
    grid = Grid2.empty(sx, sy, res, origin)
    x0, y0 = origin
    x1, y1 = x0 + grid.width * res, y0 + grid.height * res
    if spec.get("border", True):
        t = float(spec.get("border_thickness", 0.1))
        for box in ((x0, y0, x1, y0 + t), (x0, y1 - t, x1, y1), (x0, y0, x0 + t, y1), (x1 - t, y0, x1, y1)):
            grid.fill_rect(*box, LETHAL)
    for box in spec.get("walls", ()):
        grid.fill_rect(*(float(a) for a in box), LETHAL)
    return grid


def _params(cls, d, what, problems):
    if d is None:
        return cls()
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        problems.append(f"{what}: unknown keys {sorted(unknown)}")
        d = {k: v for k, v in d.items() if k in names}
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        problems.append(f"{what}: {e}")
        return cls()


def _area(pts, cls, what, problems) -> Optional[PickupArea]:
    if pts is None:
        return None
    try:
        return PickupArea(Polygon2.from_points([tuple(map(float, p)) for p in pts]), cls)
    except ValueError as e:
        problems.append(f"{what}: {e}")
        return None


def parse_scenario(d: dict, base: Optional[Path] = None, source: Optional[str] = None) -> ScenarioConfig:
    problems = []
    if not isinstance(d, dict):
        raise ScenarioError(["scenario must be a mapping"])
    sid = str(d.get("id", "unnamed"))
    try:
        grid = build_map(d["map"], base)
    except (KeyError, OSError, ValueError, TypeError) as e:
        raise ScenarioError([f"map: {e!r}"])

    sensors = []
    for i, s in enumerate(d.get("sensors", ())):
        s = dict(s)
        pose = _pose(s.pop("pose", None), f"sensors[{i}].pose", problems)
        if pose is None:
            continue
        try:
            sensors.append(SensorNode(pose=pose, **s))
        except (TypeError, ValueError) as e:
            problems.append(f"sensors[{i}]: {e}")

    humans = []
    for i, h in enumerate(d.get("humans", ())):
        h = dict(h)
        start = h.pop("start", None)
        if start is None or len(start) != 2:
            problems.append(f"humans[{i}].start: expected [x, y]")
            continue
        h["waypoints"] = tuple(tuple(map(float, p)) for p in h.get("waypoints", ()))
        try:
            spec = HumanSpec(start=tuple(map(float, start)), **h)
        except TypeError as e:
            problems.append(f"humans[{i}]: {e}")
            continue
        if spec.id <= 0:
            problems.append(f"humans[{i}].id must be positive")
        if spec.role not in ("walker", "partner", "idle"):
            problems.append(f"humans[{i}].role {spec.role!r} unknown")
        if not 0 <= spec.speed <= 2.0:
            problems.append(f"humans[{i}].speed outside [0, 2]")
        humans.append(spec)

    objects = []
    for i, o in enumerate(d.get("objects", ())):
        pose = _pose(o.get("pose"), f"objects[{i}].pose", problems)
        if pose is None:
            continue
        try:
            objects.append(FurnitureObject(int(o["id"]), o["cls"], pose))
        except (KeyError, ValueError, WorldError) as e:
            problems.append(f"objects[{i}]: {e}")

    robot = d.get("robot", {})
    start = _pose(robot.get("start", (0.0, 0.0, 0.0)), "robot.start", problems)

    mission = d.get("mission", {"type": "none"})
    mtype = mission.get("type", "none")
    nav_goal = standby = None
    if mtype == "navigate":
        nav_goal = _pose(mission.get("goal"), "mission.goal", problems)
    elif mtype == "furnish":
        standby = _pose(mission.get("standby", robot.get("start", (0, 0, 0))), "mission.standby", problems)
    elif mtype != "none":
        problems.append(f"mission.type {mtype!r} unknown")

    areas = d.get("pickup_areas", {})
    table_area = _area(areas.get("table"), "table", "pickup_areas.table", problems)
    chair_area = _area(areas.get("chair"), "chair", "pickup_areas.chair", problems)

    entries = []
    for i, e in enumerate(d.get("layout", ())):
        pose = _pose(e.get("pose"), f"layout[{i}].pose", problems)
        if pose is None:
            continue
        if e.get("cls") not in ("table", "chair"):
            problems.append(f"layout[{i}].cls must be table or chair")
            continue
        entries.append(LayoutEntry(e["cls"], pose))

    carry = _params(CarryParams, d.get("carry"), "carry", problems)
    antic = _params(AnticipationParams, d.get("anticipation"), "anticipation", problems)
    channel = _params(ChannelSpec, d.get("channel"), "channel", problems)
    fb_channel = _params(ChannelSpec, d.get("feedback_channel", {"jitter": 0.01, "drop_prob": 0.0}),
                         "feedback_channel", problems)

    odom = d.get("odometry", {})
    cfg = dict(
        id=sid, grid=grid, sensors=tuple(sensors), humans=tuple(humans), objects=tuple(objects),
        robot_start=start or Pose2(), mission=mtype, nav_goal=nav_goal, standby=standby,
        table_area=table_area, chair_area=chair_area, layout=Layout(tuple(entries)), carry=carry,
        anticipation=antic, channel=channel, feedback_channel=fb_channel,
        feedback_rate=float(d.get("feedback_rate", 10.0)), lidar_rate=float(d.get("lidar_rate", 10.0)),
        odom_drift=tuple(float(a) for a in odom.get("drift", (0.0, 0.0, 0.0))),
        odom_noise=float(odom.get("noise", 0.0)),
        human_input_delay=float(d.get("human_input_delay", 20.0)),
        max_duration=float(d.get("max_duration", 120.0)), seed=int(d.get("seed", 0)), source=source,
    )
    scenario = ScenarioConfig(**cfg)
    problems.extend(validate(scenario))
    if problems:
        raise ScenarioError(problems)
    return scenario


def validate(s: ScenarioConfig) -> list:
    """Reference and range checks; returns the list of problems (empty when valid)."""
    problems = []
    g = s.grid

    def inside(x, y):
        ix, iy = g.world_to_cell(x, y)
        return g.in_bounds(ix, iy)

    def free(x, y):
        ix, iy = g.world_to_cell(x, y)
        return g.in_bounds(ix, iy) and g[ix, iy] < LETHAL

    if not free(s.robot_start.x, s.robot_start.y):
        problems.append("robot.start is outside the map or inside a wall")
    for n in s.sensors:
        if not inside(n.pose.x, n.pose.y):
            problems.append(f"sensor {n.id} outside the map")
    ids = [n.id for n in s.sensors]
    if len(set(ids)) != len(ids):
        problems.append("duplicate sensor ids")
    hids = [h.id for h in s.humans]
    if len(set(hids)) != len(hids):
        problems.append("duplicate human ids")
    for h in s.humans:
        if not free(*h.start):
            problems.append(f"human {h.id} starts outside the map or inside a wall")
        for p in h.waypoints:
            if not inside(*p):
                problems.append(f"human {h.id} waypoint {p} outside the map")
    oids = [o.id for o in s.objects]
    if len(set(oids)) != len(oids):
        problems.append("duplicate object ids")
    for o in s.objects:
        if not free(o.pose.x, o.pose.y):
            problems.append(f"object {o.id} outside the map or inside a wall")
    for name, area in (("table", s.table_area), ("chair", s.chair_area)):
        if area is not None and not all(inside(x, y) for x, y in area.polygon.vertices):
            problems.append(f"pickup area {name} not inside the map")
    for i, e in enumerate(s.layout.entries):
        if not free(e.target.x, e.target.y):
            problems.append(f"layout entry {i} outside the map or inside a wall")
    if s.mission == "navigate" and s.nav_goal is not None and not free(s.nav_goal.x, s.nav_goal.y):
        problems.append("navigation goal outside the map or inside a wall")
    if s.mission == "furnish":
        if not s.layout.entries:
            problems.append("furnish mission needs a layout")
        n_tables = sum(o.cls == "table" for o in s.objects)
        n_chairs = sum(o.cls == "chair" for o in s.objects)
        if len(s.layout.unoccupied("table")) > n_tables or len(s.layout.unoccupied("chair")) > n_chairs:
            problems.append("layout has more entries than objects of that class")
        if s.layout.unoccupied("table"):
            if s.table_area is None:
                problems.append("table layout entries need a table pickup area")
            if not any(h.role == "partner" for h in s.humans):
                problems.append("carrying tables needs a partner human")
        if s.layout.unoccupied("chair") and s.chair_area is None:
            problems.append("chair layout entries need a chair pickup area")
    for name in ("max_duration", "feedback_rate", "lidar_rate", "human_input_delay"):
        if getattr(s, name) < 0 or (name != "human_input_delay" and getattr(s, name) == 0):
            problems.append(f"{name} must be positive")
    for name in ("channel", "feedback_channel"):
        c = getattr(s, name)
        if c.latency < 0 or c.jitter < 0 or not 0 <= c.drop_prob < 1:
            problems.append(f"{name}: latency/jitter must be >= 0 and drop_prob in [0, 1)")
    return problems


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    if not path.exists() and (SCENARIO_DIR / path).exists():
        path = SCENARIO_DIR / path
    if not path.exists() and (SCENARIO_DIR / f"{path}.yaml").exists():
        path = SCENARIO_DIR / f"{path}.yaml"
    with open(path) as f:
        d = yaml.safe_load(f)
    return parse_scenario(d, path.parent, str(path))


def builtin_scenarios() -> list:
    return sorted(p.stem for p in SCENARIO_DIR.glob("*.yaml"))
