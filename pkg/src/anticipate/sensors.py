"""Simulated smart edge sensor nodes and the lossy ordered channel to the backend."""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import Polygon2, Pose2, angle_diff, line_of_sight
from .perception import PoseOutlierError, table_pose_from_contour
from .world import TABLE_SIZE, WorldState


@dataclass(frozen=True)
class SensorNode:
    id: int
    pose: Pose2
    fov_halfangle: float = 0.6
    range: float = 8.0
    rate: float = 10.0
    noise_sigma_pos: float = 0.05
    noise_sigma_theta: float = 0.03
    detection_prob: float = 0.95

    def __post_init__(self):
        if self.noise_sigma_pos < 0 or self.noise_sigma_theta < 0:
            raise ValueError("noise sigmas must be non-negative")
        if not 0.0 <= self.detection_prob <= 1.0:
            raise ValueError("detection_prob must lie in [0, 1]")

    def period_ticks(self, dt: float) -> int:
        ticks = round(1.0 / (self.rate * dt))
        if ticks < 1 or abs(ticks * self.rate * dt - 1.0) > 1e-9:
            raise ValueError(f"sensor rate {self.rate} Hz does not divide the tick rate")
        return ticks

    def sees(self, world: WorldState, point) -> bool:
        """FoV cone, range and line of sight against the static map."""
        dx, dy = point[0] - self.pose.x, point[1] - self.pose.y
        dist = math.hypot(dx, dy)
        if dist > self.range:
            return False
        if dist > 1e-9 and abs(angle_diff(math.atan2(dy, dx), self.pose.theta)) > self.fov_halfangle:
            return False
        if world.static_map is None:
            return True
        return line_of_sight(world.static_map, (self.pose.x, self.pose.y), point)


@dataclass(frozen=True)
class PersonObs:
    root: tuple
    keypoints: tuple  # K (x, y) pairs
    truth_id: int = -1  # ground-truth id; never read by the backend, used by oracles


@dataclass(frozen=True)
class ObjectObs:
    cls: str
    pose: Pose2
    contour: Optional[Polygon2] = None
    truth_id: int = -1


@dataclass(frozen=True)
class PerceptMsg:
    node_id: int
    stamp: float
    person_obs: tuple = ()
    object_obs: tuple = ()
    robot_obs: Optional[Pose2] = None
    seq: int = 0

    def to_json(self) -> str:
        """Canonical one-line serialization with a stable field order."""
        d = {
            "node_id": self.node_id,
            "stamp": self.stamp,
            "seq": self.seq,
            "person_obs": [{"root": list(p.root), "keypoints": [list(k) for k in p.keypoints],
                            "truth_id": p.truth_id} for p in self.person_obs],
            "object_obs": [{"cls": o.cls, "pose": list(o.pose.as_tuple()),
                            "contour": [list(v) for v in o.contour.vertices] if o.contour else None,
                            "truth_id": o.truth_id} for o in self.object_obs],
            "robot_obs": list(self.robot_obs.as_tuple()) if self.robot_obs else None,
        }
        return json.dumps(d, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "PerceptMsg":
        d = json.loads(line)
        persons = tuple(PersonObs(tuple(p["root"]), tuple(tuple(k) for k in p["keypoints"]), p["truth_id"])
                        for p in d["person_obs"])
        objects = tuple(ObjectObs(o["cls"], Pose2(*o["pose"]),
                                  Polygon2(tuple(map(tuple, o["contour"]))) if o["contour"] else None,
                                  o["truth_id"]) for o in d["object_obs"])
        robot = Pose2(*d["robot_obs"]) if d["robot_obs"] else None
        return cls(d["node_id"], d["stamp"], persons, objects, robot, d["seq"])


def synth_contour(corners: np.ndarray, rng: np.random.Generator, sigma: float, mid_points: int = 2) -> Polygon2:
    """Mask-like contour: noisy corners plus collinear points along every edge."""
    noisy = corners + rng.normal(0.0, sigma, corners.shape) if sigma > 0 else corners.copy()
    pts = []
    n = len(noisy)
    for i in range(n):
        a, b = noisy[i], noisy[(i + 1) % n]
        pts.append(tuple(a))
        for k in range(1, mid_points + 1):
            t = k / (mid_points + 1)
            pts.append(tuple(a + t * (b - a)))
    return Polygon2.from_points(pts)


def observe(node: SensorNode, world: WorldState, rng: np.random.Generator, seq: int = 0) -> PerceptMsg:
    """Detection-level observation of everything the node can geometrically see."""
    sp, st = node.noise_sigma_pos, node.noise_sigma_theta

    def detected() -> bool:
        return node.detection_prob >= 1.0 or rng.random() < node.detection_prob

    persons = []
    for h in world.humans:
        if not node.sees(world, h.root) or not detected():
            continue
        kps = h.keypoints
        if sp > 0:
            root = tuple(np.asarray(h.root) + rng.normal(0.0, sp, 2))
            kps = kps + rng.normal(0.0, sp, kps.shape)
        else:
            root = h.root
        persons.append(PersonObs(tuple(map(float, root)), tuple(map(tuple, kps.tolist())), h.id))

    objects = []
    for o in world.objects:
        if o.carried_by != "none" or not node.sees(world, (o.pose.x, o.pose.y)) or not detected():
            continue
        if o.cls == "table":
            contour = synth_contour(o.world_footprint(), rng, sp)
            try:
                pose = table_pose_from_contour(contour, TABLE_SIZE)
            except (PoseOutlierError, ValueError):
                continue
        else:
            contour = None
            if sp > 0 or st > 0:
                pose = Pose2(o.pose.x + rng.normal(0.0, sp), o.pose.y + rng.normal(0.0, sp),
                             o.pose.theta + rng.normal(0.0, st))
            else:
                pose = o.pose
        objects.append(ObjectObs(o.cls, pose, contour, o.id))

    robot_obs = None
    r = world.robot.pose
    if node.sees(world, (r.x, r.y)) and detected():
        if sp > 0 or st > 0:
            robot_obs = Pose2(r.x + rng.normal(0.0, sp), r.y + rng.normal(0.0, sp), r.theta + rng.normal(0.0, st))
        else:
            robot_obs = r

    return PerceptMsg(node.id, world.time, tuple(persons), tuple(objects), robot_obs, seq)


@dataclass
class Channel:
    """Lossy channel with latency, uniform jitter and per-sender FIFO delivery."""

    latency: float = 0.05
    jitter: float = 0.02
    drop_prob: float = 0.02
    seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False)
    _pending: list = field(default_factory=list, init=False, repr=False)
    _last_arrival: dict = field(default_factory=dict, init=False, repr=False)
    _seq: int = field(default=0, init=False)
    dropped: int = field(default=0, init=False)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)

    def send(self, msg, sender: Optional[int] = None, stamp: Optional[float] = None) -> None:
        sender = msg.node_id if sender is None else sender
        stamp = msg.stamp if stamp is None else stamp
        seq = self._seq
        self._seq += 1
        if self.drop_prob > 0 and self.rng.random() < self.drop_prob:
            self.dropped += 1
            return
        jit = self.rng.uniform(-self.jitter, self.jitter) if self.jitter > 0 else 0.0
        arrival = max(stamp + self.latency + jit, stamp, self._last_arrival.get(sender, -math.inf))
        self._last_arrival[sender] = arrival
        heapq.heappush(self._pending, (arrival, sender, seq, msg))

    def deliver(self, now: float) -> list:
        out = []
        # tolerance absorbs float drift between tick-derived times
        while self._pending and self._pending[0][0] <= now + 1e-9:
            out.append(heapq.heappop(self._pending)[3])
        return out

    def __len__(self):
        return len(self._pending)


def deliver(channel: Channel, msgs, now: float) -> list:
    """Enqueue ``msgs`` and return every message due at ``now`` in (arrival, node, seq) order."""
    for m in msgs:
        channel.send(m)
    return channel.deliver(now)
