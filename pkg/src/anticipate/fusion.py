"""Backend fusion of multi-view percepts into the allocentric scene model.

Persons are tracked with a constant-velocity Kalman filter on the root
joint, objects with a static filter on (x, y, yaw). Table yaw lives on the
half-turn quotient: innovations are wrapped into (-pi/2, pi/2] and the
estimate is folded into [0, pi).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .geometry import Pose2, angle_diff, fold_pi, wrap_angle, wrap_half_pi

PERSON_Q = 0.5          # m/s^2 / sqrt(Hz), white-acceleration density
OBJECT_Q = 0.003
PERSON_GATE = 0.7
OBJECT_GATE = 0.5
BIRTH_HITS = 3
PERSON_TIMEOUT = 1.0
OBJECT_TIMEOUT = 5.0
FEEDBACK_RANGE = 6.0
LOCALIZATION_ALPHA = 0.2
STALE_AFTER = 0.5


class FilterDivergence(RuntimeError):
    def __init__(self, msg="filter divergence"):
        super().__init__(msg)


def is_spd(P: np.ndarray) -> bool:
    if not np.all(np.isfinite(P)) or np.max(np.abs(P - P.T)) > 1e-12 + 1e-9 * np.max(np.abs(P)):
        return False
    try:
        np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        return False
    return True


@dataclass(frozen=True)
class PersonTrack:
    id: int
    state: np.ndarray          # [x, y, vx, vy]
    cov: np.ndarray            # 4x4
    keypoints: tuple = ()
    last_update: float = 0.0
    hits: int = 1
    stamp: float = 0.0         # time the state refers to

    kind = "person"

    @property
    def root(self) -> tuple:
        return (float(self.state[0]), float(self.state[1]))

    @property
    def velocity(self) -> tuple:
        return (float(self.state[2]), float(self.state[3]))

    @property
    def confirmed(self) -> bool:
        return self.hits >= BIRTH_HITS


@dataclass(frozen=True)
class ObjectTrack:
    id: int
    cls: str
    state: np.ndarray          # [x, y, theta]
    cov: np.ndarray            # 3x3
    last_update: float = 0.0
    hits: int = 1
    stamp: float = 0.0

    kind = "object"

    @property
    def pose(self) -> Pose2:
        return Pose2(*self.state)

    @property
    def symmetric(self) -> bool:
        return self.cls == "table"

    @property
    def confirmed(self) -> bool:
        return self.hits >= BIRTH_HITS


def new_person_track(tid: int, root, stamp: float, keypoints=(), pos_var: float = 0.05 ** 2,
                     vel_var: float = 1.0) -> PersonTrack:
    return PersonTrack(tid, np.array([root[0], root[1], 0.0, 0.0]),
                       np.diag([pos_var, pos_var, vel_var, vel_var]), tuple(keypoints), stamp, 1, stamp)


def new_object_track(tid: int, cls: str, pose: Pose2, stamp: float, pos_var: float = 0.05 ** 2,
                     yaw_var: float = 0.03 ** 2) -> ObjectTrack:
    theta = fold_pi(pose.theta) if cls == "table" else pose.theta
    return ObjectTrack(tid, cls, np.array([pose.x, pose.y, theta]), np.diag([pos_var, pos_var, yaw_var]),
                       stamp, 1, stamp)


def kf_predict(track, dt: float, q: Optional[float] = None):
    """Propagate a track by ``dt`` seconds (constant velocity or static)."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    if isinstance(track, PersonTrack):
        q = PERSON_Q if q is None else q
        F = np.eye(4)
        F[0, 2] = F[1, 3] = dt
        qa = q * q
        blk = qa * np.array([[dt ** 3 / 3, dt ** 2 / 2], [dt ** 2 / 2, dt]])
        Q = np.zeros((4, 4))
        Q[np.ix_([0, 2], [0, 2])] = blk
        Q[np.ix_([1, 3], [1, 3])] = blk
        x = F @ track.state
        P = F @ track.cov @ F.T + Q
    else:
        q = OBJECT_Q if q is None else q
        x = track.state.copy()
        P = track.cov + (q * q) * dt * np.eye(3)
    P = 0.5 * (P + P.T)
    return replace(track, state=x, cov=P, stamp=track.stamp + dt)


def kf_update(track, measurement, R, stamp: Optional[float] = None):
    """Standard Kalman update in Joseph form.

    Person measurements are root positions (2,), object measurements are
    (x, y, theta). Raises :class:`FilterDivergence` if the posterior
    covariance is not symmetric positive definite.
    """
    z = np.asarray(measurement, dtype=float)
    R = np.asarray(R, dtype=float)
    if not is_spd(R):
        raise ValueError("measurement covariance must be symmetric positive definite")
    n = len(track.state)
    H = np.zeros((len(z), n))
    H[np.arange(len(z)), np.arange(len(z))] = 1.0
    y = z - H @ track.state
    if isinstance(track, ObjectTrack):
        y[2] = wrap_half_pi(y[2]) if track.symmetric else wrap_angle(y[2])
    P = track.cov
    S = H @ P @ H.T + R
    K = np.linalg.solve(S.T, (P @ H.T).T).T
    x = track.state + K @ y
    IKH = np.eye(n) - K @ H
    P = IKH @ P @ IKH.T + K @ R @ K.T
    P = 0.5 * (P + P.T)
    if not is_spd(P):
        raise FilterDivergence()
    if isinstance(track, ObjectTrack):
        x[2] = fold_pi(x[2]) if track.symmetric else wrap_angle(x[2])
    t = track.stamp if stamp is None else stamp
    return replace(track, state=x, cov=P, last_update=t, hits=track.hits + 1)


# ---------------------------------------------------------------- association

def _obs_xy(obs) -> np.ndarray:
    if hasattr(obs, "root"):
        return np.asarray(obs.root, dtype=float)
    return np.array([obs.pose.x, obs.pose.y])


def mahalanobis_xy(track, obs_xy: np.ndarray, R_xy: np.ndarray) -> float:
    d = obs_xy - track.state[:2]
    S = track.cov[:2, :2] + R_xy
    return float(math.sqrt(d @ np.linalg.solve(S, d)))


@dataclass
class Matching:
    pairs: list = field(default_factory=list)          # (track index, observation index)
    unmatched_tracks: list = field(default_factory=list)
    unmatched_obs: list = field(default_factory=list)


def associate(tracks, observations, gate: float, R_xy=None) -> Matching:
    """Greedy nearest-neighbour association on Mahalanobis distance.

    Candidate pairs must lie within ``gate`` meters (Euclidean) and, for
    objects, share the class. Pairs are taken in increasing Mahalanobis
    distance, ties by (track index, observation index).
    """
    if gate <= 0:
        raise ValueError("gate must be positive")
    R_xy = np.eye(2) * 0.05 ** 2 if R_xy is None else np.asarray(R_xy)
    cands = []
    for i, tr in enumerate(tracks):
        for j, ob in enumerate(observations):
            if getattr(tr, "cls", None) != getattr(ob, "cls", None):
                continue
            xy = _obs_xy(ob)
            if np.linalg.norm(xy - tr.state[:2]) > gate:
                continue
            cands.append((mahalanobis_xy(tr, xy, R_xy), i, j))
    cands.sort()
    used_t, used_o = set(), set()
    m = Matching()
    for _, i, j in cands:
        if i in used_t or j in used_o:
            continue
        used_t.add(i)
        used_o.add(j)
        m.pairs.append((i, j))
    m.pairs.sort()
    m.unmatched_tracks = [i for i in range(len(tracks)) if i not in used_t]
    m.unmatched_obs = [j for j in range(len(observations)) if j not in used_o]
    return m


# ---------------------------------------------------------------- robot localization

@dataclass(frozen=True)
class RobotState:
    pose: Optional[Pose2] = None
    velocity: tuple = (0.0, 0.0, 0.0)
    stale_count: int = 0

    @property
    def initialized(self) -> bool:
        return self.pose is not None


def correct_robot_localization(est: RobotState, external: Pose2, stamp: Optional[float] = None,
                               now: Optional[float] = None, alpha: float = LOCALIZATION_ALPHA,
                               max_age: float = STALE_AFTER) -> RobotState:
    """Complementary blend of the onboard estimate toward an external pose.

    The first message initializes the estimate; messages older than
    ``max_age`` are ignored and counted.
    """
    if stamp is not None and now is not None and now - stamp > max_age:
        return replace(est, stale_count=est.stale_count + 1)
    if est.pose is None:
        return replace(est, pose=external)
    p = est.pose
    return replace(est, pose=Pose2(p.x + alpha * (external.x - p.x), p.y + alpha * (external.y - p.y),
                                   p.theta + alpha * angle_diff(external.theta, p.theta)))


# ---------------------------------------------------------------- scene model and backend

@dataclass(frozen=True)
class SceneModel:
    stamp: float
    persons: tuple = ()
    objects: tuple = ()
    robot: RobotState = RobotState()
    static_grid: object = field(default=None, repr=False, compare=False)
    robot_stamp: float = -math.inf

    def to_json(self) -> str:
        """Line-delimited snapshot with stable ordering (by track id)."""
        d = {
            "stamp": self.stamp,
            "robot": list(self.robot.pose.as_tuple()) if self.robot.pose else None,
            "persons": [{"id": p.id, "state": [float(v) for v in p.state], "hits": p.hits}
                        for p in sorted(self.persons, key=lambda p: p.id)],
            "objects": [{"id": o.id, "cls": o.cls, "state": [float(v) for v in o.state], "hits": o.hits}
                        for o in sorted(self.objects, key=lambda o: o.id)],
        }
        return json.dumps(d, separators=(",", ":"))


@dataclass(frozen=True)
class FeedbackMsg:
    stamp: float
    robot_pose: Optional[Pose2]
    persons: tuple = ()
    objects: tuple = ()
    pickup_goal: Optional[tuple] = None     # (table id, Pose2, side_sign)
    remaining_layout: tuple = ()
    node_id: int = -1
    robot_stamp: float = -math.inf


class Backend:
    """Single event loop fusing delivered percepts in channel order."""

    def __init__(self, static_grid=None, sigma_pos: float = 0.05, sigma_theta: float = 0.03,
                 person_gate: float = PERSON_GATE, object_gate: float = OBJECT_GATE):
        self.static_grid = static_grid
        self.sigma_pos = sigma_pos
        self.sigma_theta = sigma_theta
        self.person_gate = person_gate
        self.object_gate = object_gate
        self.persons: list[PersonTrack] = []
        self.objects: list[ObjectTrack] = []
        self.robot_obs: list[tuple] = []
        self.robot_pose: Optional[Pose2] = None
        self.robot_stamp: float = -math.inf
        self.now = 0.0
        self._next_id = 1
        self.divergences = 0

    def _new_id(self) -> int:
        tid = self._next_id
        self._next_id += 1
        return tid

    def _predict_to(self, track, t: float):
        return kf_predict(track, max(0.0, t - track.stamp))

    def ingest(self, msg) -> None:
        t = msg.stamp
        Rp = np.eye(2) * self.sigma_pos ** 2
        Ro = np.diag([self.sigma_pos ** 2, self.sigma_pos ** 2, self.sigma_theta ** 2])

        if msg.person_obs:
            preds = [self._predict_to(tr, t) for tr in self.persons]
            m = associate(preds, msg.person_obs, self.person_gate, Rp)
            for i, j in m.pairs:
                ob = msg.person_obs[j]
                try:
                    tr = kf_update(preds[i], ob.root, Rp, stamp=t)
                except FilterDivergence:
                    self.divergences += 1
                    tr = new_person_track(preds[i].id, ob.root, t)
                self.persons[self.persons.index(next(p for p in self.persons if p.id == tr.id))] = \
                    replace(tr, keypoints=ob.keypoints)
            for j in m.unmatched_obs:
                ob = msg.person_obs[j]
                self.persons.append(new_person_track(self._new_id(), ob.root, t, ob.keypoints))

        if msg.object_obs:
            preds = [self._predict_to(tr, t) for tr in self.objects]
            m = associate(preds, msg.object_obs, self.object_gate, Rp)
            for i, j in m.pairs:
                ob = msg.object_obs[j]
                z = (ob.pose.x, ob.pose.y, ob.pose.theta)
                try:
                    tr = kf_update(preds[i], z, Ro, stamp=t)
                except FilterDivergence:
                    self.divergences += 1
                    tr = new_object_track(preds[i].id, ob.cls, ob.pose, t)
                idx = next(k for k, o in enumerate(self.objects) if o.id == tr.id)
                self.objects[idx] = tr
            for j in m.unmatched_obs:
                ob = msg.object_obs[j]
                self.objects.append(new_object_track(self._new_id(), ob.cls, ob.pose, t))

        if msg.robot_obs is not None:
            self.robot_obs.append((t, msg.robot_obs))

    def step(self, now: float, messages) -> SceneModel:
        """Consume messages delivered at ``now`` and prune stale tracks."""
        self.now = now
        for msg in messages:
            self.ingest(msg)
        self.persons = [p for p in self.persons if now - p.last_update <= PERSON_TIMEOUT]
        self.objects = [o for o in self.objects if now - o.last_update <= OBJECT_TIMEOUT]
        if self.robot_obs:
            ts = [t for t, _ in self.robot_obs]
            xs = np.array([(p.x, p.y) for _, p in self.robot_obs])
            ang = np.array([p.theta for _, p in self.robot_obs])
            self.robot_pose = Pose2(xs[:, 0].mean(), xs[:, 1].mean(),
                                    math.atan2(np.sin(ang).mean(), np.cos(ang).mean()))
            self.robot_stamp = max(ts)
            self.robot_obs = []
        return self.snapshot()

    def snapshot(self) -> SceneModel:
        persons = tuple(self._predict_to(p, self.now) for p in self.persons)
        return SceneModel(self.now, persons, tuple(self.objects),
                          RobotState(self.robot_pose), self.static_grid, self.robot_stamp)

    def drop_object_track(self, track_id: int) -> None:
        self.objects = [o for o in self.objects if o.id != track_id]


def emit_feedback(model: SceneModel, robot_pose: Optional[Pose2], person_range: float = FEEDBACK_RANGE,
                  pickup_goal=None, remaining_layout=(), include_persons: bool = True) -> FeedbackMsg:
    """Bundle localization, nearby confirmed persons, and object/task state for the robot."""
    persons = ()
    if include_persons and robot_pose is not None:
        persons = tuple(p for p in model.persons
                        if p.confirmed and math.hypot(p.state[0] - robot_pose.x, p.state[1] - robot_pose.y)
                        <= person_range)
    objects = tuple(o for o in model.objects if o.confirmed)
    return FeedbackMsg(model.stamp, model.robot.pose, persons, objects, pickup_goal, tuple(remaining_layout),
                       robot_stamp=model.robot_stamp)
