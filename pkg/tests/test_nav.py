import math
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anticipate.geometry import (INSCRIBED, LETHAL, Grid2, Pose2, Velocity2, line_of_sight,
                                 transform_points_to_frame)
from anticipate.nav import (PATH_COST_WEIGHT, AnticipationParams, CostMap, LaserScan, NoPathError,
                            build_virtual_cloud, filter_outlier, min_safety_distance, path_cost, plan_path,
                            simulate_lidar, surface_distance, update_costmap)
from anticipate.world import HumanAgent, RobotBody, Waypoint, WorldState, step_world
from oracles import dijkstra_cost, virtual_cloud_pseudocode


@dataclass
class Track:
    root: tuple
    keypoints: tuple
    velocity: tuple = (0.0, 0.0)


def track_at(x, y, v=(0.0, 0.0), n=17, rng=None):
    rng = rng or np.random.default_rng(0)
    kp = tuple(map(tuple, np.array([x, y]) + rng.normal(0, 0.1, (n, 2))))
    return Track((x, y), kp, v)


def empty_scan():
    z = np.zeros(0)
    return LaserScan(z, z, 5.6, np.zeros(0, np.int32))


# ---------------------------------------------------------------- filter_outlier

def test_filter_far_track_removed():
    assert filter_outlier([track_at(7, 0)], Pose2()) == []


def test_filter_near_full_track_kept():
    t = track_at(3, 0)
    assert filter_outlier([t], Pose2()) == [t]


def test_filter_matches_predicate_oracle():
    rng = np.random.default_rng(4)
    p = AnticipationParams()
    robot = Pose2(1, -2, 0.4)
    tracks = [track_at(*rng.uniform(-8, 8, 2), n=int(rng.integers(0, 18)), rng=rng) for _ in range(20)]
    expect = [t for t in tracks
              if math.dist(t.root, (robot.x, robot.y)) <= p.person_range and len(t.keypoints) >= p.min_keypoints]
    assert filter_outlier(tracks, robot, p) == expect


# ---------------------------------------------------------------- virtual cloud

def test_cloud_zero_velocity_is_current_keypoints():
    t = track_at(2, 1)
    robot = Pose2(0.5, 0.3, 0.7)
    cloud = build_virtual_cloud([t], robot)
    assert np.array_equal(cloud, np.unique(transform_points_to_frame(np.array(t.keypoints), robot), axis=0))


def test_cloud_root_replicas():
    t = Track((2.0, 0.0), ((2.0, 0.0),), (-1.0, 0.0))
    cloud = build_virtual_cloud([t], Pose2())
    assert cloud[:, 0].tolist() == [0.0, 0.5, 1.0, 1.5, 2.0]
    assert np.all(cloud[:, 1] == 0.0)


def random_persons(rng, k):
    return [track_at(*rng.uniform(-5, 5, 2), v=tuple(rng.uniform(-1.5, 1.5, 2)), rng=rng) for _ in range(k)]


def test_cloud_equals_pseudocode():
    rng = np.random.default_rng(8)
    for _ in range(200):
        persons = random_persons(rng, int(rng.integers(0, 4)))
        robot = Pose2(*rng.uniform(-3, 3, 2), rng.uniform(-math.pi, math.pi))
        params = AnticipationParams(t_pred=float(rng.choice([1.0, 2.0, 3.0])), t_step=float(rng.choice([0.25, 0.5])))
        got = {tuple(r) for r in build_virtual_cloud(persons, robot, params)}
        assert got == virtual_cloud_pseudocode(persons, robot, params.t_pred, params.t_step)


# ---------------------------------------------------------------- cost map

def test_costmap_empty_inputs_keep_static():
    g = Grid2.empty(4, 3, 0.05)
    g.fill_rect(1.0, 1.0, 1.5, 1.2)
    cm = CostMap.from_static(g)
    out = update_costmap(cm, empty_scan(), np.zeros((0, 2)), Pose2(0.5, 0.5, 0))
    assert np.array_equal(out.combined, cm.static)


def test_costmap_disk_stamp():
    g = Grid2.empty(4, 4, 0.05)
    cm = CostMap.from_static(g, AnticipationParams(person_inflation=0.35))
    robot = Pose2(1.0, 2.0, 0.0)
    out = update_costmap(cm, None, np.array([[1.0, 0.0]]), robot)
    iy, ix = np.indices(out.virtual.shape)
    d = np.hypot((ix + 0.5) * 0.05 - 2.0, (iy + 0.5) * 0.05 - 2.0)
    assert np.all(out.virtual[d <= 0.35] == LETHAL)
    assert not np.any(out.virtual[d >= 0.45] >= INSCRIBED)


def test_costmap_combined_is_cellwise_max():
    rng = np.random.default_rng(2)
    g = Grid2.empty(6, 6, 0.05)
    for _ in range(4):
        x, y = rng.uniform(0, 5, 2)
        g.fill_rect(x, y, x + 0.4, y + 0.3)
    cm = CostMap.from_static(g)
    robot = Pose2(3, 3, 0.3)
    ang = np.linspace(-1.5, 1.5, 60)
    scan = LaserScan(ang, rng.uniform(0.5, 5.6, 60), 5.6, np.full(60, -2, np.int32))
    out = update_costmap(cm, scan, rng.uniform(-2, 2, (30, 2)), robot, now=1.0)
    assert np.array_equal(out.combined, np.maximum(np.maximum(out.static, out.onboard), out.virtual))


def test_zero_velocity_footprint_equals_current_projection():
    rng = np.random.default_rng(6)
    g = Grid2.empty(10, 10, 0.05)
    cm = CostMap.from_static(g)
    robot = Pose2(5, 5, 0.2)
    persons = [track_at(*rng.uniform(-3, 3, 2), rng=rng) for _ in range(3)]
    current = np.vstack([transform_points_to_frame(np.array(p.keypoints), robot) for p in persons])
    a = update_costmap(cm, None, build_virtual_cloud(persons, robot), robot).virtual
    b = update_costmap(cm, None, current, robot).virtual
    assert np.array_equal(a >= LETHAL, b >= LETHAL)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_adding_person_never_shrinks_lethal_set(seed):
    rng = np.random.default_rng(seed)
    cm = CostMap.from_static(Grid2.empty(10, 10, 0.1))
    robot = Pose2(5, 5, rng.uniform(-3, 3))
    persons = random_persons(rng, int(rng.integers(0, 3)))
    extra = random_persons(rng, 1)
    a = update_costmap(cm, None, build_virtual_cloud(persons, robot), robot).virtual >= LETHAL
    b = update_costmap(cm, None, build_virtual_cloud(persons + extra, robot), robot).virtual >= LETHAL
    assert np.all(b[a])


# ---------------------------------------------------------------- lidar

def lidar_world(grid, humans=(), robot=Pose2(7, 7, 0)):
    return WorldState(0.0, RobotBody(pose=robot), tuple(humans), (), grid)


def test_lidar_empty_world():
    scan = simulate_lidar(lidar_world(Grid2.empty(14, 14, 0.05)))
    assert len(scan.ranges) == 440
    assert np.all(scan.ranges == 5.6)
    assert scan.angles[-1] - scan.angles[0] == pytest.approx(math.radians(220))


def test_lidar_wall_ahead():
    g = Grid2.empty(14, 14, 0.05)
    g.fill_rect(9.0, 0.0, 9.3, 14.0)
    scan = simulate_lidar(lidar_world(g))
    fwd = np.abs(scan.angles) < 0.05
    assert np.all(np.abs(scan.ranges[fwd] - 2.0) <= 0.05)
    assert np.all(scan.hit_labels[fwd] == -1)


def test_lidar_person_occlusion_per_tick():
    g = Grid2.empty(10, 10, 0.05)
    g.fill_rect(3.0, 0.0, 3.2, 6.0)
    robot = Pose2(1, 5, 0)
    h = HumanAgent(1, (5.0, 4.0), policy=Waypoint(((5.0, 9.0),), 1.0))
    s = lidar_world(g, [h], robot)
    seen_any = hidden_any = False
    for _ in range(100):
        s = step_world(s, Velocity2(), 0.05)
        p = s.humans[0].root
        seen = 1 in simulate_lidar(s).persons_seen()
        rim = [(p[0] + 0.25 * math.cos(a), p[1] + 0.25 * math.sin(a)) for a in np.linspace(0, 2 * math.pi, 16)]
        if not any(line_of_sight(g, (robot.x, robot.y), q) for q in rim + [p]):
            assert not seen
            hidden_any = True
        elif all(line_of_sight(g, (robot.x, robot.y), q) for q in rim + [p]) and math.dist(p, (1, 5)) < 5.0:
            assert seen
            seen_any = True
    assert seen_any and hidden_any


# ---------------------------------------------------------------- planner

def test_straight_path_on_empty_map():
    g = Grid2.empty(10, 10, 0.05)
    for goal in (Pose2(9.0, 1.0, 0), Pose2(9.0, 9.0, 0)):
        path = plan_path(g, Pose2(1.0, 1.0, 0), goal)
        euclid = math.hypot(goal.x - 1.0, goal.y - 1.0)
        assert abs(path.length - euclid) <= 0.05 * math.sqrt(2) + 1e-9
        d = np.diff(path.cells, axis=0)
        assert np.all(d == d[0])


def test_wall_gap_matches_dijkstra():
    g = Grid2.empty(6, 4, 0.05)
    g.fill_rect(3.0, 0.0, 3.1, 1.6)
    g.fill_rect(3.0, 2.0, 3.1, 4.0)
    cm = CostMap.from_static(g, AnticipationParams(inflation_radius=0.1))
    path = plan_path(cm, Pose2(1, 1, 0), Pose2(5, 3, 0))
    assert np.any((path.cells[:, 0] == 61) & (path.cells[:, 1] >= 32) & (path.cells[:, 1] < 40))
    oracle = dijkstra_cost(cm.combined, (20, 20), (100, 60), 0.05, PATH_COST_WEIGHT, INSCRIBED)
    assert path.cost == pytest.approx(oracle, rel=1e-9)
    assert path_cost(cm.combined, path.cells, 0.05) == pytest.approx(path.cost, rel=1e-9)


def test_virtual_disk_detour_clearance():
    g = Grid2.empty(10, 6, 0.05)
    cm = CostMap.from_static(g)
    robot = Pose2(1, 3, 0)
    cm = update_costmap(cm, None, build_virtual_cloud([Track((5, 3), ((5.0, 3.0),))], robot), robot)
    path = plan_path(cm, robot, Pose2(9, 3, 0))
    clearance = np.min(np.hypot(path.waypoints[:, 0] - 5, path.waypoints[:, 1] - 3))
    assert clearance >= cm.params.person_inflation
    assert path.length > 8.0 + 0.1


def test_unreachable_goal():
    g = Grid2.empty(4, 4, 0.05)
    g.fill_rect(2.0, 0.0, 2.2, 4.0)
    with pytest.raises(NoPathError, match="goal unreachable"):
        plan_path(g, Pose2(1, 1, 0), Pose2(3, 3, 0))


def test_lethal_goal_substituted():
    g = Grid2.empty(4, 4, 0.05)
    g.fill_rect(2.9, 2.9, 3.1, 3.1)
    path = plan_path(g, Pose2(1, 1, 0), Pose2(3.0, 3.0, 0))
    assert math.dist(path.waypoints[-1], (3.0, 3.0)) <= 0.5
    assert g.cells[path.cells[-1][1], path.cells[-1][0]] < INSCRIBED


def random_cost_map(rng, w, h):
    cost = np.zeros((h, w), np.uint8)
    blobs = rng.integers(0, max(2, w * h // 80))
    for _ in range(blobs):
        x, y = rng.integers(0, w), rng.integers(0, h)
        cost[y:y + rng.integers(1, 8), x:x + rng.integers(1, 8)] = LETHAL
    soft = rng.random((h, w)) < 0.3
    cost[soft & (cost == 0)] = rng.integers(1, 253, np.count_nonzero(soft & (cost == 0)))
    return cost


def test_astar_equals_dijkstra_random_maps():
    rng = np.random.default_rng(21)
    for _ in range(30):
        w, h = rng.integers(5, 60, 2)
        cost = random_cost_map(rng, w, h)
        g = Grid2(0.05, (0.0, 0.0), w * 0.05, h * 0.05, cost)
        (sx, sy), (gx, gy) = rng.integers(0, (w, h)), rng.integers(0, (w, h))
        cost[sy, sx] = cost[gy, gx] = 0
        start, goal = Pose2((sx + 0.5) * 0.05, (sy + 0.5) * 0.05), Pose2((gx + 0.5) * 0.05, (gy + 0.5) * 0.05)
        oracle = dijkstra_cost(cost, (sx, sy), (gx, gy), 0.05, PATH_COST_WEIGHT, INSCRIBED)
        if math.isinf(oracle):
            with pytest.raises(NoPathError):
                plan_path(g, start, goal)
            continue
        path = plan_path(g, start, goal)
        assert path.cost == pytest.approx(oracle, rel=1e-9, abs=1e-12)
        assert path_cost(cost, path.cells, 0.05) == pytest.approx(path.cost, rel=1e-9, abs=1e-12)


# ---------------------------------------------------------------- safety metric

def test_safety_static_pair():
    assert min_safety_distance([((0.0, 0.0), 0.27, [(2.0, 0.0)])]) == pytest.approx(1.48)


def test_safety_contact_clamped():
    assert min_safety_distance([((0.0, 0.0), 0.27, [(0.3, 0.0)])]) == 0.0
    with pytest.raises(ValueError):
        min_safety_distance([((0.0, 0.0), 0.27, [])])


def test_safety_matches_brute_force():
    rng = np.random.default_rng(3)
    robot = np.cumsum(rng.normal(0, 0.02, (300, 2)), axis=0)
    persons = np.stack([np.linspace(-3, 3, 300), np.full(300, 0.8)], axis=1)[:, None, :] + rng.normal(0, 0.01, (300, 2, 2))
    trace = [(tuple(r), 0.27, [tuple(p) for p in ps]) for r, ps in zip(robot, persons)]
    brute = np.min(np.maximum(0, np.linalg.norm(persons - robot[:, None, :], axis=2) - 0.52))
    assert min_safety_distance(trace) == pytest.approx(brute, abs=1e-12)
    assert surface_distance((0, 0), 0.27, (1, 0)) == pytest.approx(0.48)
