import numpy as np
import pytest

from shapeservo import baselines as bl
from shapeservo import cloudops as co
from shapeservo import simkit as sk
from shapeservo.servo import observe

from simcases import far_grasp_point

BOX = sk.PrimitiveSpec("box", (0.2, 0.1, 0.05), 0.025)
PULL = np.array([0.0, 0.6, 0.8]) * 0.05


@pytest.fixture(scope="module")
def rest():
    return sk.build_primitive(BOX, 5000.0)


def grasped(rest, young_modulus=None):
    body = rest.copy() if young_modulus is None else rest.with_young_modulus(young_modulus)
    sk.grasp(body, far_grasp_point(body))
    return body


def pulled(rest, offset):
    body = grasped(rest)
    start = body.grasp.target.copy()
    n = int(np.ceil(np.linalg.norm(offset) / 0.02 - 1e-12))
    for i in range(1, n + 1):
        assert sk.settle(body, start + offset * i / n).converged
    return body


@pytest.fixture(scope="module")
def pull_goal(rest):
    goal = observe(pulled(rest, PULL))
    # resolution of the goal: one extra centimeter along the pull
    noise = co.chamfer(observe(pulled(rest, PULL * 1.2)), goal)
    return goal, noise


@pytest.fixture(scope="module")
def pull_plan(rest, pull_goal):
    goal, noise = pull_goal
    body = grasped(rest)
    return bl.rrt_plan(body, goal, 2 * noise, bl.RrtParams(max_nodes=500, seed=0)), 2 * noise


def test_goal_equal_to_initial(rest):
    body = grasped(rest)
    res = bl.rrt_plan(body, observe(body), 1e-9)
    assert res.success and res.tree_size == 1
    assert len(res.waypoints) == 1 and np.array_equal(res.waypoints[0], body.grasp.target)


def test_single_pull_found(pull_plan):
    res, tol = pull_plan
    assert res.success
    assert res.tree_size <= 500
    assert res.final_chamfer <= tol
    assert len(res.waypoints) >= 2


def test_tree_invariants(pull_plan):
    res, _ = pull_plan
    assert len(res.node_log) == res.tree_size == len(res.positions)
    assert res.node_log[0][1] == -1
    for node, parent, _, _ in res.node_log[1:]:
        assert 0 <= parent < node
        assert np.linalg.norm(res.positions[node] - res.positions[parent]) <= 0.02 + 1e-9
    w = np.asarray(res.waypoints)
    assert np.all(np.linalg.norm(np.diff(w, axis=0), axis=1) <= 0.02 + 1e-9)


def test_execution_reproduces_planning(rest, pull_goal, pull_plan):
    res, _ = pull_plan
    _, c = bl.execute_plan(grasped(rest), res.waypoints, pull_goal[0])
    assert abs(c - res.final_chamfer) <= 1e-9


def test_perturbed_stiffness_degrades(rest, pull_goal, pull_plan):
    res, _ = pull_plan
    _, c = bl.execute_plan(grasped(rest, 2500.0), res.waypoints, pull_goal[0])
    assert c >= res.final_chamfer


def test_empty_motion_gives_initial_chamfer(rest, pull_goal):
    body = grasped(rest)
    start = [body.grasp.target.copy()]
    _, c = bl.execute_plan(body, start, pull_goal[0])
    assert c == co.chamfer(observe(grasped(rest)), pull_goal[0])


def test_planning_is_deterministic(rest, pull_goal):
    goal, noise = pull_goal
    p = bl.RrtParams(max_nodes=40, seed=3)
    a = bl.rrt_plan(grasped(rest), goal, 2 * noise, p)
    b = bl.rrt_plan(grasped(rest), goal, 2 * noise, p)
    assert [x[:3] for x in a.node_log] == [x[:3] for x in b.node_log]
    assert all(np.array_equal(u, v) for u, v in zip(a.positions, b.positions))


def test_workspace_excluding_goal_fails(rest, pull_goal):
    goal, noise = pull_goal
    body = grasped(rest)
    start = body.grasp.target
    # only motion away from the goal is allowed
    ws = (start - [0.05, 0.05, 0.05], start + [0.05, 0.0, 0.0])
    res = bl.rrt_plan(body, goal, 2 * noise, bl.RrtParams(max_nodes=60, workspace=ws))
    assert not res.success and res.waypoints == []
    assert res.tree_size == 60


def test_preconditions(rest):
    with pytest.raises(sk.PreconditionError):
        bl.rrt_plan(rest.copy(), np.zeros((5, 3)), 1.0)
    body = grasped(rest)
    with pytest.raises(ValueError):
        bl.rrt_plan(body, np.zeros((5, 3)), 1.0, bl.RrtParams(workspace=(np.zeros(3), np.ones(3) * 1e-3)))
    with pytest.raises(ValueError):
        bl.rrt_plan(body, np.zeros((5, 3)), 1.0, bl.RrtParams(step=0.05))


def test_displaced_region_centroid():
    initial = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
    goal = np.array([[0.0, 0, 0], [1.0, 0, 0.5], [2.0, 0, 1.0]])
    assert np.array_equal(bl.displaced_region_centroid(initial, goal), [1.5, 0, 0.75])
    assert np.array_equal(bl.displaced_region_centroid(initial, initial), initial.mean(axis=0))


def test_waypoint_codec():
    w = np.random.default_rng(0).normal(size=(7, 3))
    assert np.array_equal(bl.decode_waypoints(bl.encode_waypoints(w)), w)
    buf = bl.encode_waypoints(w)
    with pytest.raises(ValueError):
        bl.decode_waypoints(buf[:-1])
    with pytest.raises(ValueError):
        bl.decode_waypoints(b"XXXX" + buf[4:])
    assert bl.decode_waypoints(bl.encode_waypoints(np.zeros((0, 3)))).shape == (0, 3)


def test_plan_csv(tmp_path, pull_plan):
    res, _ = pull_plan
    bl.write_plan_csv(res, tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "node,parent,chamfer_m2" and len(lines) == res.tree_size + 1
