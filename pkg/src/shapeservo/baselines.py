"""RRT over grasp positions, using the simulator as the forward model and a
Chamfer ball around the goal cloud as the goal region."""
from __future__ import annotations

import csv
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import cloudops, simkit
from .servo import DEFAULT_CAMERA, observe

WAYPOINT_MAGIC = b"WPT1"


@dataclass
class RrtParams:
    max_nodes: int = 500
    step: float = 0.02            # m
    goal_bias: float = 0.1
    workspace: tuple | None = None  # (lo, hi) corners in m; None = 0.1 m around the root
    seed: int = 0


@dataclass
class RrtNode:
    position: np.ndarray
    parent: int | None
    state: simkit.BodyState
    chamfer: float


@dataclass
class PlanResult:
    success: bool
    waypoints: list               # grasp positions from the root to the goal node
    wall_time: float              # s
    tree_size: int
    final_chamfer: float
    node_log: list = field(default_factory=list)  # (node, parent, chamfer m^2, elapsed s)
    positions: list = field(default_factory=list)  # grasp position per node

    def path_to(self, node: int) -> list:
        """Grasp positions from the root to ``node``."""
        parents = [entry[1] for entry in self.node_log]
        chain = []
        while node != -1:
            chain.append(self.positions[node].copy())
            node = parents[node]
        return chain[::-1]


def displaced_region_centroid(initial_cloud, goal, fraction: float = 0.5) -> np.ndarray:
    """Centroid of the goal points that moved most: those whose distance to
    the initial cloud is at least ``fraction`` of the largest such distance."""
    goal = cloudops.as_cloud(goal)
    d = np.sqrt(cloudops.nearest_sq_dists(goal, initial_cloud))
    top = d.max()
    if top <= 0:
        return goal.mean(axis=0)
    return goal[d >= fraction * top].mean(axis=0)


def rrt_plan(body: simkit.DeformableBody, goal, tol: float, params: RrtParams = RrtParams(),
             camera_dir=DEFAULT_CAMERA, sim: simkit.SimConfig = simkit.DEFAULT_SIM) -> PlanResult:
    """Grow a tree of grasp positions from the body's current grasp.

    Every extension restores the nearest node's cached body state and
    settles one step toward the sample. The body is left in the state of
    the last simulated node; callers restore it as needed.
    """
    if body.grasp is None:
        raise simkit.PreconditionError("rrt_plan needs a grasped body")
    if params.step > sim.max_step * (1 + 1e-12):
        raise ValueError("rrt step exceeds the simulator max step")
    goal = cloudops.as_cloud(goal)
    t0 = time.perf_counter()
    root_pos = body.grasp.target.copy()
    lo, hi = ((root_pos - 0.1, root_pos + 0.1) if params.workspace is None
              else (np.asarray(w, dtype=np.float64) for w in params.workspace))
    if np.any(root_pos < lo) or np.any(root_pos > hi):
        raise ValueError("workspace box must contain the initial grasp position")
    rng = np.random.default_rng(params.seed)
    view = observe(body, camera_dir)
    c0 = cloudops.chamfer(view, goal)
    nodes = [RrtNode(root_pos, None, body.state(), c0)]
    log = [(0, -1, c0, time.perf_counter() - t0)]
    bias_point = np.clip(displaced_region_centroid(view, goal), lo, hi)
    positions = [root_pos]
    hit = 0 if c0 <= tol else None
    attempts = 0
    while hit is None and len(nodes) < params.max_nodes and attempts < 20 * params.max_nodes:
        attempts += 1
        sample = bias_point if rng.random() < params.goal_bias else rng.uniform(lo, hi)
        d = np.linalg.norm(np.asarray(positions) - sample, axis=1)
        near = int(np.argmin(d))
        if d[near] < 1e-12:
            continue
        new = nodes[near].position + (sample - nodes[near].position) * (min(params.step, d[near]) / d[near])
        body.restore(nodes[near].state)
        try:
            report = simkit.settle(body, new, sim)
        except simkit.NumericalBlowup:
            continue
        if not report.converged:
            continue
        c = cloudops.chamfer(observe(body, camera_dir), goal)
        nodes.append(RrtNode(new, near, body.state(), c))
        positions.append(new)
        log.append((len(nodes) - 1, near, c, time.perf_counter() - t0))
        if c <= tol:
            hit = len(nodes) - 1
    wall = time.perf_counter() - t0
    if hit is None:
        best = min(n.chamfer for n in nodes)
        return PlanResult(False, [], wall, len(nodes), best, log, positions)
    body.restore(nodes[hit].state)
    result = PlanResult(True, [], wall, len(nodes), nodes[hit].chamfer, log, positions)
    result.waypoints = result.path_to(hit)
    return result


def execute_plan(body: simkit.DeformableBody, waypoints, goal=None, camera_dir=DEFAULT_CAMERA,
                 sim: simkit.SimConfig = simkit.DEFAULT_SIM):
    """Open-loop replay of ``waypoints`` (the first is the start position).

    Returns the final observed cloud and its Chamfer distance to ``goal``
    (None without a goal).
    """
    if body.grasp is None:
        raise simkit.PreconditionError("execute_plan needs a grasped body")
    for w in waypoints[1:]:
        report = simkit.settle(body, w, sim)
        if not report.converged:
            raise simkit.SimulationError("settle did not converge during plan execution")
    cloud = observe(body, camera_dir)
    return cloud, (None if goal is None else cloudops.chamfer(cloud, goal))


# -- output ----------------------------------------------------------------

def write_plan_csv(result: PlanResult, path) -> None:
    """Tree log without timings, so repeated runs give identical files."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "parent", "chamfer_m2"])
        for node, parent, c, _ in result.node_log:
            w.writerow([node, parent, repr(float(c))])


def encode_waypoints(waypoints) -> bytes:
    pts = np.asarray(waypoints, dtype="<f8").reshape(-1, 3)
    return WAYPOINT_MAGIC + struct.pack("<I", len(pts)) + pts.tobytes()


def decode_waypoints(buf: bytes) -> np.ndarray:
    if buf[:4] != WAYPOINT_MAGIC:
        raise ValueError("bad waypoint magic")
    (n,) = struct.unpack_from("<I", buf, 4)
    if len(buf) != 8 + 24 * n:
        raise ValueError("waypoint file size does not match its count")
    return np.frombuffer(buf[8:], dtype="<f8").reshape(n, 3).astype(np.float64)
