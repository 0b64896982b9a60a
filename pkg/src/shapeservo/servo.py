"""Closed-loop shape servoing and plane-goal retraction."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import cloudops, deformernet as dn, simkit

DEFAULT_CAMERA = tuple(np.array([-0.25, -0.5, -1.0]) / np.linalg.norm([-0.25, -0.5, -1.0]))


class ServoAbort(RuntimeError):
    """The episode cannot continue (settle failed or nothing is visible)."""


def observe(body: simkit.DeformableBody, camera_dir=DEFAULT_CAMERA) -> np.ndarray:
    pts, normals = simkit.surface_cloud(body)
    return cloudops.partial_view(pts, normals, camera_dir)


@dataclass
class ServoResult:
    success: bool
    iterations: int
    chamfer_trace: list             # (iteration, chamfer m^2)
    final_cloud: np.ndarray
    actions: list = field(default_factory=list)
    reason: str = ""

    @property
    def initial_chamfer(self) -> float:
        return self.chamfer_trace[0][1]

    @property
    def final_chamfer(self) -> float:
        return self.chamfer_trace[-1][1]


def _stalled(values, window: int, ratio: float) -> bool:
    if window <= 0 or len(values) <= window:
        return False
    before, now = values[-window - 1], values[-1]
    return before - now < ratio * before


def _clip_to_workspace(target, workspace):
    if workspace is None:
        return target
    lo, hi = (np.asarray(w, dtype=np.float64) for w in workspace)
    return np.clip(target, lo, hi)


def servo_loop(model: dn.DeformerNetModel, body: simkit.DeformableBody, goal, tol: float,
               max_iters: int = 30, camera_dir=DEFAULT_CAMERA, sim: simkit.SimConfig = simkit.DEFAULT_SIM,
               stall_window: int = 5, stall_ratio: float = 0.01, workspace=None, done=None) -> ServoResult:
    """Drive ``body`` toward the goal cloud with the learned controller.

    Each iteration observes the partial view, asks the model for a
    displacement, clamps it to the simulator step and settles. Stops when
    the Chamfer distance to the goal is within ``tol`` (or ``done(cloud)``
    holds), after ``max_iters`` actions, or when the last ``stall_window``
    actions improved the Chamfer distance by less than ``stall_ratio``.
    """
    if body.grasp is None:
        raise simkit.PreconditionError("servo needs a grasped body")
    goal = cloudops.as_cloud(goal)
    n = model.config.n_points
    goal_geom = dn.prepare_cloud(cloudops.preprocess_cloud(goal, n), model.config)

    def look():
        cloud = observe(body, camera_dir)
        if len(cloud) == 0:
            raise ServoAbort("partial view is empty")
        return cloud

    def reached(cloud, c):
        return c <= tol if done is None else bool(done(cloud))

    cloud = look()
    trace = [(0, cloudops.chamfer(cloud, goal))]
    actions = []
    reason = "max_iters"
    while True:
        it, c = trace[-1]
        if reached(cloud, c):
            reason = "reached"
            break
        if it >= max_iters:
            break
        if _stalled([t[1] for t in trace], stall_window, stall_ratio):
            reason = "stalled"
            break
        current = dn.prepare_cloud(cloudops.preprocess_cloud(cloud, n), model.config)
        action = dn.clamp_action(dn.forward(model, current, goal_geom), sim.max_step)
        here = body.grasp.target
        target = _clip_to_workspace(here + action, workspace)
        action = target - here
        assert np.linalg.norm(action) <= sim.max_step * (1 + 1e-9), "clamped action exceeds max step"
        report = simkit.settle(body, target, sim)
        if not report.converged:
            raise ServoAbort(f"settle did not converge at iteration {it + 1} "
                             f"(residual {report.residual:.2e} m/s after {report.iterations} steps)")
        actions.append(action)
        cloud = look()
        trace.append((it + 1, cloudops.chamfer(cloud, goal)))
    c = trace[-1][1]
    return ServoResult(reached(cloud, c), trace[-1][0], trace, cloud, actions, reason)


def write_servo_csv(result: ServoResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "chamfer_m2", "action_x_m", "action_y_m", "action_z_m"])
        for (it, c) in result.chamfer_trace:
            a = result.actions[it - 1] if it >= 1 else np.zeros(3)
            w.writerow([it, repr(float(c))] + [repr(float(x)) for x in a])


# -- retraction ------------------------------------------------------------

def rotation_between(a, b) -> np.ndarray:
    """Smallest rotation matrix carrying unit vector ``a`` onto ``b``."""
    a = np.asarray(a, dtype=np.float64) / np.linalg.norm(a)
    b = np.asarray(b, dtype=np.float64) / np.linalg.norm(b)
    axis = np.cross(a, b)
    s = np.linalg.norm(axis)
    c = float(np.clip(a @ b, -1.0, 1.0))
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        # antiparallel: half turn about any axis orthogonal to a
        helper = np.eye(3)[int(np.argmin(np.abs(a)))]
        k = np.cross(a, helper)
        k /= np.linalg.norm(k)
        return 2.0 * np.outer(k, k) - np.eye(3)
    k = axis / s
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + s * K + (1 - c) * (K @ K)


def plane_goal_cloud(current, target: cloudops.Plane, inlier_tol: float = 1e-3, seed: int = 0,
                     iters: int = 200) -> np.ndarray:
    """Goal cloud for retraction past ``target``.

    The dominant plane of ``current`` is rotated onto the target plane
    about its inlier centroid; only points on the wrong (negative) side
    of the target are moved.
    """
    pts = cloudops.as_cloud(current)
    if len(pts) < 3:
        raise cloudops.CloudError("plane goal needs at least 3 points")
    dom = cloudops.ransac_plane(pts, iters=iters, inlier_tol=inlier_tol, seed=seed)
    R = rotation_between(dom.normal, target.normal)
    out = pts.copy()
    wrong = target.signed_distance(pts) < 0
    out[wrong] = dom.point + (pts[wrong] - dom.point) @ R.T
    return out


@dataclass
class RetractConfig:
    shift_step: float = 0.01      # m
    max_shifts: int = 5
    side_tol: float | None = None  # m; None means twice the node spacing
    tol: float = 1e-6              # m^2, Chamfer tolerance for each servo stage
    max_iters: int = 30
    inlier_tol: float = 1e-3
    seed: int = 0


@dataclass
class RetractResult:
    success: bool
    shifts: int
    servo: list                  # ServoResult per stage
    final_cloud: np.ndarray

    @property
    def actions(self) -> int:
        return sum(len(r.actions) for r in self.servo)


def retracted(cloud, plane: cloudops.Plane, side_tol: float) -> bool:
    """True when no point lies more than ``side_tol`` on the negative side."""
    cloud = cloudops.as_cloud(cloud, allow_empty=True)
    return bool(len(cloud) > 0 and plane.signed_distance(cloud).min() >= -side_tol)


def retract(model: dn.DeformerNetModel, body: simkit.DeformableBody, target: cloudops.Plane,
            config: RetractConfig = RetractConfig(), camera_dir=DEFAULT_CAMERA,
            sim: simkit.SimConfig = simkit.DEFAULT_SIM, workspace=None) -> RetractResult:
    side_tol = 2.0 * body.spacing if config.side_tol is None else config.side_tol
    done = lambda c: retracted(c, target, side_tol)  # noqa: E731
    cloud = observe(body, camera_dir)
    stages = []
    plane = target
    shifts = 0
    while not done(cloud):
        if stages:
            if shifts >= config.max_shifts:
                break
            plane = plane.shifted(config.shift_step)
            shifts += 1
        goal = plane_goal_cloud(cloud, plane, config.inlier_tol, config.seed)
        res = servo_loop(model, body, goal, config.tol, config.max_iters, camera_dir, sim,
                         workspace=workspace, done=done)
        stages.append(res)
        cloud = res.final_cloud
    return RetractResult(done(cloud), shifts, stages, cloud)
