"""Evaluation protocols: servo on in/out-of-distribution goals, the RRT
comparison, plane retraction and manipulation-point prediction.

Result files are deterministic given config and seed; wall-clock
measurements go to separate ``*timing.csv`` files.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import baselines, cloudops, deformernet as dn, manippoint, servo, simkit
from . import datasets as D
from .config import ExperimentConfig, derive_seed, rng_for


def _r(x) -> str:
    return repr(float(x))


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# -- test goals --------------------------------------------------------------

@dataclass
class TestCase:
    index: int
    split: str                     # "id" or "ood"
    obj: D.TrialObject
    mp: np.ndarray
    path_seed: int
    n_moves: int

    def body(self, cfg: ExperimentConfig) -> simkit.DeformableBody:
        """Fresh body at rest, grasped at the manipulation point."""
        body = D.build(self.obj)
        simkit.grasp(body, self.mp)
        return body

    def workspace(self, cfg: ExperimentConfig, body):
        return D.workspace_around(body.grasp.origin, cfg.workspace_half)

    def goal(self, cfg: ExperimentConfig):
        """Simulate the held-out pull; returns (goal cloud, goal ee, goal node positions)."""
        body = self.body(cfg)
        rng = np.random.default_rng(self.path_seed)
        cps = D.random_pull(body, rng, self.n_moves, cfg.checkpoint_spacing, cfg.redirect_every,
                            self.workspace(cfg, body), cfg.camera)
        if cps is None:
            raise simkit.SimulationError(f"goal simulation failed for case {self.index}")
        return cps[-1].cloud, cps[-1].ee, body.positions.copy()


def make_cases(cfg: ExperimentConfig) -> list:
    cases = []
    for split, stream, count, sampler in (("id", D.TEST_ID, cfg.n_test_id, D.sample_training_object),
                                          ("ood", D.TEST_OOD, cfg.n_test_ood, D.sample_ood_object)):
        for i in range(count):
            obj = sampler(cfg, rng_for(cfg.seed, stream, i))
            body = D.build(obj)
            mp = D.manipulation_point(cfg, body, rng_for(cfg.seed, stream, i, 1))
            rng = rng_for(cfg.seed, stream, i, 2)
            n_moves = int(rng.integers(cfg.moves_min, cfg.moves_max + 1))
            cases.append(TestCase(len(cases), split, obj, mp, derive_seed(cfg.seed, stream, i, 3), n_moves))
    return cases


GOAL_HEADER = ["goal", "split", "kind", "dim0_m", "dim1_m", "dim2_m", "resolution_m", "young_modulus_pa",
               "mp_x_m", "mp_y_m", "mp_z_m", "path_seed", "moves"]


def write_goals(path, cases) -> None:
    rows = []
    for c in cases:
        d = list(c.obj.spec.dimensions) + [0.0] * (3 - len(c.obj.spec.dimensions))
        rows.append([c.index, c.split, c.obj.spec.kind] + [_r(x) for x in d]
                    + [_r(c.obj.spec.resolution), _r(c.obj.young_modulus)]
                    + [_r(x) for x in c.mp] + [c.path_seed, c.n_moves])
    _write_csv(path, GOAL_HEADER, rows)


def read_goals(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != GOAL_HEADER:
            raise ValueError(f"{path}: not a goals file")
        cases = []
        for row in reader:
            kind = row[2]
            n = {"box": 3, "cylinder": 2, "hemisphere": 1}[kind]
            dims = tuple(float(x) for x in row[3:3 + n])
            spec = simkit.PrimitiveSpec(kind, dims, float(row[6]))
            obj = D.TrialObject(spec, float(row[7]))
            mp = np.array([float(x) for x in row[8:11]])
            cases.append(TestCase(int(row[0]), row[1], obj, mp, int(row[11]), int(row[12])))
    return cases


# -- statistics --------------------------------------------------------------

def quartiles(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {k: float("nan") for k in ("min", "q1", "median", "q3", "max")}
    q = np.percentile(v, [0, 25, 50, 75, 100])
    return dict(zip(("min", "q1", "median", "q3", "max"), (float(x) for x in q)))


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054):
    if n == 0:
        return (0.0, 1.0)
    p = successes / n
    den = 1 + z * z / n
    mid = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return (max(0.0, mid - half), min(1.0, mid + half))


def tolerance_ladder(cfg: ExperimentConfig, initial_chamfers) -> tuple:
    """Absolute ladder from the config, or the calibrated one: the 75th
    percentile of initial Chamfer distances / 10, scaled by the fractions."""
    if cfg.tolerances:
        return tuple(cfg.tolerances)
    if len(initial_chamfers) == 0:
        return ()
    loose = float(np.percentile(initial_chamfers, 75)) / 10.0
    return tuple(loose * f for f in cfg.tolerance_fractions)


def success_rates(traces, ladder) -> list:
    """Fraction of episodes whose trace reaches each tolerance.

    An episode run to the tightest tolerance passes through exactly the
    states a run stopped at a looser tolerance would visit, so one run per
    goal serves the whole ladder."""
    out = []
    for tol in ladder:
        hits = sum(1 for t in traces if min(t) <= tol)
        out.append(hits / len(traces) if traces else float("nan"))
    return out


def success_svg(ladder, curves: dict, title: str) -> str:
    """Static line plot of success rate against tolerance (log x)."""
    W, H, L, R, T, B = 480, 320, 60, 20, 30, 50
    xs = np.log10(np.asarray(ladder, dtype=np.float64))
    x0, x1 = (xs.min(), xs.max()) if len(xs) else (0.0, 1.0)
    if x1 - x0 < 1e-12:
        x0, x1 = x0 - 0.5, x1 + 0.5

    def px(x):
        return L + (x - x0) / (x1 - x0) * (W - L - R)

    def py(y):
        return H - B - y * (H - T - B)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
             '<rect width="100%" height="100%" fill="white"/>',
             f'<text x="{W / 2:.0f}" y="18" text-anchor="middle" font-family="sans-serif" font-size="13">{title}</text>',
             f'<line x1="{L}" y1="{H - B}" x2="{W - R}" y2="{H - B}" stroke="black"/>',
             f'<line x1="{L}" y1="{T}" x2="{L}" y2="{H - B}" stroke="black"/>']
    for y in (0.0, 0.5, 1.0):
        parts.append(f'<text x="{L - 6}" y="{py(y) + 4:.1f}" text-anchor="end" font-family="sans-serif" '
                     f'font-size="10">{y:.1f}</text>')
    for x, tol in zip(xs, ladder):
        parts.append(f'<text x="{px(x):.1f}" y="{H - B + 14}" text-anchor="middle" font-family="sans-serif" '
                     f'font-size="9">{tol:.1e}</text>')
    parts.append(f'<text x="{W / 2:.0f}" y="{H - 12}" text-anchor="middle" font-family="sans-serif" '
                 'font-size="11">goal tolerance (m^2)</text>')
    parts.append(f'<text x="14" y="{H / 2:.0f}" text-anchor="middle" font-family="sans-serif" font-size="11" '
                 f'transform="rotate(-90 14 {H / 2:.0f})">success rate</text>')
    for k, (name, ys) in enumerate(curves.items()):
        col = colors[k % len(colors)]
        pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(xs, ys) if np.isfinite(y))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{col}" stroke-width="2"/>')
        parts.append(f'<text x="{W - R - 4}" y="{T + 14 * (k + 1)}" text-anchor="end" font-family="sans-serif" '
                     f'font-size="11" fill="{col}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# -- servo evaluation ----------------------------------------------------------

@dataclass
class Episode:
    case: TestCase
    result: servo.ServoResult
    wall_time: float
    goal_chamfer_sym: float


def run_episode(model, case: TestCase, cfg: ExperimentConfig, tol: float, goal=None) -> Episode:
    goal_cloud = case.goal(cfg)[0] if goal is None else goal
    body = case.body(cfg)
    t0 = time.perf_counter()
    res = servo.servo_loop(model, body, goal_cloud, tol, cfg.servo_max_iters, cfg.camera,
                           stall_window=cfg.stall_window, stall_ratio=cfg.stall_ratio,
                           workspace=case.workspace(cfg, body))
    wall = time.perf_counter() - t0
    return Episode(case, res, wall, cloudops.chamfer_symmetric(res.final_cloud, goal_cloud))


def eval_servo(model, cfg: ExperimentConfig, out, cases=None) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cases = make_cases(cfg) if cases is None else cases
    write_goals(out / "goals.csv", cases)
    goals = [c.goal(cfg)[0] for c in cases]
    initial = []
    for c, g in zip(cases, goals):
        initial.append(cloudops.chamfer(servo.observe(c.body(cfg), cfg.camera), g))
    ladder = tolerance_ladder(cfg, [ini for c, ini in zip(cases, initial) if c.split == "id"] or initial)
    tight = ladder[-1] if ladder else 0.0
    episodes = [run_episode(model, c, cfg, tight, g) for c, g in zip(cases, goals)]

    rows = []
    for ep in episodes:
        r = ep.result
        rows.append([ep.case.index, ep.case.split, _r(ep.case.obj.young_modulus), _r(r.initial_chamfer),
                     _r(r.final_chamfer), _r(min(t[1] for t in r.chamfer_trace)), _r(ep.goal_chamfer_sym),
                     r.iterations, r.reason, int(r.final_chamfer < r.initial_chamfer)]
                    + [int(min(t[1] for t in r.chamfer_trace) <= tol) for tol in ladder])
    _write_csv(out / "episodes.csv",
               ["goal", "split", "young_modulus_pa", "initial_chamfer_m2", "final_chamfer_m2", "best_chamfer_m2",
                "final_symmetric_chamfer_m2", "iterations", "stop", "improved"]
               + [f"success_at_{tol:.3e}_m2" for tol in ladder], rows)
    trace_rows = [[ep.case.index, it, _r(c)] for ep in episodes for it, c in ep.result.chamfer_trace]
    _write_csv(out / "traces.csv", ["goal", "iteration", "chamfer_m2"], trace_rows)

    summary = {}
    srows = []
    curves = {}
    for split in ("id", "ood"):
        eps = [e for e in episodes if e.case.split == split]
        q = quartiles([e.result.final_chamfer for e in eps])
        summary[split] = {"final": q, "n": len(eps),
                          "improved": sum(e.result.final_chamfer < e.result.initial_chamfer for e in eps),
                          "initial": quartiles([e.result.initial_chamfer for e in eps])}
        srows.append([split, len(eps)] + [_r(q[k]) for k in ("min", "q1", "median", "q3", "max")])
        curves[split] = success_rates([[t[1] for t in e.result.chamfer_trace] for e in eps], ladder)
        summary[split]["success"] = curves[split]
    _write_csv(out / "chamfer_summary.csv", ["split", "episodes", "min_m2", "q1_m2", "median_m2", "q3_m2", "max_m2"],
               srows)
    _write_csv(out / "success_vs_tolerance.csv", ["tolerance_m2", "success_rate_id", "success_rate_ood"],
               [[_r(t), _r(a), _r(b)] for t, a, b in zip(ladder, curves["id"], curves["ood"])])
    (out / "success_vs_tolerance.svg").write_text(success_svg(ladder, {"in-distribution": curves["id"],
                                                                       "out-of-distribution": curves["ood"]},
                                                              "Servo success rate"))
    _write_csv(out / "servo_timing.csv", ["goal", "wall_time_s", "iterations"],
               [[e.case.index, f"{e.wall_time:.6f}", e.result.iterations] for e in episodes])
    summary["ladder"] = ladder
    summary["episodes"] = episodes
    return summary


# -- RRT comparison ------------------------------------------------------------

def eval_rrt(model, cfg: ExperimentConfig, out, cases=None, ladder=None) -> dict:
    """RRT and servo on the same goals. RRT grows one tree per goal until it
    reaches the tightest tolerance or the node budget; success at looser
    tolerances and their planning times are read off the node log."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if cases is None:
        cases = [c for c in make_cases(cfg) if c.split == "id"]
    cases = cases[:cfg.rrt_goals]
    write_goals(out / "goals.csv", cases)
    goals, goal_ee = [], []
    for c in cases:
        g, ee, _ = c.goal(cfg)
        goals.append(g)
        goal_ee.append(ee)
    if ladder is None:
        ladder = tolerance_ladder(cfg, [cloudops.chamfer(servo.observe(c.body(cfg), cfg.camera), g)
                                        for c, g in zip(cases, goals)])
    ladder = tuple(ladder)
    loose, tight = ladder[0], ladder[-1]
    rows, trows = [], []
    res = {"rrt": [], "servo": [], "rrt_time": [], "servo_time": [], "exec": [], "perturbed": []}
    for c, g in zip(cases, goals):
        body = c.body(cfg)
        params = baselines.RrtParams(cfg.rrt_max_nodes, cfg.rrt_step, cfg.rrt_goal_bias,
                                     c.workspace(cfg, body), derive_seed(cfg.seed, D.RRT_GOALS, c.index))
        plan = baselines.rrt_plan(body, g, tight, params, cfg.camera)
        chamfers = np.array([n[2] for n in plan.node_log])
        elapsed = np.array([n[3] for n in plan.node_log])
        rrt_ok = [bool((chamfers <= tol).any()) for tol in ladder]
        first = int(np.flatnonzero(chamfers <= loose)[0]) if rrt_ok[0] else -1
        rrt_time = float(elapsed[first]) if first >= 0 else plan.wall_time
        exec_c = pert_c = float("nan")
        if first >= 0:
            # open-loop replay of the loose-tolerance path, then with perturbed stiffness
            path = plan.path_to(first)
            fresh = c.body(cfg)
            _, exec_c = baselines.execute_plan(fresh, path, g, cfg.camera)
            soft = c.body(cfg).with_young_modulus(0.5 * c.obj.young_modulus)
            simkit.grasp(soft, c.mp)
            _, pert_c = baselines.execute_plan(soft, path, g, cfg.camera)
        ep = run_episode(model, c, cfg, loose, g)
        sv = [bool(min(t[1] for t in ep.result.chamfer_trace) <= tol) for tol in ladder]
        rows.append([c.index, plan.tree_size, _r(chamfers.min()), _r(exec_c), _r(pert_c),
                     _r(ep.result.final_chamfer), ep.result.iterations]
                    + [int(x) for x in rrt_ok] + [int(x) for x in sv])
        trows.append([c.index, f"{rrt_time:.6f}", f"{plan.wall_time:.6f}", f"{ep.wall_time:.6f}"])
        res["rrt"].append(rrt_ok)
        res["servo"].append(sv)
        res["rrt_time"].append(rrt_time)
        res["servo_time"].append(ep.wall_time)
        res["exec"].append((float(chamfers[first]) if first >= 0 else float("nan"), exec_c))
        res["perturbed"].append(pert_c)
    _write_csv(out / "rrt_comparison.csv",
               ["goal", "rrt_tree_size", "rrt_best_chamfer_m2", "rrt_exec_chamfer_m2", "rrt_exec_soft_chamfer_m2",
                "servo_final_chamfer_m2", "servo_iterations"]
               + [f"rrt_success_at_{t:.3e}_m2" for t in ladder] + [f"servo_success_at_{t:.3e}_m2" for t in ladder],
               rows)
    n = max(len(cases), 1)
    rrt_rate = [sum(r[i] for r in res["rrt"]) / n for i in range(len(ladder))]
    servo_rate = [sum(r[i] for r in res["servo"]) / n for i in range(len(ladder))]
    _write_csv(out / "rrt_success_vs_tolerance.csv", ["tolerance_m2", "rrt_success_rate", "servo_success_rate"],
               [[_r(t), _r(a), _r(b)] for t, a, b in zip(ladder, rrt_rate, servo_rate)])
    (out / "rrt_success_vs_tolerance.svg").write_text(
        success_svg(ladder, {"RRT": rrt_rate, "servo": servo_rate}, "RRT vs servo success rate"))
    _write_csv(out / "rrt_timing.csv", ["goal", "rrt_time_to_loose_goal_s", "rrt_total_s", "servo_wall_s"], trows)
    res.update(ladder=ladder, rrt_rate=rrt_rate, servo_rate=servo_rate)
    return res


# -- retraction ----------------------------------------------------------------

def sample_planes(cfg: ExperimentConfig, body: simkit.DeformableBody, count: int, max_tries: int = 10000):
    """Planes through the body's bounding box with upper-hemisphere normals.

    A plane is kept when every fixed node already lies on its positive side
    (otherwise no motion of the grasp could succeed) and the rest view does
    not already satisfy it.
    """
    rng = rng_for(cfg.seed, D.RETRACT_PLANES)
    lo, hi = body.positions.min(axis=0), body.positions.max(axis=0)
    fixed = body.positions[body.fixed]
    view = servo.observe(body, cfg.camera)
    side_tol = 2.0 * body.spacing
    planes = []
    for _ in range(max_tries):
        if len(planes) == count:
            break
        n = rng.normal(size=3)
        n[2] = abs(n[2])
        if np.linalg.norm(n) < 1e-9:
            continue
        plane = cloudops.Plane(rng.uniform(lo, hi), n)
        if plane.signed_distance(fixed).min() < 0:
            continue
        if servo.retracted(view, plane, side_tol):
            continue
        planes.append(plane)
    return planes


def eval_retraction(model, cfg: ExperimentConfig, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    obj = D.TrialObject(simkit.PrimitiveSpec(cfg.primitive, tuple(cfg.dims), cfg.resolution), cfg.stiffness_mean)
    rest = D.build(obj)
    mp = D.manipulation_point(cfg, rest, rng_for(cfg.seed, D.RETRACT_PLANES, 1))
    planes = sample_planes(cfg, rest, cfg.retract_planes)
    rcfg = servo.RetractConfig(cfg.shift_step, cfg.max_shifts, None, cfg.retract_tol, cfg.servo_max_iters)
    rows, trows, results = [], [], []
    for i, plane in enumerate(planes):
        body = rest.copy()
        simkit.grasp(body, mp)
        t0 = time.perf_counter()
        res = servo.retract(model, body, plane, rcfg, cfg.camera,
                            workspace=D.workspace_around(body.grasp.origin, cfg.workspace_half))
        wall = time.perf_counter() - t0
        worst = float(plane.signed_distance(res.final_cloud).min())
        certified = servo.retracted(res.final_cloud, plane, 2.0 * body.spacing)
        results.append((res, certified, worst))
        rows.append([i] + [_r(x) for x in plane.point] + [_r(x) for x in plane.normal]
                    + [int(res.success), int(certified), res.shifts, res.actions, _r(worst)])
        trows.append([i, f"{wall:.6f}"])
    _write_csv(out / "retraction.csv",
               ["plane", "point_x_m", "point_y_m", "point_z_m", "normal_x", "normal_y", "normal_z",
                "success", "certified", "shifts", "actions", "min_signed_distance_m"], rows)
    k = sum(r[0].success for r in results)
    lo, hi = wilson_interval(k, len(results))
    _write_csv(out / "retraction_summary.csv", ["planes", "successes", "success_rate", "wilson95_low", "wilson95_high"],
               [[len(results), k, _r(k / len(results) if results else float("nan")), _r(lo), _r(hi)]])
    _write_csv(out / "retraction_timing.csv", ["plane", "wall_time_s"], trows)
    return {"planes": planes, "results": results, "successes": k, "interval": (lo, hi)}


# -- manipulation point ----------------------------------------------------------

def predict_mp(cfg: ExperimentConfig, out, cases=None) -> list:
    """Heuristic grasp point for each goal, from node correspondence between
    the rest body and the simulated goal state."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cases = make_cases(cfg) if cases is None else cases
    rows, found = [], []
    mrows = []
    for c in cases:
        rest = D.build(c.obj)
        _, _, goal_pos = c.goal(cfg)
        K = min(cfg.keypoints, len(rest.surface))
        matches = manippoint.keypoints_from_correspondence(rest.positions, goal_pos, rest.surface, K)
        M = min(cfg.top_m, K)
        pm = manippoint.predict_manipulation_point(matches, M)
        snapped = manippoint.snap_to_surface(rest, pm)
        found.append((pm, snapped))
        rows.append([c.index, c.split] + [_r(x) for x in pm] + [_r(x) for x in snapped] + [_r(x) for x in c.mp]
                    + [_r(np.linalg.norm(snapped - c.mp))])
        for rank, m in enumerate(manippoint.top_matches(matches, M)):
            mrows.append([c.index, rank, m.node] + [_r(x) for x in m.u] + [_r(x) for x in m.v] + [_r(m.delta)])
    _write_csv(out / "manipulation_points.csv",
               ["goal", "split", "pm_x_m", "pm_y_m", "pm_z_m", "snapped_x_m", "snapped_y_m", "snapped_z_m",
                "true_x_m", "true_y_m", "true_z_m", "snapped_error_m"], rows)
    _write_csv(out / "top_matches.csv",
               ["goal", "rank", "node", "u_x_m", "u_y_m", "u_z_m", "v_x_m", "v_y_m", "v_z_m", "delta_m"], mrows)
    return found
