"""Training-data generation by random pulls in the simulator, and the DSET
file format (two PCL1 clouds plus a float64 action per record)."""
from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass

import numpy as np

from .. import cloudops, manippoint, simkit
from ..deformernet import TrainingSample
from ..servo import observe
from .config import ExperimentConfig, rng_for

log = logging.getLogger(__name__)

DSET_MAGIC = b"DSET"
DSET_VERSION = 1

# seed streams
TRAIN_OBJECTS, TRAIN_PATHS, PAIR_SUBSAMPLE = 1, 2, 3
TEST_ID, TEST_OOD, RRT_GOALS, RETRACT_PLANES = 11, 12, 13, 14


@dataclass
class TrialObject:
    spec: simkit.PrimitiveSpec
    young_modulus: float


@dataclass
class Checkpoint:
    cloud: np.ndarray        # partial view (m)
    ee: np.ndarray           # grasp target (m)


@dataclass
class TrajectoryRecord:
    obj: TrialObject
    mp: np.ndarray
    checkpoints: list


@dataclass
class PairRecord:
    current: np.ndarray
    goal: np.ndarray
    action: np.ndarray


# -- objects ---------------------------------------------------------------

def _stiffness(cfg: ExperimentConfig, rng) -> float:
    while True:
        e = rng.normal(cfg.stiffness_mean, cfg.stiffness_sigma)
        if e >= 0.2 * cfg.stiffness_mean:
            return float(e)


def sample_training_object(cfg: ExperimentConfig, rng) -> TrialObject:
    base = np.asarray(cfg.dims, dtype=np.float64)
    j = cfg.dims_jitter
    dims = base * rng.uniform(1 - j, 1 + j, size=len(base)) if j > 0 else base
    return TrialObject(simkit.PrimitiveSpec(cfg.primitive, tuple(dims), cfg.resolution), _stiffness(cfg, rng))


def sample_ood_object(cfg: ExperimentConfig, rng) -> TrialObject:
    """Dimensions scaled past the training range and stiffness 2-4 sigma
    away from the training mean (either side)."""
    base = np.asarray(cfg.dims, dtype=np.float64)
    lo, hi = cfg.ood_dim_scale
    dims = base * (1 + cfg.dims_jitter) * rng.uniform(lo, hi)
    k = rng.uniform(*cfg.ood_sigma)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    e = cfg.stiffness_mean + sign * k * cfg.stiffness_sigma
    if e <= 0.1 * cfg.stiffness_mean:
        e = cfg.stiffness_mean + k * cfg.stiffness_sigma
    return TrialObject(simkit.PrimitiveSpec(cfg.primitive, tuple(dims), cfg.resolution), float(e))


def build(obj: TrialObject) -> simkit.DeformableBody:
    return simkit.build_primitive(obj.spec, obj.young_modulus)


def manipulation_point(cfg: ExperimentConfig, body: simkit.DeformableBody, rng) -> np.ndarray:
    lo, hi = body.positions.min(axis=0), body.positions.max(axis=0)
    if cfg.mp_mode == "fixed":
        return manippoint.snap_to_surface(body, lo + np.asarray(cfg.mp_rel) * (hi - lo))
    nodes = body.surface[~body.fixed_mask[body.surface]]
    far = nodes[body.positions[nodes, 0] >= 0.5 * (lo[0] + hi[0])]
    return body.positions[far[rng.integers(len(far))]].copy()


def workspace_around(point, half: float):
    p = np.asarray(point, dtype=np.float64)
    return p - half, p + half


def _unit(rng) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def random_pull(body: simkit.DeformableBody, rng, n_moves: int, step: float, redirect_every: int,
                workspace, camera_dir):
    """Pull the grasp ``n_moves`` times by ``step``, re-drawing the direction
    every ``redirect_every`` moves and whenever a move would leave the
    workspace. Returns the checkpoints (rest state first) or None when a
    settle fails."""
    lo, hi = workspace
    ee = body.grasp.target.copy()
    cps = [Checkpoint(cloudops.quantize(observe(body, camera_dir)), ee.copy())]
    direction = _unit(rng)
    for m in range(n_moves):
        if m and m % redirect_every == 0:
            direction = _unit(rng)
        for _ in range(100):
            nxt = ee + step * direction
            if np.all(nxt >= lo) and np.all(nxt <= hi):
                break
            direction = _unit(rng)
        else:
            break
        report = simkit.settle(body, nxt)
        if not report.converged:
            return None
        ee = nxt
        cps.append(Checkpoint(cloudops.quantize(observe(body, camera_dir)), ee.copy()))
    return cps


def pairs_from_checkpoints(cps) -> list:
    """(P_t, P_end, ee_end - ee_t) for every checkpoint, the last giving a
    zero action."""
    end = cps[-1]
    return [PairRecord(c.cloud, end.cloud, end.ee - c.ee) for c in cps]


def gen_trajectories(cfg: ExperimentConfig):
    trajs = []
    for i in range(cfg.n_trajectories):
        obj = sample_training_object(cfg, rng_for(cfg.seed, TRAIN_OBJECTS, i))
        body = build(obj)
        mp = manipulation_point(cfg, body, rng_for(cfg.seed, TRAIN_OBJECTS, i, 1))
        rest = body.state()
        for j in range(cfg.goals_per_trajectory):
            rng = rng_for(cfg.seed, TRAIN_PATHS, i, j)
            body.restore(rest)
            simkit.grasp(body, mp)
            ws = workspace_around(body.grasp.target, cfg.workspace_half)
            n_moves = int(rng.integers(cfg.moves_min, cfg.moves_max + 1))
            try:
                cps = random_pull(body, rng, n_moves, cfg.checkpoint_spacing, cfg.redirect_every,
                                  ws, cfg.camera)
            except simkit.SimulationError as exc:
                cps = None
                log.warning("trajectory %d/%d: %s", i, j, exc)
            if cps is None or len(cps) < 2:
                log.warning("trajectory %d/%d skipped: settle failed", i, j)
                continue
            trajs.append(TrajectoryRecord(obj, mp, cps))
    return trajs


def gen_data(cfg: ExperimentConfig):
    """Returns (pair records, trajectory records)."""
    trajs = gen_trajectories(cfg)
    pairs = [p for t in trajs for p in pairs_from_checkpoints(t.checkpoints)]
    if len(pairs) > cfg.n_pairs:
        keep = np.sort(rng_for(cfg.seed, PAIR_SUBSAMPLE).choice(len(pairs), cfg.n_pairs, replace=False))
        pairs = [pairs[k] for k in keep]
    elif len(pairs) < cfg.n_pairs:
        log.warning("only %d pairs generated, %d requested", len(pairs), cfg.n_pairs)
    return pairs, trajs


# -- file format -----------------------------------------------------------

def encode_dataset(records) -> bytes:
    parts = [DSET_MAGIC, struct.pack("<II", DSET_VERSION, len(records))]
    for r in records:
        parts.append(cloudops.encode_pcl(r.current))
        parts.append(cloudops.encode_pcl(r.goal))
        parts.append(np.asarray(r.action, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_dataset(buf: bytes) -> list:
    if buf[:4] != DSET_MAGIC:
        raise ValueError("not a DSET file (bad magic)")
    if len(buf) < 12:
        raise ValueError("truncated DSET header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != DSET_VERSION:
        raise ValueError(f"unsupported DSET version {version}")
    off = 12
    out = []
    for _ in range(count):
        cur, off = cloudops.decode_pcl(buf, off)
        goal, off = cloudops.decode_pcl(buf, off)
        if len(buf) < off + 24:
            raise ValueError("truncated DSET record")
        action = np.frombuffer(buf[off:off + 24], dtype="<f8").astype(np.float64)
        off += 24
        out.append(PairRecord(cur, goal, action))
    if off != len(buf):
        raise ValueError("trailing bytes after DSET records")
    return out


def write_dataset(path, records) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_dataset(records))


def read_dataset(path) -> list:
    with open(path, "rb") as fh:
        return decode_dataset(fh.read())


def write_trajectory_table(path, trajs) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trajectory", "kind", "dim0_m", "dim1_m", "dim2_m", "young_modulus_pa",
                    "mp_x_m", "mp_y_m", "mp_z_m", "checkpoints", "travel_m"])
        for i, t in enumerate(trajs):
            d = list(t.obj.spec.dimensions) + [0.0] * (3 - len(t.obj.spec.dimensions))
            ee = np.array([c.ee for c in t.checkpoints])
            travel = float(np.linalg.norm(np.diff(ee, axis=0), axis=1).sum())
            w.writerow([i, t.obj.spec.kind] + [repr(x) for x in d] + [repr(t.obj.young_modulus)]
                       + [repr(float(x)) for x in t.mp] + [len(t.checkpoints), repr(travel)])


def to_samples(records, n_points: int = 1024) -> list:
    """Training samples with both clouds brought to ``n_points``."""
    return [TrainingSample(cloudops.preprocess_cloud(r.current, n_points),
                           cloudops.preprocess_cloud(r.goal, n_points),
                           np.asarray(r.action, dtype=np.float64)) for r in records]
