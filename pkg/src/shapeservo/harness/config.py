"""Experiment configuration: ``key = value`` text files with ``#`` comments."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np


class ConfigError(ValueError):
    pass


MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(root: int, *path: int) -> int:
    """Per-task seed: splitmix64 chained over the task path."""
    s = int(root) & MASK64
    for p in path:
        s = splitmix64(s ^ splitmix64(int(p) & MASK64))
    return s


def rng_for(root: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *path))


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str = "out"
    # objects
    primitive: str = "box"
    dims: tuple = (0.2, 0.1, 0.05)          # m
    dims_jitter: float = 0.0                 # relative half-range of training dims
    resolution: float = 0.025                # m
    stiffness_mean: float = 5000.0           # Pa
    stiffness_sigma: float = 1000.0          # Pa
    mp_mode: str = "fixed"                   # fixed | random
    mp_rel: tuple = (1.0, 0.5, 1.0)          # fixed grasp point, fraction of the bounding box
    camera_dir: tuple = (-0.25, -0.5, -1.0)
    # data
    n_trajectories: int = 50
    goals_per_trajectory: int = 5
    n_pairs: int = 2000
    checkpoint_spacing: float = 0.01         # m of end-effector travel per checkpoint
    moves_min: int = 4
    moves_max: int = 12
    redirect_every: int = 3
    workspace_half: float = 0.1              # m, box half-width around the rest grasp point
    # training
    epochs: int = 150
    batch: int = 32
    lr: float = 1e-3
    lr_decay: float = 0.1
    lr_every: int = 50
    # servo evaluation
    n_test_id: int = 10
    n_test_ood: int = 10
    ood_dim_scale: tuple = (1.15, 1.3)
    ood_sigma: tuple = (2.0, 4.0)
    servo_max_iters: int = 30
    stall_window: int = 5
    stall_ratio: float = 0.01
    tolerances: tuple = ()                   # m^2, strictly decreasing; empty = calibrated
    tolerance_fractions: tuple = (1.0, 0.5, 0.25, 0.125, 0.0625)
    # keypoints
    keypoints: int = 200
    top_m: int = 50
    # rrt
    rrt_goals: int = 10
    rrt_max_nodes: int = 500
    rrt_step: float = 0.02
    rrt_goal_bias: float = 0.1
    # retraction
    retract_planes: int = 20
    shift_step: float = 0.01
    max_shifts: int = 5
    retract_tol: float = 1e-6

    def validate(self) -> "ExperimentConfig":
        if self.stiffness_sigma <= 0:
            raise ConfigError("stiffness_sigma must be > 0")
        if self.stiffness_mean <= 0:
            raise ConfigError("stiffness_mean must be > 0")
        for name in ("n_trajectories", "goals_per_trajectory", "n_pairs", "epochs", "batch",
                     "moves_min", "redirect_every", "keypoints", "top_m", "rrt_max_nodes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("n_test_id", "n_test_ood", "servo_max_iters", "rrt_goals", "retract_planes",
                     "max_shifts"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.moves_max < self.moves_min:
            raise ConfigError("moves_max must be >= moves_min")
        if self.mp_mode not in ("fixed", "random"):
            raise ConfigError("mp_mode must be fixed or random")
        for name in ("tolerances", "tolerance_fractions"):
            t = getattr(self, name)
            if any(b >= a for a, b in zip(t, t[1:])):
                raise ConfigError(f"{name} must be strictly decreasing")
            if any(x <= 0 for x in t):
                raise ConfigError(f"{name} must be positive")
        if not self.tolerances and not self.tolerance_fractions:
            raise ConfigError("need tolerances or tolerance_fractions")
        if min(self.checkpoint_spacing, self.resolution, self.workspace_half, self.rrt_step) <= 0:
            raise ConfigError("lengths must be positive")
        if not 0 <= self.rrt_goal_bias <= 1:
            raise ConfigError("rrt_goal_bias must lie in [0, 1]")
        return self

    @property
    def camera(self) -> tuple:
        d = np.asarray(self.camera_dir, dtype=np.float64)
        n = np.linalg.norm(d)
        if n == 0:
            raise ConfigError("camera_dir must be non-zero")
        return tuple(d / n)


def _convert(raw: str, default):
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(float(x) for x in raw.replace(",", " ").split())
    return raw


def parse_config(text: str, base: ExperimentConfig = ExperimentConfig()) -> ExperimentConfig:
    known = {f.name: getattr(base, f.name) for f in fields(base)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            updates[key] = _convert(raw, known[key])
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value {raw!r} for {key}") from None
    return replace(base, **updates).validate()


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def format_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ", ".join(repr(float(x)) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
