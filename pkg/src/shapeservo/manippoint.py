"""Manipulation-point selection from keypoint displacements.

Keypoints are surface nodes picked by farthest point sampling on the
initial surface; node identity gives the correspondence to the goal.
The grasp point is the displacement-weighted mean of the keypoints that
move the most.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cloudops, simkit


class NoMotionError(ValueError):
    """Every keypoint is stationary, so no point moves more than another."""


@dataclass(frozen=True)
class KeypointMatch:
    u: np.ndarray      # initial position (m)
    v: np.ndarray      # goal position (m)
    node: int = -1

    @property
    def delta(self) -> float:
        return float(np.linalg.norm(np.asarray(self.u) - np.asarray(self.v)))


def keypoints_from_correspondence(initial_positions, goal_positions, surface, K: int = 200):
    """Match K surface nodes between two states of the same body.

    ``initial_positions`` and ``goal_positions`` are full node arrays sharing
    indexing; ``surface`` lists the surface node ids.
    """
    ini = np.asarray(initial_positions, dtype=np.float64)
    goal = np.asarray(goal_positions, dtype=np.float64)
    if ini.shape != goal.shape:
        raise ValueError("initial and goal states must share node indexing")
    surface = np.asarray(surface, dtype=np.int64)
    if not 1 <= K <= len(surface):
        raise ValueError(f"K={K} must lie in [1, {len(surface)}] (surface node count)")
    picked = surface[cloudops.fps_indices(ini[surface], K)]
    return [KeypointMatch(ini[i].copy(), goal[i].copy(), int(i)) for i in picked]


def keypoints_from_bodies(initial: simkit.DeformableBody, goal_positions, K: int = 200):
    return keypoints_from_correspondence(initial.positions, goal_positions, initial.surface, K)


def top_matches(matches, M: int):
    if not matches:
        raise ValueError("no keypoint matches")
    if not 1 <= M <= len(matches):
        raise ValueError(f"M={M} must lie in [1, {len(matches)}]")
    delta = np.array([m.delta for m in matches])
    order = np.argsort(-delta, kind="stable")  # ties keep the lower index first
    return [matches[i] for i in order[:M]]


def predict_manipulation_point(matches, M: int = 50) -> np.ndarray:
    top = top_matches(matches, M)
    delta = np.array([m.delta for m in top])
    total = delta.sum()
    if total <= 0.0:
        raise NoMotionError("all keypoint displacements are zero")
    u = np.array([m.u for m in top], dtype=np.float64)
    return (delta[:, None] * u).sum(axis=0) / total


def snap_to_surface(body: simkit.DeformableBody, point, exclude_fixed: bool = True) -> np.ndarray:
    """Nearest graspable surface node to ``point``."""
    nodes = body.surface
    if exclude_fixed:
        nodes = nodes[~body.fixed_mask[nodes]]
    if len(nodes) == 0:
        raise simkit.GraspError("no graspable surface node")
    d = np.linalg.norm(body.positions[nodes] - np.asarray(point, dtype=np.float64), axis=1)
    return body.positions[nodes[int(np.argmin(d))]].copy()
