"""Randomized bodies for simulator property checks."""
import numpy as np

from shapeservo import simkit


def random_body(rng, young_modulus=None) -> simkit.DeformableBody:
    kind = ("box", "cylinder", "hemisphere")[int(rng.integers(3))]
    if kind == "box":
        dims = (rng.uniform(0.1, 0.25), rng.uniform(0.075, 0.125), rng.uniform(0.05, 0.075))
    elif kind == "cylinder":
        dims = (rng.uniform(0.04, 0.06), rng.uniform(0.15, 0.25))
    else:
        dims = (rng.uniform(0.06, 0.1),)
    e = rng.uniform(1e3, 1e4) if young_modulus is None else young_modulus
    return simkit.build_primitive(simkit.PrimitiveSpec(kind, dims, 0.025), e)


def far_grasp_point(body) -> np.ndarray:
    """Highest surface node among those farthest from the fixed face."""
    s = body.surface
    s = s[~body.fixed_mask[s]]
    pos = body.positions[s]
    far = s[pos[:, 0] >= pos[:, 0].max() - 1e-12]
    return body.positions[far[np.argmax(body.positions[far, 2])]].copy()


def random_step(rng, length=0.02) -> np.ndarray:
    v = rng.normal(size=3)
    return length * v / np.linalg.norm(v)
