"""Quasi-static mass-spring simulation of voxelized elastic primitives.

Bodies are cubic node lattices with structural, face-diagonal and
body-diagonal springs. One face is pinned to the world, and an optional
grasp drags a small patch of surface nodes through stiff attachment
springs. ``settle`` integrates damped semi-implicit Euler until the body
comes to rest, which is how every boundary motion is applied.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

FACE_OFFSETS = np.array([(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)])
# one representative of each +/- pair among the 26 lattice neighbors
_SPRING_OFFSETS = [o for o in itertools.product((-1, 0, 1), repeat=3) if o > (0, 0, 0)]


class SimulationError(RuntimeError):
    pass


class ConstructionError(SimulationError, ValueError):
    pass


class GraspError(SimulationError, ValueError):
    pass


class PreconditionError(SimulationError, ValueError):
    pass


class NumericalBlowup(SimulationError, FloatingPointError):
    pass


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    damping: float = 5.0              # 1/s
    speed_threshold: float = 1e-4     # m/s
    max_iterations: int = 50_000
    max_step: float = 0.02            # m per settle call
    ramp_substeps: int = 20
    grasp_stiffness: float = 1000.0   # N/m per grasped node


DEFAULT_SIM = SimConfig()


@dataclass(frozen=True)
class PrimitiveSpec:
    """``dimensions`` is (lx, ly, lz) for a box, (radius, height) for a
    cylinder whose axis runs along x, and (radius,) for a hemisphere."""
    kind: str
    dimensions: tuple
    resolution: float = 0.025

    def __post_init__(self):
        object.__setattr__(self, "dimensions", tuple(float(d) for d in self.dimensions))
        need = {"box": 3, "cylinder": 2, "hemisphere": 1}.get(self.kind)
        if need is None:
            raise ConstructionError(f"unknown primitive kind {self.kind!r}")
        if len(self.dimensions) < need:
            raise ConstructionError(f"{self.kind} needs {need} dimensions")
        if any(d <= 0 for d in self.dimensions[:need]) or self.resolution <= 0:
            raise ConstructionError("dimensions and resolution must be positive")


@dataclass
class Grasp:
    nodes: np.ndarray        # grasped node indices
    anchors: np.ndarray      # attachment points at grasp time, (g, 3)
    origin: np.ndarray       # grasp target at grasp time
    target: np.ndarray       # current grasp (end-effector) position

    def copy(self) -> "Grasp":
        return Grasp(self.nodes.copy(), self.anchors.copy(), self.origin.copy(), self.target.copy())


@dataclass
class EquilibriumReport:
    converged: bool
    iterations: int
    residual: float


@dataclass
class BodyState:
    """Snapshot of the mutable part of a body."""
    positions: np.ndarray
    velocities: np.ndarray
    grasp: Grasp | None


@dataclass
class DeformableBody:
    positions: np.ndarray
    velocities: np.ndarray
    mass: np.ndarray
    spring_i: np.ndarray
    spring_j: np.ndarray
    rest_length: np.ndarray
    stiffness: np.ndarray
    fixed: np.ndarray            # indices pinned to the world
    young_modulus: float
    damping: float
    spacing: float
    lattice: np.ndarray          # integer lattice coordinates, (n, 3)
    face_neighbors: np.ndarray   # (n, 6), -1 where missing
    rest_positions: np.ndarray
    spec: PrimitiveSpec | None = None
    grasp: Grasp | None = None
    _fixed_mask: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self._fixed_mask is None:
            mask = np.zeros(len(self.positions), dtype=bool)
            mask[self.fixed] = True
            self._fixed_mask = mask

    @property
    def n_nodes(self) -> int:
        return len(self.positions)

    @property
    def fixed_mask(self) -> np.ndarray:
        return self._fixed_mask

    @property
    def surface(self) -> np.ndarray:
        return np.flatnonzero((self.face_neighbors < 0).any(axis=1))

    def state(self) -> BodyState:
        return BodyState(self.positions.copy(), self.velocities.copy(),
                         None if self.grasp is None else self.grasp.copy())

    def restore(self, state: BodyState) -> None:
        self.positions[:] = state.positions
        self.velocities[:] = state.velocities
        self.grasp = None if state.grasp is None else state.grasp.copy()

    def copy(self) -> "DeformableBody":
        return replace(self, positions=self.positions.copy(), velocities=self.velocities.copy(),
                       grasp=None if self.grasp is None else self.grasp.copy())

    def with_young_modulus(self, young_modulus: float) -> "DeformableBody":
        """Copy with every spring rescaled to a new Young's modulus."""
        if young_modulus <= 0:
            raise ConstructionError("young_modulus must be positive")
        ratio = young_modulus / self.young_modulus
        out = self.copy()
        out.stiffness = self.stiffness * ratio
        out.young_modulus = float(young_modulus)
        out.mass = _node_mass(len(out.positions), out.spring_i, out.spring_j, out.stiffness, DEFAULT_SIM)
        return out


# -- construction ----------------------------------------------------------

def _lattice_nodes(spec: PrimitiveSpec) -> np.ndarray:
    r = spec.resolution
    if spec.kind == "box":
        counts = [int(np.floor(d / r + 1e-9)) + 1 for d in spec.dimensions[:3]]
        return np.array(list(itertools.product(*(range(c) for c in counts))), dtype=np.int64)
    if spec.kind == "cylinder":
        radius, height = spec.dimensions[:2]
        nx = int(np.floor(height / r + 1e-9)) + 1
        j = int(np.floor((radius + 0.5 * r) / r + 1e-9))
        lim = (radius + 0.5 * r) ** 2 + 1e-12
        cells = [(i, a, b) for i in range(nx) for a in range(-j, j + 1) for b in range(-j, j + 1)
                 if (a * r) ** 2 + (b * r) ** 2 <= lim]
        return np.array(cells, dtype=np.int64)
    radius = spec.dimensions[0]
    j = int(np.floor((radius + 0.5 * r) / r + 1e-9))
    lim = (radius + 0.5 * r) ** 2 + 1e-12
    cells = [(a, b, c) for a in range(-j, j + 1) for b in range(-j, j + 1) for c in range(0, j + 1)
             if (a * r) ** 2 + (b * r) ** 2 + (c * r) ** 2 <= lim]
    return np.array(cells, dtype=np.int64)


def _node_positions(spec: PrimitiveSpec, lattice: np.ndarray) -> np.ndarray:
    r = spec.resolution
    pos = lattice.astype(np.float64) * r
    if spec.kind == "cylinder":
        pos[:, 2] += spec.dimensions[0]      # axis at z = radius, resting on z = 0
    elif spec.kind == "hemisphere":
        pos[:, 0] += spec.dimensions[0]      # flat side on z = 0, min-x at x = 0
    return pos


def _node_mass(n, si, sj, k, config: SimConfig) -> np.ndarray:
    # Fictitious masses (dynamic-relaxation style): m_i = dt^2 * (sum of
    # incident stiffness), which bounds dt * omega_max well below 2.
    s = np.bincount(si, weights=k, minlength=n) + np.bincount(sj, weights=k, minlength=n)
    return config.dt ** 2 * (s + config.grasp_stiffness)


@njit(cache=True)
def _spring_lengths(pos, si, sj):
    # same arithmetic as the integrator, so a body at rest feels exactly zero force
    out = np.empty(si.shape[0])
    for e in range(si.shape[0]):
        dx = pos[sj[e], 0] - pos[si[e], 0]
        dy = pos[sj[e], 1] - pos[si[e], 1]
        dz = pos[sj[e], 2] - pos[si[e], 2]
        out[e] = np.sqrt(dx * dx + dy * dy + dz * dz)
    return out


def _fixed_nodes(lattice: np.ndarray) -> np.ndarray:
    """Nodes of the min-x layer. When that layer is a single node or a line
    (a hemisphere touches it at its rim), the next layers are added until the
    pinned set is not collinear, so the body has no rigid rotation left."""
    xs = np.unique(lattice[:, 0])
    for top in xs:
        fixed = np.flatnonzero(lattice[:, 0] <= top)
        pts = lattice[fixed].astype(np.float64)
        if len(pts) >= 3 and np.linalg.matrix_rank(pts - pts[0]) >= 2:
            return fixed
    return np.flatnonzero(lattice[:, 0] == xs[0])


def build_primitive(spec: PrimitiveSpec, young_modulus: float, config: SimConfig = DEFAULT_SIM) -> DeformableBody:
    """Voxelize a primitive into a spring lattice with the min-x face fixed
    (see ``_fixed_nodes`` for faces too small to hold the body).

    Every spring gets stiffness E * r, the usual lattice approximation.
    """
    if young_modulus <= 0:
        raise ConstructionError("young_modulus must be positive")
    lattice = _lattice_nodes(spec)
    if len(lattice) == 0 or any(len(np.unique(lattice[:, a])) < 3 for a in range(3)):
        raise ConstructionError(
            f"degenerate {spec.kind} at resolution {spec.resolution}: fewer than 3 nodes on an axis")
    index = {tuple(c): i for i, c in enumerate(lattice.tolist())}
    si, sj = [], []
    r = spec.resolution
    for i, c in enumerate(lattice.tolist()):
        for o in _SPRING_OFFSETS:
            j = index.get((c[0] + o[0], c[1] + o[1], c[2] + o[2]))
            if j is not None:
                si.append(i)
                sj.append(j)
    si = np.array(si, dtype=np.int64)
    sj = np.array(sj, dtype=np.int64)
    n = len(lattice)
    ncomp, _ = connected_components(coo_matrix((np.ones(len(si)), (si, sj)), shape=(n, n)), directed=False)
    if ncomp != 1:
        raise ConstructionError("spring graph is not connected")
    faces = np.full((n, 6), -1, dtype=np.int64)
    for i, c in enumerate(lattice.tolist()):
        for f, o in enumerate(FACE_OFFSETS.tolist()):
            faces[i, f] = index.get((c[0] + o[0], c[1] + o[1], c[2] + o[2]), -1)
    pos = _node_positions(spec, lattice)
    fixed = _fixed_nodes(lattice)
    k = np.full(len(si), young_modulus * r)
    return DeformableBody(
        positions=pos, velocities=np.zeros_like(pos), mass=_node_mass(n, si, sj, k, config),
        spring_i=si, spring_j=sj, rest_length=_spring_lengths(pos, si, sj), stiffness=k, fixed=fixed,
        young_modulus=float(young_modulus), damping=config.damping, spacing=r, lattice=lattice,
        face_neighbors=faces, rest_positions=pos.copy(), spec=spec)


# -- observation -----------------------------------------------------------

def surface_normals(body: DeformableBody, nodes=None) -> np.ndarray:
    """Outward normals estimated from the current lattice: the negated sum of
    offsets to the face neighbors that are present."""
    nodes = body.surface if nodes is None else np.asarray(nodes)
    nb = body.face_neighbors[nodes]
    pos = body.positions
    here = pos[nodes]
    acc = np.zeros((len(nodes), 3))
    for f in range(6):
        present = nb[:, f] >= 0
        acc[present] -= pos[nb[present, f]] - here[present]
    norm = np.linalg.norm(acc, axis=1)
    bad = norm < 1e-9 * body.spacing
    if bad.any():
        # thin spots where opposite faces cancel: point away from the centroid
        fallback = here[bad] - pos.mean(axis=0)
        acc[bad] = fallback
        norm[bad] = np.linalg.norm(fallback, axis=1)
    return acc / norm[:, None]


def surface_cloud(body: DeformableBody):
    """Positions and outward normals of all surface nodes, by node index."""
    nodes = body.surface
    return body.positions[nodes].copy(), surface_normals(body, nodes)


# -- grasping ----------------------------------------------------------------

def grasp(body: DeformableBody, point) -> Grasp:
    """Attach the end-effector at the surface node nearest ``point``.

    The grasp patch is that node plus its surface neighbors within one node
    spacing; fixed nodes are never grasped.
    """
    p = np.asarray(point, dtype=np.float64)
    d = np.linalg.norm(body.positions - p, axis=1)
    nearest = int(np.argmin(d))
    surface = np.zeros(body.n_nodes, dtype=bool)
    surface[body.surface] = True
    if d[nearest] > body.spacing * (1 + 1e-9):
        raise GraspError(f"point is {d[nearest]:.4f} m from the body, more than one spacing")
    if not surface[nearest]:
        raise GraspError("point is inside the body, not on its surface")
    if body.fixed_mask[nearest]:
        raise GraspError("point lies on the fixed boundary")
    near = np.linalg.norm(body.positions - body.positions[nearest], axis=1) <= body.spacing * (1 + 1e-9)
    nodes = np.flatnonzero(near & surface & ~body.fixed_mask)
    anchors = body.positions[nodes].copy()
    centroid = anchors.mean(axis=0)
    body.grasp = Grasp(nodes, anchors, centroid.copy(), centroid.copy())
    return body.grasp


def release(body: DeformableBody) -> None:
    body.grasp = None


@njit(cache=True)
def _integrate(pos, vel, inv_mass, si, sj, rest, ks, free, gnodes, ganchor, shift0, shift1,
               katt, dt, damping, ramp, threshold, cap):
    n = pos.shape[0]
    force = np.zeros((n, 3))
    damp = 1.0 - damping * dt
    it = 0
    resid = 0.0
    while it < cap:
        it += 1
        s = 1.0
        if ramp > 0 and it < ramp:
            s = it / ramp
        force[:, :] = 0.0
        for e in range(si.shape[0]):
            i = si[e]
            j = sj[e]
            dx = pos[j, 0] - pos[i, 0]
            dy = pos[j, 1] - pos[i, 1]
            dz = pos[j, 2] - pos[i, 2]
            length = np.sqrt(dx * dx + dy * dy + dz * dz)
            f = ks[e] * (length - rest[e]) / length
            force[i, 0] += f * dx
            force[i, 1] += f * dy
            force[i, 2] += f * dz
            force[j, 0] -= f * dx
            force[j, 1] -= f * dy
            force[j, 2] -= f * dz
        for g in range(gnodes.shape[0]):
            i = gnodes[g]
            for d in range(3):
                a = ganchor[g, d] + (shift0[d] + s * (shift1[d] - shift0[d]))
                force[i, d] += katt * (a - pos[i, d])
        resid = 0.0
        for i in range(n):
            if not free[i]:
                continue
            sp = 0.0
            for d in range(3):
                v = (vel[i, d] + dt * force[i, d] * inv_mass[i]) * damp
                vel[i, d] = v
                pos[i, d] += dt * v
                sp += v * v
            sp = np.sqrt(sp)
            if sp > resid:
                resid = sp
        if it >= ramp and resid < threshold:
            return it, resid, True
    return it, resid, False


def settle(body: DeformableBody, grasp_target=None, config: SimConfig = DEFAULT_SIM) -> EquilibriumReport:
    """Move the grasp to ``grasp_target`` and integrate to equilibrium.

    The attachment points ramp linearly to the target over
    ``config.ramp_substeps`` steps; integration then continues until the
    fastest node is slower than ``config.speed_threshold`` or the iteration
    cap is hit. A body without a grasp is simply relaxed.
    """
    g = body.grasp
    if grasp_target is not None and g is None:
        raise PreconditionError("settle with a grasp target needs an active grasp")
    if g is not None:
        target = g.target if grasp_target is None else np.asarray(grasp_target, dtype=np.float64)
        step = float(np.linalg.norm(target - g.target))
        if step > config.max_step * (1 + 1e-9):
            raise PreconditionError(f"grasp step {step:.4f} m exceeds max step {config.max_step} m")
        gnodes, ganchor = g.nodes, g.anchors
        shift0, shift1 = g.target - g.origin, target - g.origin
        ramp = config.ramp_substeps if step > 0 else 0
    else:
        target = None
        gnodes = np.zeros(0, dtype=np.int64)
        ganchor = np.zeros((0, 3))
        shift0 = shift1 = np.zeros(3)
        ramp = 0
    free = ~body.fixed_mask
    it, resid, ok = _integrate(
        body.positions, body.velocities, 1.0 / body.mass, body.spring_i, body.spring_j,
        body.rest_length, body.stiffness, free, gnodes, ganchor, shift0, shift1,
        config.grasp_stiffness, config.dt, body.damping, ramp, config.speed_threshold,
        config.max_iterations)
    if not (np.all(np.isfinite(body.positions)) and np.all(np.isfinite(body.velocities))):
        raise NumericalBlowup("non-finite body state during settle")
    if g is not None:
        g.target = target.copy()
    return EquilibriumReport(bool(ok), int(it), float(resid))


def grasp_position(body: DeformableBody) -> np.ndarray:
    """Current centroid of the grasped nodes (lags the target slightly)."""
    if body.grasp is None:
        raise PreconditionError("body has no grasp")
    return body.positions[body.grasp.nodes].mean(axis=0)
