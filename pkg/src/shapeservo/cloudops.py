"""Point-cloud geometry: Chamfer metrics, farthest point sampling, k-NN,
RANSAC plane fitting, normal-culled partial views and the PCL1 format.

Clouds are plain ``(n, 3)`` float arrays in meters.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


class CloudError(ValueError):
    """Invalid cloud argument (empty, wrong shape, bad count)."""


class PlaneFitError(RuntimeError):
    pass


def as_cloud(points, allow_empty=False) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1 and pts.size == 3:
        pts = pts.reshape(1, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise CloudError(f"expected an (n, 3) cloud, got shape {pts.shape}")
    if not allow_empty and len(pts) == 0:
        raise CloudError("cloud is empty")
    if not np.all(np.isfinite(pts)):
        raise CloudError("cloud has non-finite coordinates")
    return pts


# -- metrics -------------------------------------------------------------

def nearest_sq_dists(a, b) -> np.ndarray:
    """Squared distance from every point of ``a`` to its nearest point in ``b``."""
    a = as_cloud(a)
    b = as_cloud(b)
    _, idx = cKDTree(b).query(a, k=1)
    d = a - b[idx]
    return (d * d).sum(axis=1)


def chamfer(a, b) -> float:
    """One-directional Chamfer distance in m^2: mean over ``a`` of the squared
    distance to the closest point of ``b``."""
    return float(nearest_sq_dists(a, b).mean())


def chamfer_symmetric(a, b) -> float:
    return 0.5 * (chamfer(a, b) + chamfer(b, a))


# -- sampling ------------------------------------------------------------

def lexicographic_order(points: np.ndarray) -> np.ndarray:
    """Stable index order sorting points by (x, y, z)."""
    return np.lexsort((points[:, 2], points[:, 1], points[:, 0]))


def fps_indices(points, n: int) -> np.ndarray:
    """Greedy farthest point sampling.

    The input is first put in lexicographic order; the seed is the
    lexicographically smallest point and distance ties go to the lowest
    index in that order. Returns indices into ``points`` in selection order,
    so the selected coordinates do not depend on the input ordering.
    """
    pts = as_cloud(points)
    if not 1 <= n <= len(pts):
        raise CloudError(f"fps: need 1 <= n <= {len(pts)}, got {n}")
    order = lexicographic_order(pts)
    srt = pts[order]
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = 0
    d = srt - srt[0]
    mind = (d * d).sum(axis=1)
    mind[0] = -1.0
    for i in range(1, n):
        nxt = int(np.argmax(mind))  # first maximum -> lowest index
        chosen[i] = nxt
        d = srt - srt[nxt]
        np.minimum(mind, (d * d).sum(axis=1), out=mind)
        mind[nxt] = -1.0  # chosen entries stay at -1 under minimum
    return order[chosen]


def fps(points, n: int) -> np.ndarray:
    pts = as_cloud(points)
    return pts[fps_indices(pts, n)]


def preprocess_cloud(points, n: int = 1024) -> np.ndarray:
    """Bring a cloud to exactly ``n`` points: FPS when large enough, otherwise
    cyclic repetition in index order."""
    pts = as_cloud(points)
    if len(pts) >= n:
        return fps(pts, n)
    return pts[np.arange(n) % len(pts)]


def knn(points, query, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest points to ``query``, nearest first, ties
    by lowest index."""
    pts = as_cloud(points)
    if not 1 <= k <= len(pts):
        raise CloudError(f"knn: need 1 <= k <= {len(pts)}, got {k}")
    d = pts - np.asarray(query, dtype=np.float64)
    return np.argsort((d * d).sum(axis=1), kind="stable")[:k]


def knn_batch(points: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Row-wise :func:`knn` for many queries at once, shape ``(m, k)``."""
    pts = as_cloud(points)
    if not 1 <= k <= len(pts):
        raise CloudError(f"knn: need 1 <= k <= {len(pts)}, got {k}")
    qs = as_cloud(queries)
    out = np.empty((len(qs), k), dtype=np.int64)
    for s in range(0, len(qs), 256):
        d = qs[s:s + 256, None, :] - pts[None, :, :]
        out[s:s + 256] = np.argsort((d * d).sum(axis=2), axis=1, kind="stable")[:, :k]
    return out


# -- planes --------------------------------------------------------------

@dataclass(frozen=True)
class Plane:
    point: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        if not np.isfinite(norm) or norm == 0.0:
            raise ValueError("plane normal must be a non-zero finite vector")
        object.__setattr__(self, "normal", n / norm)
        object.__setattr__(self, "point", np.asarray(self.point, dtype=np.float64))

    def signed_distance(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.point) @ self.normal

    def shifted(self, offset: float) -> "Plane":
        return Plane(self.point + offset * self.normal, self.normal)


def _orient_up(n: np.ndarray) -> np.ndarray:
    # +z half-space; fall back to +y then +x for normals lying in z = 0
    for axis in (2, 1, 0):
        if abs(n[axis]) > 1e-15:
            return n if n[axis] > 0 else -n
    return n


def plane_inliers(points, plane: Plane, tol: float) -> np.ndarray:
    return np.abs(plane.signed_distance(points)) <= tol


def ransac_plane(points, iters: int = 200, inlier_tol: float = 1e-3, seed: int = 0) -> Plane:
    """Dominant plane by RANSAC over random 3-point hypotheses, refined by a
    least-squares (SVD) fit to the final inliers."""
    pts = as_cloud(points)
    if len(pts) < 3:
        raise CloudError("ransac_plane needs at least 3 points")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    scale = max(float(np.ptp(pts, axis=0).max()), 1e-12)
    best_count, best = -1, None
    for _ in range(iters):
        i, j, k = rng.choice(len(pts), size=3, replace=False)
        n = np.cross(pts[j] - pts[i], pts[k] - pts[i])
        norm = np.linalg.norm(n)
        if norm <= 1e-12 * scale * scale:
            continue
        n = n / norm
        count = int(np.count_nonzero(np.abs((pts - pts[i]) @ n) <= inlier_tol))
        if count > best_count:
            best_count, best = count, (pts[i], n)
    if best is None:
        raise PlaneFitError("every RANSAC hypothesis was degenerate (collinear points)")
    mask = np.abs((pts - best[0]) @ best[1]) <= inlier_tol
    inl = pts[mask]
    centroid = inl.mean(axis=0)
    if len(inl) >= 3:
        _, s, vt = np.linalg.svd(inl - centroid, full_matrices=False)
        normal = vt[-1] if s[1] > 1e-12 * scale else best[1]
    else:
        normal = best[1]
    return Plane(centroid, _orient_up(normal / np.linalg.norm(normal)))


# -- views ---------------------------------------------------------------

def visible_mask(normals, camera_dir) -> np.ndarray:
    d = np.asarray(camera_dir, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError("camera_dir must be a unit vector")
    return np.asarray(normals, dtype=np.float64) @ (-d) > 0.0


def partial_view(points, normals, camera_dir) -> np.ndarray:
    """Keep the points whose outward normal faces the camera."""
    pts = as_cloud(points, allow_empty=True)
    nrm = np.asarray(normals, dtype=np.float64)
    if nrm.shape != pts.shape:
        raise CloudError("normals must align with the cloud")
    return pts[visible_mask(nrm, camera_dir)]


# -- PCL1 ----------------------------------------------------------------

PCL_MAGIC = b"PCL1"


def encode_pcl(points) -> bytes:
    pts = as_cloud(points, allow_empty=True)
    return PCL_MAGIC + struct.pack("<I", len(pts)) + pts.astype("<f4").tobytes()


def decode_pcl(buf, offset: int = 0):
    """Decode one PCL1 cloud starting at ``offset``; returns (cloud, next offset)."""
    if bytes(buf[offset:offset + 4]) != PCL_MAGIC:
        raise ValueError("bad PCL1 magic")
    if len(buf) < offset + 8:
        raise ValueError("truncated PCL1 header")
    (count,) = struct.unpack_from("<I", buf, offset + 4)
    start = offset + 8
    end = start + 12 * count
    if len(buf) < end:
        raise ValueError("truncated PCL1 payload")
    pts = np.frombuffer(bytes(buf[start:end]), dtype="<f4").reshape(count, 3)
    return pts.astype(np.float64), end


def write_pcl(path, points) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pcl(points))


def read_pcl(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    pts, end = decode_pcl(buf)
    if end != len(buf):
        raise ValueError("trailing bytes after PCL1 cloud")
    return pts


def quantize(points) -> np.ndarray:
    """Round-trip coordinates through float32, as stored by PCL1."""
    return np.asarray(points, dtype=np.float64).astype(np.float32).astype(np.float64)
