"""Independent O(n^2) reference implementations used as test oracles."""
import itertools

import numpy as np


def brute_chamfer(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    total = 0.0
    for p in a:
        best = min(float(((p - q) ** 2).sum()) for q in b)
        total += best
    return total / len(a)


def brute_knn(points, query, k):
    d = [(float(((p - np.asarray(query)) ** 2).sum()), i) for i, p in enumerate(points)]
    d.sort()
    return np.array([i for _, i in d[:k]])


def greedy_fps_values(points, n):
    """Plain greedy max-min selection over the lexicographically sorted
    points, written as a double loop."""
    pts = sorted(map(tuple, np.asarray(points, dtype=np.float64)))
    chosen = [0]
    while len(chosen) < n:
        best, best_d = None, -1.0
        for i, p in enumerate(pts):
            if i in chosen:
                continue
            d = min(sum((p[t] - pts[j][t]) ** 2 for t in range(3)) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return np.array([pts[i] for i in chosen])


def lattice_box(nx, ny, nz):
    """Node and spring counts of a full box lattice with 26-neighbor springs,
    by direct enumeration of node pairs at Chebyshev distance 1."""
    nodes = list(itertools.product(range(nx), range(ny), range(nz)))
    index = {n: i for i, n in enumerate(nodes)}
    springs = 0
    for n in nodes:
        for o in itertools.product((-1, 0, 1), repeat=3):
            if o == (0, 0, 0):
                continue
            m = (n[0] + o[0], n[1] + o[1], n[2] + o[2])
            if m in index and index[m] > index[n]:
                springs += 1
    surface = sum(1 for n in nodes
                  if n[0] in (0, nx - 1) or n[1] in (0, ny - 1) or n[2] in (0, nz - 1))
    return len(nodes), springs, surface


def dense_sq_dists(a, b) -> np.ndarray:
    """Full (len(a), len(b)) matrix of squared distances."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)


def dense_chamfer(a, b) -> float:
    return float(dense_sq_dists(a, b).min(axis=1).mean())


def dense_knn(points, query, k):
    d = dense_sq_dists(np.asarray(query, dtype=np.float64)[None], points)[0]
    return np.argsort(d, kind="stable")[:k]
