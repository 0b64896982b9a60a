"""Central finite-difference oracle shared by the gradient tests."""
import numpy as np


def numeric_grad(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-8))


def check_grads(build_loss, tensors) -> float:
    """Worst relative error between analytic and numeric gradients.

    ``build_loss`` returns a scalar Tensor on each call; ``tensors`` are the
    leaves whose gradients are checked.
    """
    for t in tensors:
        t.grad = None
    build_loss().backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad.copy()
        numeric = numeric_grad(lambda: float(build_loss().values), t.values)
        worst = max(worst, rel_err(analytic, numeric))
    return worst


# -- op catalogue --------------------------------------------------------
# Each builder takes a Generator and returns (build_loss, leaves). The loss
# contracts the op output with a fixed random tensor so every output entry
# contributes a distinct gradient. Shapes stay within [4, 16].

def _leaf(rng, *shape):
    from shapeservo.tensorcore import Tensor
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _contract(out, rng_probe):
    from shapeservo import tensorcore as tc
    probe = rng_probe.normal(size=out.shape)
    return tc.mse_loss(out, probe)


def _case(fn, leaves, rng):
    probe_seed = int(rng.integers(1 << 31))

    def build():
        return _contract(fn(), np.random.default_rng(probe_seed))
    return build, leaves


def op_cases():
    from shapeservo import tensorcore as tc

    def add(rng):
        x, y = _leaf(rng, 4, 16), _leaf(rng, 16)
        return _case(lambda: tc.add(x, y), [x, y], rng)

    def sub(rng):
        x, y = _leaf(rng, 4, 16), _leaf(rng, 4, 1)
        return _case(lambda: tc.sub(x, y), [x, y], rng)

    def mul(rng):
        x, y = _leaf(rng, 4, 16), _leaf(rng, 4, 16)
        return _case(lambda: tc.mul(x, y), [x, y], rng)

    def relu(rng):
        x = _leaf(rng, 4, 16)
        # keep entries away from the kink so central differences are valid
        x.values += np.sign(x.values) * 0.05
        return _case(lambda: tc.relu(x), [x], rng)

    def reshape(rng):
        x = _leaf(rng, 4, 16)
        return _case(lambda: tc.reshape(x, (8, 8)), [x], rng)

    def getitem(rng):
        x = _leaf(rng, 4, 16)
        rows = np.array([0, 2, 2, 3])
        return _case(lambda: tc.getitem(x, rows), [x], rng)

    def sum_axis(rng):
        x = _leaf(rng, 4, 16)
        return _case(lambda: tc.sum_axis(x, 1), [x], rng)

    def matmul(rng):
        x, w = _leaf(rng, 4, 4), _leaf(rng, 4, 16)
        return _case(lambda: tc.matmul(x, w), [x, w], rng)

    def dense(rng):
        x, w, b = _leaf(rng, 4, 4), _leaf(rng, 4, 16), _leaf(rng, 16)
        return _case(lambda: tc.dense(x, w, b), [x, w, b], rng)

    def gather(rng):
        x = _leaf(rng, 2, 2, 8)
        idx = rng.integers(0, 2, size=(2, 3, 2))
        return _case(lambda: tc.gather(x, idx), [x], rng)

    def group_norm(rng):
        x, s, t = _leaf(rng, 4, 16), _leaf(rng, 16), _leaf(rng, 16)
        return _case(lambda: tc.group_norm(x, 4, s, t), [x, s, t], rng)

    def group_norm_weighted(rng):
        x, s, t = _leaf(rng, 2, 2, 8), _leaf(rng, 8), _leaf(rng, 8)
        w = rng.integers(0, 3, size=(2, 2)).astype(float)
        w[:, 0] = 1.0
        return _case(lambda: tc.group_norm(x, 2, s, t, weights=w), [x, s, t], rng)

    def mse(rng):
        x = _leaf(rng, 4, 3)
        target = rng.normal(size=(4, 3))
        return (lambda: tc.mse_loss(x, target)), [x]

    def take_rows(rng):
        x = _leaf(rng, 4, 16)
        idx = rng.integers(0, 4, size=6)
        return _case(lambda: tc.take_rows(x, idx), [x], rng)

    def segment_sum(rng):
        x = _leaf(rng, 4, 16)
        seg = rng.integers(0, 3, size=4)
        w = rng.uniform(0.5, 2.0, size=4)
        return _case(lambda: tc.segment_sum(x, seg, 3, w), [x], rng)

    def edge_aggregate(rng):
        w, b, h = _leaf(rng, 4, 8), _leaf(rng, 8), _leaf(rng, 4, 8)
        src, dst = rng.integers(0, 4, 4), rng.integers(0, 3, 4)
        cnt = rng.integers(1, 3, 4).astype(float)
        return _case(lambda: tc.edge_aggregate(w, b, h, src, dst, cnt, 3), [w, b, h], rng)

    def point_conv(rng):
        pts = rng.uniform(0, 1, size=(4, 3))
        feats = _leaf(rng, 4, 4)
        centers = pts[:2]
        params = tc.init_point_conv(rng, 4, 8, 4)
        for p in params.values():
            p.values += 0.1 * rng.normal(size=p.shape)
        leaves = [feats] + list(params.values())
        return _case(lambda: tc.point_conv(pts, feats, centers, params, k=3, groups=2), leaves, rng)

    return {f.__name__: f for f in (add, sub, mul, relu, reshape, getitem, sum_axis, matmul, dense, gather,
                                    group_norm, group_norm_weighted, mse, take_rows, segment_sum,
                                    edge_aggregate, point_conv)}
