"""A small reverse-mode autodiff engine over float64 numpy arrays.

Only the pieces the shape-servo network needs are here: dense layers,
ReLU, (weighted) group normalization, a weight-net point convolution,
MSE loss, Adam with step decay and a binary checkpoint format.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numba import njit


class NumericalError(FloatingPointError):
    """An op produced NaN or Inf."""


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, values, requires_grad=False, _parents=(), op="leaf"):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self.op = op

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.values.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar")
            grad = np.ones_like(self.values)
        order, seen = [], set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            order.append(t)

        visit(self)
        self._accumulate(grad)
        for t in reversed(order):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)
        # drop intermediate gradients, keep leaf ones
        for t in order:
            if t._parents:
                t.grad = None

    def _accumulate(self, g, owned=False):
        # owned=True: the caller hands over a fresh array that nobody else holds
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = g if owned and g.flags.writeable else np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g


def tensor(values) -> Tensor:
    return values if isinstance(values, Tensor) else Tensor(values)


def _result(values, parents, op, backward):
    # the sum check is cheap; a finite-valued overflow falls through to the full scan
    if not np.isfinite(values.sum()) and not np.all(np.isfinite(values)):
        raise NumericalError(f"{op} produced non-finite values")
    req = any(p.requires_grad for p in parents)
    out = Tensor(values, requires_grad=req, _parents=parents if req else (), op=op)
    if req:
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------

def add(x, y) -> Tensor:
    x, y = tensor(x), tensor(y)
    try:
        v = x.values + y.values
    except ValueError as exc:
        raise ShapeError(f"add: {x.shape} vs {y.shape}") from exc

    def back(g):
        x._accumulate(_unbroadcast(g, x.shape))
        y._accumulate(_unbroadcast(g, y.shape))
    return _result(v, (x, y), "add", back)


def sub(x, y) -> Tensor:
    x, y = tensor(x), tensor(y)
    try:
        v = x.values - y.values
    except ValueError as exc:
        raise ShapeError(f"sub: {x.shape} vs {y.shape}") from exc

    def back(g):
        x._accumulate(_unbroadcast(g, x.shape))
        y._accumulate(_unbroadcast(-g, y.shape))
    return _result(v, (x, y), "sub", back)


def mul(x, y) -> Tensor:
    x, y = tensor(x), tensor(y)
    try:
        v = x.values * y.values
    except ValueError as exc:
        raise ShapeError(f"mul: {x.shape} vs {y.shape}") from exc

    def back(g):
        if x.requires_grad:
            x._accumulate(_unbroadcast(g * y.values, x.shape), owned=True)
        if y.requires_grad:
            y._accumulate(_unbroadcast(g * x.values, y.shape), owned=True)
    return _result(v, (x, y), "mul", back)


def relu(x) -> Tensor:
    x = tensor(x)
    mask = x.values > 0

    def back(g):
        x._accumulate(g * mask, owned=True)
    return _result(np.where(mask, x.values, 0.0), (x,), "relu", back)


def reshape(x, shape) -> Tensor:
    x = tensor(x)

    def back(g):
        x._accumulate(g.reshape(x.shape))
    return _result(x.values.reshape(shape), (x,), "reshape", back)


def getitem(x, key) -> Tensor:
    """Basic slicing / integer-array row selection."""
    x = tensor(x)

    def back(g):
        full = np.zeros_like(x.values)
        np.add.at(full, key, g)
        x._accumulate(full)
    return _result(x.values[key], (x,), "getitem", back)


def sum_axis(x, axis) -> Tensor:
    x = tensor(x)

    def back(g):
        x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape))
    return _result(x.values.sum(axis=axis), (x,), "sum", back)


# -- linear algebra ------------------------------------------------------

def matmul(x, w) -> Tensor:
    """``x[..., i] @ w[i, o]``."""
    x, w = tensor(x), tensor(w)
    if w.values.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul: {x.shape} @ {w.shape}")
    v = x.values @ w.values

    def back(g):
        if x.requires_grad:
            x._accumulate(g @ w.values.T, owned=True)
        if w.requires_grad:
            xf = x.values.reshape(-1, x.shape[-1])
            w._accumulate(xf.T @ g.reshape(-1, g.shape[-1]), owned=True)
    return _result(v, (x, w), "matmul", back)


def dense(x, w, b) -> Tensor:
    """y = x W + b with x of shape (batch, in)."""
    x, w, b = tensor(x), tensor(w), tensor(b)
    if b.values.shape != (w.shape[1],):
        raise ShapeError(f"dense: bias {b.shape} for weight {w.shape}")
    return add(matmul(x, w), b)


def gather(x, idx) -> Tensor:
    """Batched row gather: ``x[b, idx[b, ...], :]``.

    ``x`` has shape (B, N, C); the result has shape idx.shape + (C,).
    """
    x = tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    B, N, C = x.shape
    if idx.shape[0] != B:
        raise ShapeError(f"gather: batch {idx.shape[0]} vs {B}")
    if idx.size and (idx.min() < 0 or idx.max() >= N):
        raise ShapeError("gather: index out of range")
    flat = (idx + (np.arange(B) * N).reshape((B,) + (1,) * (idx.ndim - 1))).ravel()
    v = x.values.reshape(B * N, C)[flat].reshape(idx.shape + (C,))

    def back(g):
        scatter = sp.csr_matrix(
            (np.ones(flat.size), (flat, np.arange(flat.size))), shape=(B * N, flat.size))
        x._accumulate(np.asarray(scatter @ g.reshape(flat.size, C)).reshape(B, N, C))
    return _result(v, (x,), "gather", back)


# -- normalization -------------------------------------------------------

def group_norm(x, groups: int, scale, shift, weights=None, eps: float = 1e-5) -> Tensor:
    """Group normalization, channel-last.

    ``x`` is (B, C) or (B, N, C). Statistics are taken per sample over each
    group of C/groups channels (and over all N points). ``weights`` (B, N)
    gives each point a multiplicity; a point with weight m behaves exactly
    like m identical copies of it, and weight 0 marks padding.
    """
    x, scale, shift = tensor(x), tensor(scale), tensor(shift)
    xv = x.values
    if xv.ndim not in (2, 3):
        raise ShapeError(f"group_norm: expected (B, C) or (B, N, C), got {x.shape}")
    C = xv.shape[-1]
    if groups < 1 or C % groups:
        raise ShapeError(f"group_norm: {groups} groups do not divide {C} channels")
    if scale.shape != (C,) or shift.shape != (C,):
        raise ShapeError("group_norm: scale/shift must have one entry per channel")
    B = xv.shape[0]
    x4 = xv.reshape(B, -1, groups, C // groups)  # (B, N, G, Cg)
    if weights is None:
        w = np.ones(x4.shape[:2])
    else:
        w = np.asarray(weights, dtype=np.float64)
        if xv.ndim != 3 or w.shape != xv.shape[:2]:
            raise ShapeError("group_norm: weights must have shape (B, N)")
    w4 = w[:, :, None, None]
    total = w.sum(axis=1)[:, None] * (C // groups)          # (B, 1)
    mean = (w4 * x4).sum(axis=(1, 3)) / total                # (B, G)
    xc = x4 - mean[:, None, :, None]
    var = (w4 * xc * xc).sum(axis=(1, 3)) / total
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv[:, None, :, None]
    v = xhat.reshape(xv.shape) * scale.values + shift.values

    def back(g):
        g_flat = g.reshape(-1, C)
        if shift.requires_grad:
            shift._accumulate(g_flat.sum(axis=0))
        if scale.requires_grad:
            scale._accumulate((g_flat * xhat.reshape(-1, C)).sum(axis=0))
        if x.requires_grad:
            gh = (g * scale.values).reshape(x4.shape)
            s1 = gh.sum(axis=(1, 3)) / total
            s2 = (gh * xhat).sum(axis=(1, 3)) / total
            dx = inv[:, None, :, None] * (
                gh - w4 * s1[:, None, :, None] - w4 * xhat * s2[:, None, :, None])
            x._accumulate(dx.reshape(xv.shape), owned=True)
    return _result(v, (x, scale, shift), "group_norm", back)


# -- loss ----------------------------------------------------------------

def mse_loss(pred, target) -> Tensor:
    pred = tensor(pred)
    t = target.values if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise ShapeError(f"mse_loss: {pred.shape} vs {t.shape}")
    diff = pred.values - t

    def back(g):
        pred._accumulate(g * 2.0 * diff / diff.size, owned=True)
    return _result(np.array(np.mean(diff * diff)), (pred,), "mse_loss", back)


# -- point convolution ---------------------------------------------------

POINT_CONV_KEYS = ("feat_w", "wn1_w", "wn1_b", "wn2_w", "wn2_b", "gn_scale", "gn_shift")


def take_rows(x, idx) -> Tensor:
    """``x[idx]`` for a 2-D tensor and a 1-D index array."""
    x = tensor(x)
    idx = np.asarray(idx, dtype=np.int64).ravel()
    N, C = x.shape
    if idx.size and (idx.min() < 0 or idx.max() >= N):
        raise ShapeError("take_rows: index out of range")

    def back(g):
        scatter = sp.csr_matrix((np.ones(idx.size), (idx, np.arange(idx.size))), shape=(N, idx.size))
        x._accumulate(np.asarray(scatter @ g), owned=True)
    return _result(x.values[idx], (x,), "take_rows", back)


def segment_sum(x, segments, n_segments: int, weights=None) -> Tensor:
    """out[s] = sum of weights[e] * x[e] over rows e with segments[e] == s."""
    x = tensor(x)
    seg = np.asarray(segments, dtype=np.int64).ravel()
    E = x.shape[0]
    if seg.size != E:
        raise ShapeError("segment_sum: one segment id per row")
    w = np.ones(E) if weights is None else np.asarray(weights, dtype=np.float64).ravel()
    mat = sp.csr_matrix((w, (seg, np.arange(E))), shape=(n_segments, E))
    v = np.asarray(mat @ x.values)

    def back(g):
        x._accumulate(np.asarray(mat.T @ g), owned=True)
    return _result(v, (x,), "segment_sum", back)


@njit(cache=True)
def _edge_agg_fwd(w, b, h, src, dst, count, n_out):
    E, C = w.shape
    y = np.zeros((n_out, C))
    for e in range(E):
        s, d, c = src[e], dst[e], count[e]
        for o in range(C):
            y[d, o] += c * (w[e, o] + b[o]) * h[s, o]
    return y


@njit(cache=True)
def _edge_agg_bwd(g, w, b, h, src, dst, count):
    E, C = w.shape
    dw = np.empty((E, C))
    dh = np.zeros(h.shape)
    for e in range(E):
        s, d, c = src[e], dst[e], count[e]
        for o in range(C):
            gc = c * g[d, o]
            dw[e, o] = gc * h[s, o]
            dh[s, o] += gc * (w[e, o] + b[o])
    return dw, dh


def edge_aggregate(w, b, h, src, dst, count, n_out: int) -> Tensor:
    """out[d] = sum over edges e into d of count[e] * (w[e] + b) * h[src[e]].

    Fuses the gather, bias, product and scatter of a weight-net
    convolution so no (edges, channels) temporaries beyond ``w`` exist.
    """
    w, b, h = tensor(w), tensor(b), tensor(h)
    src = np.ascontiguousarray(src, dtype=np.int64)
    dst = np.ascontiguousarray(dst, dtype=np.int64)
    count = np.ascontiguousarray(count, dtype=np.float64)
    E, C = w.shape
    if b.shape != (C,) or len(h.shape) != 2 or h.shape[1] != C:
        raise ShapeError("edge_aggregate: channel mismatch")
    if not (src.size == dst.size == count.size == E):
        raise ShapeError("edge_aggregate: one src/dst/count per edge")
    if E and (src.min() < 0 or src.max() >= h.shape[0] or dst.min() < 0 or dst.max() >= n_out):
        raise ShapeError("edge_aggregate: index out of range")
    wv = np.ascontiguousarray(w.values)
    hv = np.ascontiguousarray(h.values)
    y = _edge_agg_fwd(wv, b.values, hv, src, dst, count, n_out)

    def back(g):
        dw, dh = _edge_agg_bwd(np.ascontiguousarray(g), wv, b.values, hv, src, dst, count)
        h._accumulate(dh, owned=True)
        if b.requires_grad:
            b._accumulate(dw.sum(axis=0), owned=True)
        w._accumulate(dw, owned=True)
    return _result(y, (w, b, h), "edge_aggregate", back)


@dataclass
class Neighborhoods:
    """Edge list of a batched point convolution.

    Each edge joins input row ``src`` to center ``dst`` with multiplicity
    ``count`` and offset ``rel`` (neighbor minus center). ``layout`` (B, M)
    places the centers of each cloud for group norm, with ``center_weight``
    giving their multiplicity (0 marks padding).
    """
    src: np.ndarray
    dst: np.ndarray
    count: np.ndarray
    rel: np.ndarray
    layout: np.ndarray
    center_weight: np.ndarray

    @property
    def n_centers(self) -> int:
        return int(np.count_nonzero(self.center_weight))


def point_conv_edges(feats, nb: Neighborhoods, params, groups: int) -> Tensor:
    """Weight-net point convolution: for every center,
    ReLU(GN(sum_j count_j * wnet(rel_j) * (W_f feat_j))) with the group-norm
    statistics taken per cloud. ``feats`` is (N, Cin); returns (M, Cout)."""
    h = matmul(feats, params["feat_w"])
    wh = relu(add(matmul(nb.rel, params["wn1_w"]), params["wn1_b"]))
    w = matmul(wh, params["wn2_w"])
    y = edge_aggregate(w, params["wn2_b"], h, nb.src, nb.dst, nb.count, nb.n_centers)
    B, M = nb.layout.shape
    c_out = y.shape[1]
    padded = reshape(take_rows(y, nb.layout), (B, M, c_out))
    z = group_norm(padded, groups, params["gn_scale"], params["gn_shift"], weights=nb.center_weight)
    valid = np.flatnonzero(nb.center_weight.ravel() > 0)
    return relu(take_rows(reshape(z, (B * M, c_out)), valid))


def point_conv(points, feats, centers, params, k: int = 32, groups: int = 8) -> Tensor:
    """Single-cloud point convolution: each center aggregates its ``k``
    nearest input points. Returns (M, Cout)."""
    from .cloudops import knn_batch

    pts = np.asarray(points, dtype=np.float64)
    ctr = np.asarray(centers, dtype=np.float64)
    if k > len(pts):
        raise ShapeError(f"point_conv: k={k} exceeds {len(pts)} points")
    feats = tensor(feats)
    if feats.shape[0] != len(pts):
        raise ShapeError("point_conv: feats must have one row per point")
    idx = knn_batch(pts, ctr, k)
    m = len(ctr)
    nb = Neighborhoods(
        src=idx.ravel(), dst=np.repeat(np.arange(m), k), count=np.ones(m * k),
        rel=(pts[idx] - ctr[:, None, :]).reshape(-1, 3),
        layout=np.arange(m)[None], center_weight=np.ones((1, m)))
    return point_conv_edges(feats, nb, params, groups)


# -- initialization ------------------------------------------------------

def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def init_point_conv(rng, c_in, c_out, hidden) -> dict:
    return {
        "feat_w": Tensor(xavier_uniform(rng, c_in, c_out), requires_grad=True),
        "wn1_w": Tensor(xavier_uniform(rng, 3, hidden), requires_grad=True),
        "wn1_b": Tensor(np.zeros(hidden), requires_grad=True),
        "wn2_w": Tensor(xavier_uniform(rng, hidden, c_out), requires_grad=True),
        "wn2_b": Tensor(np.zeros(c_out), requires_grad=True),
        "gn_scale": Tensor(np.ones(c_out), requires_grad=True),
        "gn_shift": Tensor(np.zeros(c_out), requires_grad=True),
    }


# -- optimizer -----------------------------------------------------------

def lr_schedule(epoch: int, base: float = 1e-3, decay: float = 0.1, every: int = 50) -> float:
    return base * decay ** (epoch // every)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, state: AdamState, lr: float,
              beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """One Adam update of every tensor in ``params`` from its ``.grad``.
    Tensors without a gradient are treated as having a zero gradient."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.values)
        if g.shape != p.values.shape:
            raise ShapeError(f"adam: gradient shape {g.shape} for {name} {p.values.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.values -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# -- checkpoint format ---------------------------------------------------

CKPT_MAGIC = b"DNET"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_tensors(arrays: dict) -> bytes:
    out = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.astype("<f8").tobytes())
    return b"".join(out)


def decode_tensors(buf: bytes) -> dict:
    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("truncated checkpoint")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    if take(4) != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, count = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        arrays[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError("trailing bytes in checkpoint")
    return arrays


def save_tensors(path, arrays: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensors(arrays))


def load_tensors(path) -> dict:
    with open(path, "rb") as fh:
        return decode_tensors(fh.read())
