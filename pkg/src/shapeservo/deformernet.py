"""DeformerNet: a Siamese point-convolution shape encoder and a dense
controller mapping the feature difference of two clouds to a 3D
end-effector displacement.

The encoder runs three point-convolution stages (1024 -> 512 centers x 64
channels -> 256 centers x 128 channels -> one global 256-d feature). The
sampling and neighborhoods depend only on cloud geometry, so they are
computed once per cloud (``prepare_cloud``) and reused across epochs.
Identical points are merged and carried as multiplicities, which gives the
same result as running on the padded 1024-point cloud at a fraction of the
cost.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .cloudops import as_cloud, fps_indices, knn_batch, lexicographic_order

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_points: int = 1024
    centers: tuple = (512, 256)
    channels: tuple = (64, 128, 256)
    fc: tuple = (128, 64, 32)
    k: int = 32
    groups: int = 8
    weightnet_hidden: int = 16
    input_scale: float = 20.0      # coordinates are multiplied by this (1/m)
    seed: int = 0

    def to_text(self) -> str:
        lines = []
        for key, val in asdict(self).items():
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            lines.append(f"{key} = {val}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kw = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = (s.strip() for s in line.partition("="))
            if key in ("centers", "channels", "fc"):
                kw[key] = tuple(int(v) for v in val.split(",") if v.strip())
            elif key == "input_scale":
                kw[key] = float(val)
            elif key in cls.__dataclass_fields__:
                kw[key] = int(val)
        return cls(**kw)


@dataclass
class DeformerNetModel:
    config: ModelConfig
    params: dict = field(default_factory=dict)  # name -> Tensor

    @classmethod
    def create(cls, config: ModelConfig = ModelConfig()) -> "DeformerNetModel":
        rng = np.random.default_rng(config.seed)
        params = {}
        c_in = 3
        for s, c_out in enumerate(config.channels, start=1):
            for name, t in tc.init_point_conv(rng, c_in, c_out, config.weightnet_hidden).items():
                params[f"s{s}.{name}"] = t
            c_in = c_out
        width = config.channels[-1]
        for i, h in enumerate(config.fc, start=1):
            params[f"fc{i}.w"] = tc.Tensor(tc.xavier_uniform(rng, width, h), requires_grad=True)
            params[f"fc{i}.b"] = tc.Tensor(np.zeros(h), requires_grad=True)
            params[f"fc{i}.gn_scale"] = tc.Tensor(np.ones(h), requires_grad=True)
            params[f"fc{i}.gn_shift"] = tc.Tensor(np.zeros(h), requires_grad=True)
            width = h
        # zero head: an untrained policy emits the zero action
        params["head.w"] = tc.Tensor(np.zeros((width, 3)), requires_grad=True)
        params["head.b"] = tc.Tensor(np.zeros(3), requires_grad=True)
        return cls(config, params)

    def stage(self, s: int) -> dict:
        pre = f"s{s}."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def arrays(self) -> dict:
        return {k: v.values.copy() for k, v in self.params.items()}


# -- geometry preprocessing ----------------------------------------------

@dataclass
class CloudGeometry:
    """Sampling and neighborhoods of one 1024-point cloud, deduplicated.

    ``points`` holds the distinct input points. Stage s has distinct
    centers with multiplicities ``w{s}`` and an edge list ``(src, dst,
    count, rel)`` joining each center to its distinct neighbors among the
    previous level (counts record how often a neighbor occurs among the k
    nearest). Stage 3 joins every stage-2 center to their centroid.
    """
    points: np.ndarray
    stages: list  # [(src, dst, count, rel, weights)] for stages 1..3


def _unique_rows(points: np.ndarray):
    uniq, inverse = np.unique(points, axis=0, return_inverse=True)
    return uniq, inverse.reshape(-1)


def _edges(src_points, src_ids, src_coords, center_ids, center_coords, k):
    """Edges from each center to its distinct nearest-neighbor ids."""
    src, dst, cnt = [], [], []
    for c, row in enumerate(knn_batch(src_points, center_coords, k)):
        ids, counts = np.unique(src_ids[row], return_counts=True)
        src.append(ids)
        dst.append(np.full(len(ids), c))
        cnt.append(counts)
    src = np.concatenate(src)
    dst = np.concatenate(dst)
    rel = src_coords[src] - center_coords[dst]
    return src, dst, np.concatenate(cnt).astype(np.float64), rel


def prepare_cloud(cloud, config: ModelConfig = ModelConfig()) -> CloudGeometry:
    pts = as_cloud(cloud)
    if len(pts) != config.n_points:
        raise ValueError(f"expected a {config.n_points}-point cloud, got {len(pts)}")
    pts = pts[lexicographic_order(pts)] * config.input_scale
    uniq0, inv0 = _unique_rows(pts)

    sel1 = fps_indices(pts, config.centers[0])
    c1_ids, w1 = np.unique(inv0[sel1], return_counts=True)     # into uniq0
    coords1 = uniq0[c1_ids]
    e1 = _edges(pts, inv0, uniq0, c1_ids, coords1, config.k)

    # stage-2 input: stage-1 centers in selection order
    p1 = pts[sel1]
    p1_ids = np.searchsorted(c1_ids, inv0[sel1])                # into stage-1 list
    sel2 = fps_indices(p1, config.centers[1])
    c2_ids, w2 = np.unique(p1_ids[sel2], return_counts=True)   # into stage-1 list
    coords2 = coords1[c2_ids]
    e2 = _edges(p1, p1_ids, coords1, c2_ids, coords2, min(config.k, len(p1)))

    w2 = w2.astype(np.float64)
    centroid = (w2[:, None] * coords2).sum(axis=0) / w2.sum()
    e3 = (np.arange(len(c2_ids)), np.zeros(len(c2_ids), dtype=np.int64), w2.copy(), coords2 - centroid)
    return CloudGeometry(uniq0, [e1 + (w1.astype(np.float64),), e2 + (w2,), e3 + (np.ones(1),)])


def geometry_key(cloud) -> str:
    return hashlib.sha1(np.ascontiguousarray(cloud, dtype=np.float64).tobytes()).hexdigest()


def _batch_stage(geoms, s, src_offsets):
    """Concatenate stage ``s`` edges of a batch; returns (Neighborhoods,
    per-cloud center offsets)."""
    srcs, dsts, cnts, rels = [], [], [], []
    sizes = [len(g.stages[s][4]) for g in geoms]
    dst_offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    B, M = len(geoms), max(sizes)
    layout = np.zeros((B, M), dtype=np.int64)
    weight = np.zeros((B, M))
    for b, g in enumerate(geoms):
        src, dst, cnt, rel, w = g.stages[s]
        srcs.append(src + src_offsets[b])
        dsts.append(dst + dst_offsets[b])
        cnts.append(cnt)
        rels.append(rel)
        layout[b, :sizes[b]] = dst_offsets[b] + np.arange(sizes[b])
        weight[b, :sizes[b]] = w
    nb = tc.Neighborhoods(np.concatenate(srcs), np.concatenate(dsts), np.concatenate(cnts),
                          np.concatenate(rels), layout, weight)
    return nb, dst_offsets


def batch_features(model: DeformerNetModel, geoms: list) -> tc.Tensor:
    """Shape features of a batch of prepared clouds, shape (B, 256)."""
    cfg = model.config
    sizes = [len(g.points) for g in geoms]
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    x = tc.Tensor(np.concatenate([g.points for g in geoms]))
    for s in range(3):
        nb, offsets = _batch_stage(geoms, s, offsets)
        x = tc.point_conv_edges(x, nb, model.stage(s + 1), cfg.groups)
    return x


def controller(model: DeformerNetModel, dpsi) -> tc.Tensor:
    """Dense layers with group norm + ReLU, then the linear 3-d head."""
    p = model.params
    x = dpsi
    for i in range(1, len(model.config.fc) + 1):
        x = tc.dense(x, p[f"fc{i}.w"], p[f"fc{i}.b"])
        x = tc.relu(tc.group_norm(x, model.config.groups, p[f"fc{i}.gn_scale"], p[f"fc{i}.gn_shift"]))
    return tc.dense(x, p["head.w"], p["head.b"])


def _policy(model, cur_geoms, goal_geoms) -> tc.Tensor:
    B = len(cur_geoms)
    feats = batch_features(model, list(cur_geoms) + list(goal_geoms))
    dpsi = tc.sub(tc.getitem(feats, slice(0, B)), tc.getitem(feats, slice(B, 2 * B)))
    return controller(model, dpsi)


def extract_features(model: DeformerNetModel, cloud) -> np.ndarray:
    if isinstance(cloud, CloudGeometry):
        geom = cloud
    else:
        geom = prepare_cloud(cloud, model.config)
    return batch_features(model, [geom]).values[0].copy()


def forward(model: DeformerNetModel, current, goal) -> np.ndarray:
    """Predicted displacement F(g(current) - g(goal)) in meters."""
    cur = current if isinstance(current, CloudGeometry) else prepare_cloud(current, model.config)
    gl = goal if isinstance(goal, CloudGeometry) else prepare_cloud(goal, model.config)
    return _policy(model, [cur], [gl]).values[0].copy()


def clamp_action(action, max_norm: float = 0.02) -> np.ndarray:
    a = np.asarray(action, dtype=np.float64)
    n = float(np.linalg.norm(a))
    return a * (max_norm / n) if n > max_norm else a.copy()


# -- training --------------------------------------------------------------

@dataclass
class TrainingSample:
    current: np.ndarray   # (1024, 3)
    goal: np.ndarray      # (1024, 3)
    action: np.ndarray    # (3,) meters


@dataclass
class TrainConfig:
    epochs: int = 150
    batch: int = 32
    seed: int = 0
    lr: float = 1e-3
    lr_decay: float = 0.1
    lr_every: int = 50
    checkpoint: str | None = None


class GeometryCache:
    def __init__(self, config: ModelConfig):
        self.config = config
        self._store = {}

    def get(self, cloud) -> CloudGeometry:
        key = geometry_key(cloud)
        geom = self._store.get(key)
        if geom is None:
            geom = self._store[key] = prepare_cloud(cloud, self.config)
        return geom

    def __len__(self):
        return len(self._store)


def train(model: DeformerNetModel, dataset: list, config: TrainConfig = TrainConfig(),
          cache: GeometryCache | None = None, on_epoch=None):
    """Mini-batch Adam on the MSE between predicted and recorded actions.

    Returns the model and the per-epoch mean training loss (m^2), averaged
    over the batches of that epoch as they were seen.
    """
    if not dataset:
        raise TrainingError("empty dataset")
    cache = cache or GeometryCache(model.config)
    cur = [cache.get(s.current) for s in dataset]
    goal = [cache.get(s.goal) for s in dataset]
    actions = np.array([s.action for s in dataset], dtype=np.float64)
    rng = np.random.default_rng(config.seed)
    state = tc.AdamState()
    losses = []
    for epoch in range(config.epochs):
        lr = tc.lr_schedule(epoch, config.lr, config.lr_decay, config.lr_every)
        order = rng.permutation(len(dataset))
        total = 0.0
        for start in range(0, len(order), config.batch):
            idx = order[start:start + config.batch]
            model.zero_grad()
            pred = _policy(model, [cur[i] for i in idx], [goal[i] for i in idx])
            loss = tc.mse_loss(pred, actions[idx])
            value = float(loss.values)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            loss.backward()
            tc.adam_step(model.params, state, lr)
            total += value * len(idx)
        losses.append(total / len(order))
        if on_epoch is not None:
            on_epoch(epoch, losses[-1])
    if config.checkpoint:
        save(model, config.checkpoint)
    return model, losses


def evaluate_loss(model: DeformerNetModel, dataset: list, cache: GeometryCache | None = None,
                  batch: int = 64) -> float:
    cache = cache or GeometryCache(model.config)
    total = 0.0
    for start in range(0, len(dataset), batch):
        chunk = dataset[start:start + batch]
        pred = _policy(model, [cache.get(s.current) for s in chunk], [cache.get(s.goal) for s in chunk])
        diff = pred.values - np.array([s.action for s in chunk])
        total += float((diff * diff).mean()) * len(chunk)
    return total / len(dataset)


def predict_batch(model: DeformerNetModel, pairs: list, cache: GeometryCache | None = None) -> np.ndarray:
    cache = cache or GeometryCache(model.config)
    return _policy(model, [cache.get(c) for c, _ in pairs], [cache.get(g) for _, g in pairs]).values.copy()


# -- persistence -----------------------------------------------------------

def sidecar_path(path) -> Path:
    return Path(str(path) + ".cfg")


def save(model: DeformerNetModel, path) -> None:
    tc.save_tensors(path, model.arrays())
    sidecar_path(path).write_text(model.config.to_text())


def load(path) -> DeformerNetModel:
    arrays = tc.load_tensors(path)
    side = sidecar_path(path)
    config = ModelConfig.from_text(side.read_text()) if side.exists() else ModelConfig()
    model = DeformerNetModel.create(config)
    if set(arrays) != set(model.params):
        raise tc.CheckpointError("checkpoint tensors do not match the model config")
    for name, arr in arrays.items():
        if arr.shape != model.params[name].shape:
            raise tc.CheckpointError(f"shape mismatch for {name}: {arr.shape}")
        model.params[name] = tc.Tensor(arr, requires_grad=True)
    return model
