"""Small fully-connected networks with manual backprop, and cross-scale sampling.

Three regressors share the Mlp machinery: a pose-confidence head (sigmoid
output trained against OKS targets), a pose-similarity embedding (unit-norm
output trained with a cosine loss on +/-1 pair labels), and a residual
refinement head (identity output trained against keypoint residuals).
Parameters are float32; all math runs in float64 for exact gradient checks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ptf
from .codec import SceneMaps
from .core import Pose
from .errors import EmptyDataset, ShapeError

HEADS = ("sigmoid", "identity", "unit")


@dataclass
class Mlp:
    """Fully-connected net: ReLU hidden layers plus a task-specific output head."""

    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head: str = "identity"
    seed: int = 0

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head: {self.head}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            d_in, d_out = self.layer_dims[i], self.layer_dims[i + 1]
            if w.shape != (d_in, d_out) or b.shape != (d_out,):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape} "
                                 f"vs dims ({d_in}, {d_out})")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]


def init_mlp(layer_dims: Sequence[int], head: str = "identity", seed: int = 0,
             weight_init_scale: float = 1.0) -> Mlp:
    """Seeded uniform init in [-s, s] with s = weight_init_scale / sqrt(fan_in)."""
    rng = np.random.default_rng(seed)
    dims = tuple(int(d) for d in layer_dims)
    weights, biases = [], []
    for d_in, d_out in zip(dims, dims[1:]):
        s = weight_init_scale / math.sqrt(d_in)
        weights.append(rng.uniform(-s, s, size=(d_in, d_out)).astype(np.float32))
        biases.append(np.zeros(d_out, dtype=np.float32))
    return Mlp(dims, weights, biases, head=head, seed=seed)


def _apply_head(head: str, z: np.ndarray) -> np.ndarray:
    if head == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    if head == "unit":
        norms = np.maximum(np.linalg.norm(z, axis=-1, keepdims=True), 1e-12)
        return z / norms
    return z


def _head_backward(head: str, z: np.ndarray, y: np.ndarray,
                   grad_y: np.ndarray) -> np.ndarray:
    if head == "sigmoid":
        return grad_y * y * (1.0 - y)
    if head == "unit":
        norms = np.maximum(np.linalg.norm(z, axis=-1, keepdims=True), 1e-12)
        proj = np.sum(y * grad_y, axis=-1, keepdims=True)
        return (grad_y - y * proj) / norms
    return grad_y


def _forward_cached(m: Mlp, x: np.ndarray):
    """Batch forward pass keeping the per-layer activations for backprop."""
    acts = [x.astype(np.float64)]
    z_last = None
    for i, (w, b) in enumerate(zip(m.weights, m.biases)):
        z = acts[-1] @ w.astype(np.float64) + b.astype(np.float64)
        if i < len(m.weights) - 1:
            acts.append(np.maximum(z, 0.0))
        else:
            z_last = z
    y = _apply_head(m.head, z_last)
    return y, (acts, z_last)


def _as_batch(m: Mlp, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != m.input_dim:
        raise ShapeError(f"input shape {x.shape} does not match input dim "
                         f"{m.input_dim}")
    return x, single


def mlp_forward(m: Mlp, x: np.ndarray) -> np.ndarray:
    """Forward pass; accepts a single vector or a (batch, dim) array."""
    xb, single = _as_batch(m, x)
    y, _ = _forward_cached(m, xb)
    return y[0] if single else y


def mlp_backward(m: Mlp, x: np.ndarray, loss_grad: np.ndarray):
    """Exact reverse-mode gradients (dweights, dbiases) for dL/doutput = loss_grad."""
    xb, single = _as_batch(m, x)
    g = np.asarray(loss_grad, dtype=np.float64)
    if single:
        g = g[None, :]
    if g.shape != (xb.shape[0], m.output_dim):
        raise ShapeError(f"loss_grad shape {loss_grad.shape} does not match "
                         f"output dim {m.output_dim}")
    y, (acts, z_last) = _forward_cached(m, xb)
    delta = _head_backward(m.head, z_last, y, g)
    d_weights = [None] * len(m.weights)
    d_biases = [None] * len(m.biases)
    for i in range(len(m.weights) - 1, -1, -1):
        d_weights[i] = acts[i].T @ delta
        d_biases[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ m.weights[i].astype(np.float64).T) * (acts[i] > 0)
    return d_weights, d_biases


def _sgd_step(m: Mlp, d_weights, d_biases, lr: float):
    for w, b, dw, db in zip(m.weights, m.biases, d_weights, d_biases):
        w -= (lr * dw).astype(np.float32)
        b -= (lr * db).astype(np.float32)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 60
    batch_size: int = 64
    seed: int = 0
    weight_init_scale: float = 1.0
    hidden_dims: tuple[int, ...] = (64, 32)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        object.__setattr__(self, "hidden_dims",
                           tuple(int(d) for d in self.hidden_dims))


# --- cross-scale sampling -----------------------------------------------------

@dataclass(frozen=True)
class SampledFeature:
    """Concatenated cross-scale reads at a pose's keypoints.

    Layout: resolution-major, keypoint-minor, feature-channel-innermost;
    the per-keypoint heatmap values at the finest resolution come last.
    """

    values: np.ndarray


def sample_features(maps: SceneMaps, pose: Pose) -> SampledFeature:
    """Bilinear feature reads at every keypoint across every resolution."""
    xy = pose.xy()
    parts = []
    for res in maps.resolutions:
        for k in range(maps.num_keypoints):
            x, y = xy[k]
            parts.extend(g.bilinear(x, y) for g in res.feature_maps)
    finest = maps.finest
    parts.extend(finest.keypoint_heatmaps[k].bilinear(xy[k, 0], xy[k, 1])
                 for k in range(maps.num_keypoints))
    return SampledFeature(np.array(parts, dtype=float))


def sampled_dim(maps: SceneMaps) -> int:
    r = len(maps.resolutions)
    return r * maps.num_keypoints * maps.feature_dim + maps.num_keypoints


_DISPLACEMENT_CAP = 12.0


def _peak_displacement(grid, x: float, y: float) -> tuple[float, float]:
    """Estimated offset toward the nearest heatmap peak, from local reads.

    For a Gaussian peak, -2 ln(h) * h / |grad h| recovers the distance and
    the gradient direction points at the peak; both follow from point reads.
    """
    h0 = grid.bilinear(x, y)
    if h0 <= 1e-4:
        return 0.0, 0.0
    d = 0.5 * grid.stride
    gx = (grid.bilinear(x + d, y) - grid.bilinear(x - d, y)) / (2 * d)
    gy = (grid.bilinear(x, y + d) - grid.bilinear(x, y - d)) / (2 * d)
    gnorm = math.hypot(gx, gy)
    if gnorm <= 1e-9:
        return 0.0, 0.0
    mag = min(-2.0 * math.log(h0) * h0 / gnorm, _DISPLACEMENT_CAP)
    return gx / gnorm * mag, gy / gnorm * mag


def refinement_input(maps: SceneMaps, pose: Pose) -> np.ndarray:
    """Input vector of the refinement regressor.

    Sampled cross-scale features, the pose coordinates (normalized by image
    size), per-resolution heatmap readouts, and the local peak-displacement
    estimates at the finest resolution.
    """
    xy = pose.xy()
    w, h = maps.image_dims
    parts = [sample_features(maps, pose).values,
             (xy / np.array([w, h], dtype=float)).ravel()]
    reads = []
    for res in maps.resolutions:
        reads.extend(res.keypoint_heatmaps[k].bilinear(xy[k, 0], xy[k, 1])
                     for k in range(maps.num_keypoints))
    parts.append(np.array(reads))
    finest = maps.finest
    disp = [_peak_displacement(finest.keypoint_heatmaps[k], xy[k, 0], xy[k, 1])
            for k in range(maps.num_keypoints)]
    parts.append(np.array(disp).ravel())
    return np.concatenate(parts)


def refinement_dim(maps: SceneMaps) -> int:
    n, r = maps.num_keypoints, len(maps.resolutions)
    return sampled_dim(maps) + 2 * n + r * n + 2 * n


def confidence_input(maps: SceneMaps, pose: Pose) -> np.ndarray:
    return sample_features(maps, pose).values


# --- training loops -----------------------------------------------------------

def _values(sample) -> np.ndarray:
    return sample.values if isinstance(sample, SampledFeature) else np.asarray(sample)


def _epoch_batches(rng, n: int, batch_size: int):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_confidence(dataset: Sequence[tuple], cfg: TrainConfig | None = None) -> Mlp:
    """Fit the pose-confidence regressor: squared error against OKS targets."""
    cfg = cfg or TrainConfig()
    if not dataset:
        raise EmptyDataset("confidence training needs at least one sample")
    x = np.stack([_values(s) for s, _ in dataset]).astype(np.float64)
    t = np.array([float(target) for _, target in dataset])
    net = init_mlp((x.shape[1], *cfg.hidden_dims, 1), head="sigmoid",
                   seed=cfg.seed, weight_init_scale=cfg.weight_init_scale)
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.epochs):
        for idx in _epoch_batches(rng, len(x), cfg.batch_size):
            xb, tb = x[idx], t[idx]
            y, cache = _forward_cached(net, xb)
            grad = 2.0 * (y - tb[:, None]) / len(idx)
            _backward_update(net, xb, cache, y, grad, cfg.learning_rate)
    return net


def train_similarity(pairs: Sequence[tuple], cfg: TrainConfig | None = None,
                     embed_dim: int = 32) -> Mlp:
    """Fit the unit-norm embedding with a cosine loss on +/-1 pair labels.

    Positive pairs incur (1 - cos); negative pairs incur max(0, cos - margin)
    with margin 0.
    """
    cfg = cfg or TrainConfig()
    if not pairs:
        raise EmptyDataset("similarity training needs at least one pair")
    xa = np.stack([_values(a) for a, _, _ in pairs]).astype(np.float64)
    xb = np.stack([_values(b) for _, b, _ in pairs]).astype(np.float64)
    labels = np.array([float(l) for _, _, l in pairs])
    if not np.all(np.isin(labels, (-1.0, 1.0))):
        raise ValueError("pair labels must be +1 or -1")
    net = init_mlp((xa.shape[1], *cfg.hidden_dims, embed_dim), head="unit",
                   seed=cfg.seed, weight_init_scale=cfg.weight_init_scale)
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.epochs):
        for idx in _epoch_batches(rng, len(xa), cfg.batch_size):
            a_in, b_in, lab = xa[idx], xb[idx], labels[idx]
            ya, cache_a = _forward_cached(net, a_in)
            yb, cache_b = _forward_cached(net, b_in)
            cos = np.sum(ya * yb, axis=1)
            # d(loss)/d(cos): -1 for positives, +1 for violated negatives.
            dcos = np.where(lab > 0, -1.0, (cos > 0.0).astype(float)) / len(idx)
            _backward_update(net, a_in, cache_a, ya, dcos[:, None] * yb,
                             cfg.learning_rate)
            _backward_update(net, b_in, cache_b, yb, dcos[:, None] * ya,
                             cfg.learning_rate)
    return net


def train_refinement(dataset: Sequence[tuple], cfg: TrainConfig | None = None) -> Mlp:
    """Fit the residual regressor: squared error against (target - pose) residuals.

    Dataset entries are (input, residual_target) or (input, residual_target,
    mask); masked-out entries contribute no gradient.
    """
    cfg = cfg or TrainConfig()
    if not dataset:
        raise EmptyDataset("refinement training needs at least one sample")
    x = np.stack([_values(entry[0]) for entry in dataset]).astype(np.float64)
    t = np.stack([np.asarray(entry[1], dtype=float) for entry in dataset])
    mask = np.stack([np.asarray(entry[2], dtype=float) if len(entry) > 2
                     else np.ones(t.shape[1]) for entry in dataset])
    net = init_mlp((x.shape[1], *cfg.hidden_dims, t.shape[1]), head="identity",
                   seed=cfg.seed, weight_init_scale=cfg.weight_init_scale)
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.epochs):
        for idx in _epoch_batches(rng, len(x), cfg.batch_size):
            xb = x[idx]
            y, cache = _forward_cached(net, xb)
            grad = 2.0 * (y - t[idx]) * mask[idx] / len(idx)
            _backward_update(net, xb, cache, y, grad, cfg.learning_rate)
    return net


def _backward_update(net: Mlp, x: np.ndarray, cache, y: np.ndarray,
                     grad_y: np.ndarray, lr: float):
    acts, z_last = cache
    delta = _head_backward(net.head, z_last, y, grad_y)
    for i in range(len(net.weights) - 1, -1, -1):
        dw = acts[i].T @ delta
        db = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ net.weights[i].astype(np.float64).T) * (acts[i] > 0)
        net.weights[i] -= (lr * dw).astype(np.float32)
        net.biases[i] -= (lr * db).astype(np.float32)


def training_loss(net: Mlp, dataset: Sequence[tuple]) -> float:
    """Mean squared error of a (input, target[, mask]) dataset under the net."""
    x = np.stack([_values(entry[0]) for entry in dataset]).astype(np.float64)
    t = np.stack([np.atleast_1d(np.asarray(entry[1], dtype=float))
                  for entry in dataset])
    y = mlp_forward(net, x)
    return float(np.mean(np.sum((y - t) ** 2, axis=1)))


def apply_refinement(p: Pose, p_delta: np.ndarray) -> Pose:
    """Add a per-keypoint residual (2N vector) to a pose; metadata preserved."""
    delta = np.asarray(p_delta, dtype=float)
    if delta.shape != (2 * len(p),):
        raise ShapeError(f"residual shape {delta.shape} does not match pose "
                         f"length {len(p)}")
    xy = p.xy() + delta.reshape(-1, 2)
    return Pose.from_arrays(xy, vis=p.vis(), score=p.score, id=p.id)


# --- serialization ------------------------------------------------------------

def save_mlp(m: Mlp, directory):
    """Write the net as PTF weight tensors plus a manifest.json."""
    directory = ptf.ptf_dir(directory)
    manifest = {"layer_dims": list(m.layer_dims), "head": m.head,
                "seed": m.seed, "activation": "relu"}
    for i, (w, b) in enumerate(zip(m.weights, m.biases)):
        ptf.write_ptf(directory / f"w{i}.ptf", w)
        ptf.write_ptf(directory / f"b{i}.ptf", b)
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)


def load_mlp(directory) -> Mlp:
    directory = Path(directory)
    with open(directory / "manifest.json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    dims = tuple(manifest["layer_dims"])
    weights = [ptf.read_ptf(directory / f"w{i}.ptf") for i in range(len(dims) - 1)]
    biases = [ptf.read_ptf(directory / f"b{i}.ptf") for i in range(len(dims) - 1)]
    return Mlp(dims, weights, biases, head=manifest["head"],
               seed=int(manifest.get("seed", 0)))
