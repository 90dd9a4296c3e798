"""Hull-guided refinement of coarse occupancy grids and pose fitting through the
hull layer."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .geometry import MIN_DEPTH, CameraIntrinsics, Pose, pose_to_transform, project_points
from .psvh import psvh_backward_exact, psvh_forward
from .silhouette import is_binary
from .voxelgrid import DEFAULT_TAU, iou, voxel_centers

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "loss", "holdout_iou_coarse", "holdout_iou_refined")


def _same_shape(V, H):
    V = np.asarray(V)
    H = np.asarray(H)
    if V.shape != H.shape:
        raise ValueError(f"dimension mismatch: {V.shape} vs {H.shape}")
    return V, H


def probability_maps(V, H):
    """``(V * (1 - H), H * (1 - V))``: occupied-but-outside-hull and
    inside-hull-but-empty probabilities."""
    V, H = _same_shape(V, H)
    return V * (1.0 - H), H * (1.0 - V)


def carve_refine(V, H, tau_h=0.5):
    """Soft carving: ``V * H``, except voxels with ``H >= tau_h`` keep ``V``.

    ``tau_h=None`` gives the plain product.
    """
    V, H = _same_shape(V, H)
    out = V * H
    if tau_h is not None:
        out = np.where(H >= tau_h, V, out)
    return out


@dataclass
class RefinerConfig:
    channels: tuple = (4, 8, 8, 8, 1)
    kernel_size: int = 3
    lr: float = 1e-4
    epochs: int = 10
    seed: int = 0
    crop: int | None = 16  # training crop edge in voxels; None trains on whole grids
    crops_per_sample: int = 4
    batch: int = 4
    init_scale: float = 1.0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) < 2 or self.channels[0] != 4 or self.channels[-1] != 1:
            raise ValueError("channels must start with 4 and end with 1")
        if self.kernel_size not in (1, 3, 5):
            raise ValueError("kernel_size must be 1, 3 or 5")
        if self.epochs < 0 or self.lr <= 0:
            raise ValueError("epochs must be >= 0 and lr > 0")


def init_params(config: RefinerConfig, dtype=np.float32):
    """He-initialized conv stack; the last layer is zero so the refiner starts as
    the identity on ``V``."""
    rng = np.random.default_rng(config.seed)
    k = config.kernel_size
    layers = []
    pairs = list(zip(config.channels[:-1], config.channels[1:]))
    for n, (cin, cout) in enumerate(pairs):
        if n == len(pairs) - 1:
            w = np.zeros((cout, cin, k, k, k), dtype=dtype)
        else:
            std = config.init_scale * np.sqrt(2.0 / (cin * k ** 3))
            w = (rng.standard_normal((cout, cin, k, k, k)) * std).astype(dtype)
        layers.append(nn.Conv3Params(w, np.zeros(cout, dtype=dtype)))
    return layers


_LOGIT_CAP = float(nn.logit(1.0 - nn.BCE_EPS))


def _features(V, H):
    A, B = probability_maps(V, H)
    return np.stack([V, H, A, B])


def rnet_forward(params, V, H, return_cache=False):
    """Refined occupancy ``sigmoid(z + logit(V))`` where ``z`` is the output of a
    ReLU conv stack fed with ``[V, H, V(1-H), H(1-V)]``."""
    V, H = _same_shape(V, H)
    if V.ndim != 3:
        raise ValueError("V and H must be 3-D grids")
    if not params or params[0].weight.shape[1] != 4 or params[-1].weight.shape[0] != 1:
        raise ValueError("refiner must map 4 input channels to 1 output channel")
    dtype = params[0].weight.dtype
    x = _features(V, H).astype(dtype)
    caches = []
    for n, layer in enumerate(params):
        a, c = nn.conv3d_forward(x, layer)
        if n < len(params) - 1:
            caches.append((c, a))
            x = nn.relu_forward(a)
        else:
            caches.append((c, None))
            z = a[0]
    # clipping keeps the output strictly inside (0, 1)
    a = z.astype(np.float64) + nn.logit(V)
    out = nn.sigmoid_forward(np.clip(a, -_LOGIT_CAP, _LOGIT_CAP))
    if return_cache:
        return out, (V, H, caches, out, np.abs(a) <= _LOGIT_CAP)
    return out


def rnet_backward(cache, d_out):
    """Returns ``(layer_grads, dV, dH)`` with ``layer_grads`` a list of ``(dw, db)``."""
    V, H, caches, out, unclipped = cache
    da = np.where(unclipped, nn.sigmoid_backward(np.asarray(d_out, dtype=float), out), 0.0)
    # residual branch through the clamped logit
    eps = nn.BCE_EPS
    inside = (V > eps) & (V < 1 - eps)
    dV = np.where(inside, da / np.where(inside, V * (1.0 - V), 1.0), 0.0)
    grads = [None] * len(caches)
    dx = da[None].astype(caches[-1][0][1].dtype)
    for n in range(len(caches) - 1, -1, -1):
        c, pre = caches[n]
        if pre is not None:
            dx = nn.relu_backward(dx, pre)
        dx, dw, db = nn.conv3d_backward(dx, c)
        grads[n] = (dw, db)
    d0, d1, d2, d3 = (d.astype(np.float64) for d in dx)
    dV = dV + d0 + d2 * (1.0 - H) - d3 * H
    dH = d1 - d2 * V + d3 * (1.0 - V)
    return grads, dV, dH


def _flatten(layers):
    return [a for l in layers for a in (l.weight, l.bias)]


def _unflatten(arrays):
    return [nn.Conv3Params(arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2)]


def _crop_slices(rng, shapes_union, edge, D):
    """Random crop whose center is drawn from the informative voxels."""
    idx = np.flatnonzero(shapes_union)
    if idx.size:
        c = np.array(np.unravel_index(rng.choice(idx), (D, D, D)))
    else:
        c = rng.integers(0, D, size=3)
    lo = np.clip(c - edge // 2, 0, D - edge)
    return tuple(slice(int(l), int(l) + edge) for l in lo)


def rnet_loss_and_grads(params, V, H, V_gt):
    out, cache = rnet_forward(params, V, H, return_cache=True)
    loss, dout = nn.bce_loss(out, V_gt)
    grads, _, _ = rnet_backward(cache, dout)
    return loss, grads, out


def evaluate_refiner(params, triples, tau=DEFAULT_TAU):
    """Mean IoU of the coarse and refined grids over ``(V, H, V_gt)`` triples."""
    if not triples:
        return float("nan"), float("nan")
    before, after = [], []
    for V, H, V_gt in triples:
        before.append(iou(V, V_gt, tau))
        after.append(iou(rnet_forward(params, V, H), V_gt, tau))
    return float(np.mean(before)), float(np.mean(after))


@dataclass
class TrainResult:
    params: list
    log: list = field(default_factory=list)

    def write_log(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
            w.writeheader()
            for row in self.log:
                w.writerow({k: row[k] for k in LOG_COLUMNS})


def rnet_train(dataset, config: RefinerConfig | None = None, holdout=None, init=None) -> TrainResult:
    """Fit the refiner to ``(V_coarse, H, V_gt)`` triples with BCE and Adam.

    Each epoch visits the samples in a seeded order and draws
    ``config.crops_per_sample`` random crops from each (whole grids when
    ``config.crop`` is None); gradients of ``config.batch`` crops are averaged
    per Adam step. ``init`` continues from existing parameters.
    """
    config = config or RefinerConfig()
    if not dataset:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    params = [nn.Conv3Params(l.weight.copy(), l.bias.copy()) for l in init] if init else init_params(config)
    D = np.asarray(dataset[0][0]).shape[0]
    data = [(np.asarray(V, float), np.asarray(H, float), np.asarray(G, float)) for V, H, G in dataset]
    focus = [(V > 0.05) | (H > 0.05) | (G > 0.5) for V, H, G in data]
    flat = _flatten(params)
    state = nn.AdamState.zeros_like(flat)
    result = TrainResult(params)
    for epoch in range(1, config.epochs + 1):
        order = np.repeat(rng.permutation(len(data)), config.crops_per_sample if config.crop else 1)
        losses = []
        acc = None
        count = 0
        for s in order:
            V, H, G = data[s]
            if config.crop and config.crop < D:
                sl = _crop_slices(rng, focus[s], config.crop, D)
                V, H, G = V[sl], H[sl], G[sl]
            loss, grads, _ = rnet_loss_and_grads(_unflatten(flat), V, H, G)
            losses.append(loss)
            g = [a for pair in grads for a in pair]
            acc = g if acc is None else [x + y for x, y in zip(acc, g)]
            count += 1
            if count == config.batch:
                flat, state = nn.adam_step(flat, [x / count for x in acc], state, lr=config.lr)
                acc, count = None, 0
        if count:
            flat, state = nn.adam_step(flat, [x / count for x in acc], state, lr=config.lr)
        params = _unflatten(flat)
        row = {"epoch": epoch, "loss": float(np.mean(losses)),
               "holdout_iou_coarse": float("nan"), "holdout_iou_refined": float("nan")}
        if holdout:
            row["holdout_iou_coarse"], row["holdout_iou_refined"] = evaluate_refiner(params, holdout)
        log.info("epoch %d loss %.5f holdout %.4f -> %.4f", epoch, row["loss"],
                 row["holdout_iou_coarse"], row["holdout_iou_refined"])
        result.log.append(row)
    result.params = params
    return result


# ---------------------------------------------------------------------------
# pose fitting
# ---------------------------------------------------------------------------

def hull_consistency_loss(V, H, lam=0.1):
    """``sum(V (1 - H) + lam (1 - V) H)`` and its gradient w.r.t. ``H``."""
    loss = float(np.sum(V * (1.0 - H) + lam * (1.0 - V) * H))
    return loss, -V + lam * (1.0 - V)


def _pose_ok(p_vec, K, X):
    if not np.all(np.isfinite(p_vec)) or p_vec[5] <= MIN_DEPTH:
        return False
    p = Pose.from_vector(p_vec)
    _, _, _, valid = project_points(K, pose_to_transform(p, K), X)
    return bool(np.all(valid))


# per-entry step scale: radians, pixels, cube units
POSE_STEP_SCALE = np.array([1.0, 1.0, 1.0, 100.0, 100.0, 1.0])


def pose_fit(V, S, K: CameraIntrinsics, p0: Pose, steps=150, lr=0.01, lam=0.1, step_scale=POSE_STEP_SCALE):
    """Refine a pose so the hull of ``S`` agrees with occupancy ``V``.

    Minimizes ``sum(V (1 - H_p) + lam (1 - V) H_p)`` with Adam on the pose
    vector (per-entry step ``lr * step_scale``, cosine-decayed), using the exact
    hull backward pass. Steps that put any voxel behind the camera are halved
    until valid. Returns ``(best_pose, loss_trace)``.
    """
    S = np.asarray(S, dtype=float)
    if is_binary(S) and S.min() < S.max():
        raise ValueError("pose fitting needs a smoothed silhouette (blur radius >= 1 px); got a binary mask")
    V = np.asarray(V, dtype=float)
    D = V.shape[0]
    X = voxel_centers(D).reshape(-1, 3)
    p = p0.as_vector()
    state = None
    best_loss, best_p = np.inf, p.copy()
    trace = []
    for it in range(steps + 1):
        pose = Pose.from_vector(p)
        H = psvh_forward(S, pose, K, D)
        loss, dH = hull_consistency_loss(V, H, lam)
        trace.append(loss)
        if loss < best_loss:
            best_loss, best_p = loss, p.copy()
        if it == steps:
            break
        _, grad = psvh_backward_exact(dH, S, pose, K)
        rate = lr * 0.5 * (1.0 + np.cos(np.pi * it / steps)) * step_scale
        (new,), state = nn.adam_step([p], [grad], state, lr=rate)
        delta = new - p
        for _ in range(30):
            if _pose_ok(p + delta, K, X):
                break
            delta = delta / 2
        else:
            delta = np.zeros_like(delta)
        p = p + delta
    return Pose.from_vector(best_p), trace
