"""Small differentiable building blocks for voxel fields.

Fields are ``(C, X, Y, Z)`` arrays. Every op comes as a forward function and a
matching backward function; forwards that need saved state return a cache.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .geometry import Pose

BCE_EPS = 1e-7


@dataclass
class Conv3Params:
    weight: np.ndarray  # (Cout, Cin, k, k, k)
    bias: np.ndarray  # (Cout,)

    def __post_init__(self):
        w = np.asarray(self.weight)
        if w.ndim != 5 or w.shape[2] != w.shape[3] or w.shape[3] != w.shape[4]:
            raise ValueError(f"weight must be (Cout, Cin, k, k, k), got {w.shape}")
        if w.shape[2] not in (1, 3, 5):
            raise ValueError(f"kernel size must be 1, 3 or 5, got {w.shape[2]}")
        if np.shape(self.bias) != (w.shape[0],):
            raise ValueError("bias must have one entry per output channel")

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]


def _check_field(x):
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"field must be (C, X, Y, Z), got shape {x.shape}")
    return x


def _im2col(x, k):
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))  # (C, X, Y, Z, k, k, k)
    C = x.shape[0]
    return np.ascontiguousarray(win.transpose(0, 4, 5, 6, 1, 2, 3)).reshape(C * k ** 3, -1)


def conv3d_forward(x, params: Conv3Params):
    """Same-size 3-D cross-correlation with zero padding and stride 1.

    Returns ``(y, cache)``.
    """
    x = _check_field(x)
    w, b = params.weight, params.bias
    if x.shape[0] != w.shape[1]:
        raise ValueError(f"input has {x.shape[0]} channels, kernel expects {w.shape[1]}")
    k = w.shape[2]
    cols = _im2col(x, k)
    y = w.reshape(w.shape[0], -1) @ cols + b[:, None]
    return y.reshape((w.shape[0],) + x.shape[1:]), (x.shape, cols, params)


def conv3d_backward(dy, cache):
    """Gradients ``(dx, dweight, dbias)`` for :func:`conv3d_forward`."""
    xshape, cols, params = cache
    w = params.weight
    dy = np.asarray(dy)
    if dy.shape != (w.shape[0],) + tuple(xshape[1:]):
        raise ValueError(f"upstream gradient has shape {dy.shape}")
    dy2 = dy.reshape(w.shape[0], -1)
    dw = (dy2 @ cols.T).reshape(w.shape)
    db = dy2.sum(axis=1)
    # correlation with the flipped, channel-transposed kernel
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    dx, _ = conv3d_forward(dy, Conv3Params(wt, np.zeros(wt.shape[0], dtype=w.dtype)))
    return dx, dw, db


def sigmoid_forward(x):
    x = np.asarray(x)
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(dy, y):
    """``y`` is the forward output."""
    return dy * y * (1.0 - y)


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(dy, x):
    """``x`` is the forward input; the subgradient at 0 is 0."""
    return np.where(x > 0, dy, 0)


def logit(p, eps=BCE_EPS):
    p = np.clip(p, eps, 1.0 - eps)
    return np.log(p) - np.log1p(-p)


def bce_loss(pred, target, eps=BCE_EPS):
    """Mean binary cross-entropy and its gradient w.r.t. ``pred``.

    ``pred`` is clamped to ``[eps, 1 - eps]`` first; the returned gradient is
    evaluated at the clamped value.
    """
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    p = np.clip(pred, eps, 1.0 - eps)
    n = p.size
    loss = -np.sum(target * np.log(p) + (1.0 - target) * np.log1p(-p)) / n
    grad = -(target / p - (1.0 - target) / (1.0 - p)) / n
    return float(loss), grad


def wrap_unit(d):
    """Map normalized angle differences into [-0.5, 0.5)."""
    return np.mod(np.asarray(d) + 0.5, 1.0) - 0.5


def _pose_vec(p):
    return p.as_vector() if isinstance(p, Pose) else np.asarray(p, dtype=float).reshape(6)


def l1_pose_loss(p_est, p_gt, alpha=1.0, beta=0.01, gamma=1.0):
    """Weighted L1 pose loss and its (sub)gradient w.r.t. ``p_est``.

    Angles are wrapped to [0, 2*pi) and divided by 2*pi before differencing;
    the difference itself wraps modulo 1 so that 0.01 and 2*pi - 0.01 are close.
    """
    if min(alpha, beta, gamma) <= 0:
        raise ValueError("loss weights must be positive")
    a = _pose_vec(p_est)
    b = _pose_vec(p_gt)
    two_pi = 2.0 * np.pi
    na = np.mod(a[:3], two_pi) / two_pi
    nb = np.mod(b[:3], two_pi) / two_pi
    dth = wrap_unit(na - nb)
    dt = a[3:] - b[3:]
    weights = np.array([beta, beta, gamma])
    loss = alpha * np.sum(np.abs(dth)) + np.sum(weights * np.abs(dt))
    grad = np.concatenate([alpha * np.sign(dth) / two_pi, weights * np.sign(dt)])
    return float(loss), grad


@dataclass
class AdamState:
    t: int
    m: list
    v: list

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState | None = None, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update.

    ``params`` and ``grads`` are matching sequences of arrays. Returns new
    ``(params, state)``; the inputs are left untouched. ``lr`` may be an array
    broadcastable against each parameter.
    """
    params = [np.asarray(p) for p in params]
    grads = [np.asarray(g) for g in grads]
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValueError("params and grads must have matching shapes")
    if state is None:
        state = AdamState.zeros_like(params)
    t = state.t + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_p.append((p - step).astype(p.dtype, copy=False))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(t, new_m, new_v)


def finite_difference_gradient(fn, x, step=1e-6):
    """Central-difference gradient of scalar ``fn`` at array ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + step
        fp = fn(x)
        x[idx] = old - step
        fm = fn(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * step)
    return g


# ---------------------------------------------------------------------------
# parameter container: PSVH header with dimension 0, a float count, the floats,
# plus a JSON sidecar naming every array
# ---------------------------------------------------------------------------

_PARAM_HEADER = struct.Struct("<4sBII")


def save_params(path, layers):
    """Write conv layers to ``path`` and a manifest to ``path + '.json'``."""
    path = Path(path)
    arrays, manifest, offset = [], [], 0
    for i, layer in enumerate(layers):
        for name, arr in (("weight", layer.weight), ("bias", layer.bias)):
            a = np.asarray(arr, dtype="<f4")
            manifest.append({"name": f"layer{i}.{name}", "shape": list(a.shape), "offset": offset})
            offset += a.size
            arrays.append(a.ravel())
    flat = np.concatenate(arrays) if arrays else np.zeros(0, "<f4")
    with open(path, "wb") as fh:
        fh.write(_PARAM_HEADER.pack(b"PSVH", 1, 0, flat.size))
        fh.write(flat.tobytes())
    side = {"format": "psvh-params", "version": 1, "count": int(flat.size), "arrays": manifest}
    Path(str(path) + ".json").write_text(json.dumps(side, indent=2, sort_keys=True))


def load_params(path):
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _PARAM_HEADER.size:
        raise ValueError("parameter file too short")
    magic, version, dim, count = _PARAM_HEADER.unpack_from(data)
    if magic != b"PSVH" or version != 1 or dim != 0:
        raise ValueError("not a PSVH parameter container")
    body = data[_PARAM_HEADER.size:]
    if len(body) != 4 * count:
        raise ValueError("truncated parameter payload")
    flat = np.frombuffer(body, dtype="<f4")
    side = json.loads(Path(str(path) + ".json").read_text())
    arrays = {}
    for entry in side["arrays"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arrays[entry["name"]] = flat[entry["offset"]:entry["offset"] + n].reshape(entry["shape"]).astype(np.float32)
    layers = []
    i = 0
    while f"layer{i}.weight" in arrays:
        layers.append(Conv3Params(arrays[f"layer{i}.weight"], arrays[f"layer{i}.bias"]))
        i += 1
    return layers
