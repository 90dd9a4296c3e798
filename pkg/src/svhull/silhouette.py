"""Silhouette maps: rendering from occupancy grids, degradation and PGM I/O.

A silhouette is a ``(height, width)`` float array ``S[row, col]`` of foreground
probabilities.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .geometry import CameraIntrinsics, Pose, pose_to_transform
from .voxelgrid import check_grid, trilinear_sample

DEFAULT_SIZE = (128, 128)  # (height, width)


class PGMFormatError(ValueError):
    pass


def check_silhouette(S, name="silhouette") -> np.ndarray:
    S = np.asarray(S)
    if S.ndim != 2 or min(S.shape) < 8:
        raise ValueError(f"{name} must be a 2-D map of at least 8x8 pixels, got {S.shape}")
    return S


def pixel_rays(K: CameraIntrinsics, size=DEFAULT_SIZE) -> np.ndarray:
    """Camera-frame ray directions (z = 1) through every pixel center, ``(H, W, 3)``."""
    h, w = size
    u = np.arange(w) + 0.5
    v = np.arange(h) + 0.5
    uu, vv = np.meshgrid(u, v)
    return np.stack([(uu - K.u0) / K.f, (vv - K.v0) / K.f, np.ones_like(uu)], axis=-1)


def render_silhouette(V, p: Pose, K: CameraIntrinsics, size=DEFAULT_SIZE, n_steps=None) -> np.ndarray:
    """Max-intensity ray march of an occupancy grid.

    Each pixel ray is clipped to the cube and sampled at ``n_steps`` (default
    ``2 * D``) evenly spaced points with trilinear interpolation; the pixel takes
    the largest sample. Rays that miss the cube are 0.
    """
    V = check_grid(V)
    D = V.shape[0]
    n_steps = 2 * D if n_steps is None else int(n_steps)
    T = pose_to_transform(p, K)
    d_cam = pixel_rays(K, size).reshape(-1, 3)
    # object frame: X(s) = origin + s * direction
    origin = -T.R.T @ T.t
    dirs = d_cam @ T.R
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (-0.5 - origin) * inv
        t2 = (0.5 - origin) * inv
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    tmin = np.minimum(t1, t2).max(axis=1)
    tmax = np.maximum(t1, t2).min(axis=1)
    tmin = np.maximum(tmin, 0.0)
    hit = tmax > tmin
    out = np.zeros(d_cam.shape[0])
    idx = np.nonzero(hit)[0]
    if idx.size and np.any(V):
        frac = (np.arange(n_steps) + 0.5) / n_steps
        # bounded batches keep the sample array small
        step = max(1, 200000 // n_steps)
        for s in range(0, idx.size, step):
            r = idx[s:s + step]
            ts = tmin[r, None] + frac[None, :] * (tmax[r] - tmin[r])[:, None]
            pts = origin + ts[..., None] * dirs[r, None, :]
            out[r] = trilinear_sample(V, pts).max(axis=1)
    return np.clip(out, 0.0, 1.0).reshape(size)


def silhouette_iou(S1, S2, tau=0.5) -> float:
    S1 = check_silhouette(S1, "S1")
    S2 = check_silhouette(S2, "S2")
    if S1.shape != S2.shape:
        raise ValueError(f"dimension mismatch: {S1.shape} vs {S2.shape}")
    a = S1 >= tau
    b = S2 >= tau
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def degrade_silhouette(S, seed=0, blur_radius=0, dilate_px=0, erode_px=0, flip_rate=0.0) -> np.ndarray:
    """Box blur, then grey dilation and erosion with square windows, then
    Bernoulli pixel flips ``v -> 1 - v``."""
    S = np.array(check_silhouette(S), dtype=float)
    if min(blur_radius, dilate_px, erode_px, flip_rate) < 0:
        raise ValueError("degradation parameters must be nonnegative")
    if blur_radius:
        S = ndimage.uniform_filter(S, size=2 * int(blur_radius) + 1, mode="constant")
    if dilate_px:
        S = ndimage.grey_dilation(S, size=(2 * int(dilate_px) + 1,) * 2, mode="constant", cval=0.0)
    if erode_px:
        S = ndimage.grey_erosion(S, size=(2 * int(erode_px) + 1,) * 2, mode="constant", cval=0.0)
    if flip_rate:
        rng = np.random.default_rng(seed)
        flip = rng.random(S.shape) < flip_rate
        S = np.where(flip, 1.0 - S, S)
    return np.clip(S, 0.0, 1.0)


def is_binary(S) -> bool:
    S = np.asarray(S)
    return bool(np.all((S == 0) | (S == 1)))


def quantize(S) -> np.ndarray:
    """The 8-bit values written to PGM: ``floor(255 * v + 0.5)``."""
    return np.floor(255.0 * np.clip(np.asarray(S, dtype=float), 0.0, 1.0) + 0.5).astype(np.uint8)


def save_pgm(path, S):
    S = check_silhouette(S)
    h, w = S.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quantize(S).tobytes())


def _pgm_tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens; returns (tokens, offset of raster)."""
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PGMFormatError("truncated PGM header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def load_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, offset = _pgm_tokens(data, 4)
    if tokens[0] != b"P5":
        raise PGMFormatError(f"not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PGMFormatError("non-integer PGM header field") from None
    if maxval != 255:
        raise PGMFormatError(f"only 8-bit PGM supported, maxval={maxval}")
    raster = data[offset:offset + w * h]
    if len(raster) != w * h:
        raise PGMFormatError("truncated PGM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0
