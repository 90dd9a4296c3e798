"""Probabilistic single-view visual hull layer.

Forward: every voxel center is projected into the silhouette and takes the
bilinearly interpolated foreground probability found there. Two backward paths
are provided for the pose gradient: :func:`psvh_backward_exact` differentiates
the bilinear lookup through the analytic projection Jacobian, and
:func:`psvh_pose_grad_paper` goes through finite-difference spatial gradients of
the hull grid instead.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import (
    CameraIntrinsics,
    Pose,
    camera_points_pose_jacobian,
    euler_to_rotation,
    pose_to_transform,
    project_points,
    projection_pose_jacobians,
)
from .silhouette import DEFAULT_SIZE, check_silhouette, is_binary
from .voxelgrid import DEFAULT_DIM, check_grid, voxel_centers


@dataclass(frozen=True)
class _Footprint:
    x0: np.ndarray
    y0: np.ndarray
    fx: np.ndarray
    fy: np.ndarray
    inside: np.ndarray


def _footprint(u, v, shape) -> _Footprint:
    h, w = shape
    x = u - 0.5
    y = v - 0.5
    with np.errstate(invalid="ignore"):
        inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    x = np.where(inside, x, 0.0)
    y = np.where(inside, y, 0.0)
    x0 = np.minimum(np.floor(x).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(y).astype(np.intp), h - 2)
    return _Footprint(x0, y0, x - x0, y - y0, inside)


def _bilinear(S, fp: _Footprint) -> np.ndarray:
    x0, y0, fx, fy = fp.x0, fp.y0, fp.fx, fp.fy
    val = ((1 - fx) * (1 - fy) * S[y0, x0] + fx * (1 - fy) * S[y0, x0 + 1]
           + (1 - fx) * fy * S[y0 + 1, x0] + fx * fy * S[y0 + 1, x0 + 1])
    return np.where(fp.inside, val, 0.0)


def psvh_forward(S, p: Pose, K: CameraIntrinsics, D=DEFAULT_DIM, return_stats=False):
    """Build the hull grid ``H`` (``(D, D, D)``) from a silhouette and a pose.

    Voxels behind the camera or projecting outside the image get 0. With
    ``return_stats`` a dict with the voxel counts of both cases is returned too.
    """
    S = check_silhouette(S)
    X = voxel_centers(D).reshape(-1, 3)
    u, v, _, valid = project_points(K, pose_to_transform(p, K), X)
    fp = _footprint(u, v, S.shape)
    H = _bilinear(S, fp).reshape(D, D, D)
    if not return_stats:
        return H
    n = X.shape[0]
    stats = {
        "voxels": n,
        "behind_camera": int(np.count_nonzero(~valid)),
        "off_image": int(np.count_nonzero(valid & ~fp.inside)),
    }
    stats["off_image_fraction"] = (stats["behind_camera"] + stats["off_image"]) / n
    return H, stats


def psvh_forward_linear(dS, p: Pose, K: CameraIntrinsics, D=DEFAULT_DIM):
    """The forward map applied to a perturbation ``dS`` (the layer is linear in S)."""
    return psvh_forward(dS, p, K, D)


def psvh_backward_exact(dL_dH, S, p: Pose, K: CameraIntrinsics):
    """Gradients of a loss w.r.t. the silhouette and the 6-D pose.

    ``dL_dS`` scatters each voxel's gradient onto its four bilinear taps;
    ``dL_dp`` chains the bilinear image gradient with the analytic projection
    Jacobian. Off-image and behind-camera voxels contribute nothing.
    """
    S = check_silhouette(S)
    g = check_grid(dL_dH, "dL_dH")
    D = g.shape[0]
    g = np.asarray(g, dtype=float).ravel()
    X = voxel_centers(D).reshape(-1, 3)
    u, v, J, valid = projection_pose_jacobians(K, p, X)
    fp = _footprint(u, v, S.shape)
    m = fp.inside
    x0, y0, fx, fy, gm = fp.x0[m], fp.y0[m], fp.fx[m], fp.fy[m], g[m]

    h, w = S.shape
    flat = np.zeros(h * w)
    base = y0 * w + x0
    for off, wt in ((0, (1 - fx) * (1 - fy)), (1, fx * (1 - fy)), (w, (1 - fx) * fy), (w + 1, fx * fy)):
        flat += np.bincount(base + off, weights=gm * wt, minlength=h * w)
    dL_dS = flat.reshape(h, w)

    s00, s10 = S[y0, x0], S[y0, x0 + 1]
    s01, s11 = S[y0 + 1, x0], S[y0 + 1, x0 + 1]
    dHdu = (1 - fy) * (s10 - s00) + fy * (s11 - s01)
    dHdv = (1 - fx) * (s01 - s00) + fx * (s11 - s10)
    dL_dp = (gm * dHdu) @ J[m, 0, :] + (gm * dHdv) @ J[m, 1, :]
    return dL_dS, dL_dp


def spatial_gradient(H):
    """``(dH/dx, dH/dy, dH/dz)`` in cube units.

    Interior voxels use the central-difference kernel ``[-1, 0, 1] / (2 * delta)``
    with ``delta = 1 / D``; the outermost layers use one-sided differences.
    """
    H = np.asarray(check_grid(H, "H"), dtype=float)
    D = H.shape[0]
    if D < 3:
        raise ValueError("spatial gradient needs D >= 3")
    delta = 1.0 / D
    kernel = np.array([-1.0, 0.0, 1.0]) / (2 * delta)
    out = []
    for axis in range(3):
        g = ndimage.correlate1d(H, kernel, axis=axis, mode="nearest")
        first = [slice(None)] * 3
        last = [slice(None)] * 3
        first[axis], last[axis] = 0, -1
        a0 = [slice(None)] * 3
        a1 = [slice(None)] * 3
        a0[axis], a1[axis] = 1, 0
        g[tuple(first)] = (H[tuple(a0)] - H[tuple(a1)]) / delta
        b0 = [slice(None)] * 3
        b1 = [slice(None)] * 3
        b0[axis], b1[axis] = -1, -2
        g[tuple(last)] = (H[tuple(b0)] - H[tuple(b1)]) / delta
        out.append(g)
    return tuple(out)


def psvh_pose_grad_paper(dL_dH, H, p: Pose, K: CameraIntrinsics, image_size=DEFAULT_SIZE):
    """Pose gradient through the voxel-space gradient of ``H``.

    Moving the pose by ``dp`` makes voxel ``X`` read the silhouette where the
    object point ``X + R^T (dR X + dt)`` read it before, so
    ``dH(X)/dp = grad H(X) . R^T dP/dp`` with ``P = R X + t``. ``grad H`` comes
    from :func:`spatial_gradient`.
    """
    g = check_grid(dL_dH, "dL_dH")
    H = check_grid(H, "H")
    if g.shape != H.shape:
        raise ValueError(f"shape mismatch: {g.shape} vs {H.shape}")
    D = H.shape[0]
    gx, gy, gz = spatial_gradient(H)
    gradH = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    X = voxel_centers(D).reshape(-1, 3)
    P, dP = camera_points_pose_jacobian(K, p, X)
    R = euler_to_rotation(p.theta1, p.theta2, p.theta3)
    dX = np.einsum("ba,nbk->nak", R, dP)  # R^T dP
    u, v, _, valid = project_points(K, pose_to_transform(p, K), X)
    m = valid & _footprint(u, v, image_size).inside
    gm = np.asarray(g, dtype=float).ravel()[m]
    return np.einsum("n,na,nak->k", gm, gradH[m], dX[m])


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

POSE_PARAMS = ("theta1", "theta2", "theta3", "tu", "tv", "tz")


@dataclass
class GradcheckCase:
    """A small self-contained configuration for checking PSVH gradients."""

    path: str = "pose"  # "pose" or "silhouette"
    D: int = 8
    image_size: tuple = (32, 32)
    focal: float = 37.5
    blur_radius: int = 3
    binary: bool = False
    pose_step: float = 1e-6
    silhouette_step: float = 1e-2
    pose_tol: float = 1e-4
    silhouette_tol: float = 1e-6

    def intrinsics(self) -> CameraIntrinsics:
        h, w = self.image_size
        return CameraIntrinsics(self.focal, w / 2.0, h / 2.0)


@dataclass
class GradcheckReport:
    path: str
    eligible: bool
    reason: str = ""
    rows: list = field(default_factory=list)  # (parameter, analytic, numeric, rel_error)
    max_rel_error: dict = field(default_factory=dict)
    tolerance: float = 0.0

    @property
    def passed(self) -> bool:
        return self.eligible and all(e < self.tolerance for e in self.max_rel_error.values())

    def to_csv(self, fh=None) -> str:
        buf = io.StringIO() if fh is None else fh
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["parameter", "analytic", "numeric", "rel_error"])
        for row in self.rows:
            w.writerow([row[0], repr(float(row[1])), repr(float(row[2])), repr(float(row[3]))])
        return buf.getvalue() if fh is None else ""


def relative_errors(analytic, numeric, floor_frac=1e-6):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``; the floor is ``floor_frac``
    times the largest numeric magnitude of the group (guards exact zeros)."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    floor = max(floor_frac * float(np.max(np.abs(n), initial=0.0)), 1e-300)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _case_silhouette(case: GradcheckCase, p: Pose, rng) -> np.ndarray:
    from .silhouette import degrade_silhouette, render_silhouette

    D = case.D
    V = np.zeros((D, D, D))
    lo = rng.integers(1, D // 3 + 1, size=3)
    hi = rng.integers(2 * D // 3, D, size=3)
    V[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = 1.0
    S = render_silhouette(V, p, case.intrinsics(), size=case.image_size)
    if case.binary:
        return (S >= 0.5).astype(float)
    return degrade_silhouette(S, blur_radius=case.blur_radius)


def _case_pose(case: GradcheckCase, rng) -> Pose:
    return Pose(rng.uniform(-0.5, 0.5), rng.uniform(-np.pi, np.pi), rng.uniform(-0.3, 0.3),
                rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(2.4, 2.8))


def _cells(K, p, X, shape):
    u, v, _, valid = project_points(K, pose_to_transform(p, K), X)
    fp = _footprint(u, v, shape)
    return valid & fp.inside, fp.x0, fp.y0


def pose_finite_difference(S, p: Pose, K, D, weights, step, max_halvings=30):
    """Central differences of ``sum(weights * H_p)`` w.r.t. each pose entry.

    The step is shrunk until no voxel changes bilinear cell (or crosses the image
    border) between ``p - h`` and ``p + h``, so every difference is taken on a
    smooth piece of the piecewise-bilinear lookup.
    """
    X = voxel_centers(D).reshape(-1, 3)
    base = p.as_vector()
    grad = np.zeros(6)
    for i in range(6):
        h = step
        for _ in range(max_halvings):
            e = np.zeros(6)
            e[i] = h
            pp, pm = Pose.from_vector(base + e), Pose.from_vector(base - e)
            ca, cb = _cells(K, pp, X, S.shape), _cells(K, pm, X, S.shape)
            if all(np.array_equal(a, b) for a, b in zip(ca, cb)):
                break
            h /= 2
        lp = float(np.sum(weights * psvh_forward(S, pp, K, D)))
        lm = float(np.sum(weights * psvh_forward(S, pm, K, D)))
        grad[i] = (lp - lm) / (2 * h)
    return grad


def gradcheck(case: GradcheckCase | None = None, seed=0) -> GradcheckReport:
    """Compare analytic PSVH gradients against central finite differences.

    ``case.path == "pose"`` checks ``dL/dp`` of ``psvh_backward_exact``;
    ``"silhouette"`` checks ``dL/dS``. Binary silhouettes are reported as
    ineligible for the pose check (their bilinear lookup is piecewise constant
    almost everywhere).
    """
    case = case or GradcheckCase()
    rng = np.random.default_rng(seed)
    K = case.intrinsics()
    p = _case_pose(case, rng)
    S = _case_silhouette(case, p, rng)
    w = rng.uniform(0.0, 1.0, size=(case.D,) * 3)
    _, dp = psvh_backward_exact(w, S, p, K)

    if case.path == "pose":
        if is_binary(S):
            return GradcheckReport("pose", eligible=False,
                                   reason="binary silhouette: pose gradient is zero almost everywhere; blur it first",
                                   tolerance=case.pose_tol)
        num = pose_finite_difference(S, p, K, case.D, w, case.pose_step)
        rel = relative_errors(dp, num)
        rows = [(POSE_PARAMS[i], dp[i], num[i], rel[i]) for i in range(6)]
        return GradcheckReport("pose", True, rows=rows, max_rel_error={"pose": float(rel.max())},
                               tolerance=case.pose_tol)

    if case.path == "silhouette":
        dS, _ = psvh_backward_exact(w, S, p, K)
        h = case.silhouette_step
        num = np.zeros_like(S)
        for idx in np.ndindex(S.shape):
            Sp = S.copy()
            Sp[idx] += h
            Sm = S.copy()
            Sm[idx] -= h
            num[idx] = (np.sum(w * psvh_forward(Sp, p, K, case.D))
                        - np.sum(w * psvh_forward(Sm, p, K, case.D))) / (2 * h)
        rel = relative_errors(dS, num)
        rows = [(f"S[{r},{c}]", dS[r, c], num[r, c], rel[r, c]) for r, c in zip(*np.nonzero((dS != 0) | (num != 0)))]
        return GradcheckReport("silhouette", True, rows=rows, max_rel_error={"silhouette": float(rel.max())},
                               tolerance=case.silhouette_tol)

    raise ValueError(f"unknown gradcheck path {case.path!r}")
