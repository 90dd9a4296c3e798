"""Perspective camera, 6-D pose parametrization and their analytic Jacobians.

Conventions used throughout the package:

* Camera frame: x right, y down, z forward (optical axis).
* A pixel with column ``c`` and row ``r`` has its center at ``(u, v) = (c + 0.5, r + 0.5)``.
* Rotations are built as ``R = Rz(theta3) @ Ry(theta2) @ Rx(theta1)``.
* A pose is ``[theta1, theta2, theta3, tu, tv, tz]``; the metric translation is
  ``t = [tu * tz / f, tv * tz / f, tz]``, so the object origin always lands on
  pixel ``(u0 + tu, v0 + tv)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

#: Camera-frame depth at or below which a point counts as behind the camera.
MIN_DEPTH = 1e-8


class BehindCameraError(ValueError):
    """Raised when a point does not lie in front of the camera."""


@dataclass(frozen=True)
class CameraIntrinsics:
    f: float
    u0: float
    v0: float

    def __post_init__(self):
        if not np.isfinite(self.f) or self.f <= 0:
            raise ValueError(f"focal length must be positive and finite, got {self.f}")
        if not (np.isfinite(self.u0) and np.isfinite(self.v0)):
            raise ValueError("principal point must be finite")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.f, 0.0, self.u0], [0.0, self.f, self.v0], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"f": float(self.f), "u0": float(self.u0), "v0": float(self.v0)}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(f=float(d["f"]), u0=float(d["u0"]), v0=float(d["v0"]))


@dataclass(frozen=True)
class Pose:
    """6-D object pose: three Euler angles (radians), image offsets (pixels), depth."""

    theta1: float
    theta2: float
    theta3: float
    tu: float
    tv: float
    tz: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.as_vector())):
            raise ValueError("pose entries must be finite")
        if self.tz <= 0:
            raise ValueError(f"tz must be positive, got {self.tz}")

    def as_vector(self) -> np.ndarray:
        return np.array([self.theta1, self.theta2, self.theta3, self.tu, self.tv, self.tz], dtype=float)

    @property
    def angles(self) -> np.ndarray:
        return np.array([self.theta1, self.theta2, self.theta3], dtype=float)

    @classmethod
    def from_vector(cls, p) -> "Pose":
        p = np.asarray(p, dtype=float).reshape(6)
        return cls(*(float(x) for x in p))

    def to_dict(self) -> dict:
        return {
            "theta": [float(self.theta1), float(self.theta2), float(self.theta3)],
            "tu": float(self.tu),
            "tv": float(self.tv),
            "tz": float(self.tz),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        theta = d["theta"]
        if len(theta) != 3:
            raise ValueError("pose 'theta' must hold three angles")
        return cls(float(theta[0]), float(theta[1]), float(theta[2]),
                   float(d["tu"]), float(d["tv"]), float(d["tz"]))


@dataclass(frozen=True)
class RigidTransform:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if R.shape != (3, 3):
            raise ValueError("R must be 3x3")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("R is not a proper rotation")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    def apply(self, X) -> np.ndarray:
        """Map object-frame points (..., 3) to the camera frame."""
        return np.asarray(X, dtype=float) @ self.R.T + self.t


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _drx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])


def _dry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])


def _drz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def euler_to_rotation(theta1: float, theta2: float, theta3: float) -> np.ndarray:
    """Rotation matrix ``Rz(theta3) @ Ry(theta2) @ Rx(theta1)``."""
    return _rz(theta3) @ _ry(theta2) @ _rx(theta1)


def euler_rotation_derivatives(theta1, theta2, theta3):
    """Return ``(R, [dR/dtheta1, dR/dtheta2, dR/dtheta3])``."""
    rx, ry, rz = _rx(theta1), _ry(theta2), _rz(theta3)
    dR = [rz @ ry @ _drx(theta1), rz @ _dry(theta2) @ rx, _drz(theta3) @ ry @ rx]
    return rz @ ry @ rx, dR


def rotation_to_euler(R) -> np.ndarray:
    """Inverse of :func:`euler_to_rotation` (theta2 in [-pi/2, pi/2])."""
    R = np.asarray(R, dtype=float)
    theta2 = -np.arcsin(np.clip(R[2, 0], -1.0, 1.0))
    if abs(np.cos(theta2)) > 1e-9:
        theta1 = np.arctan2(R[2, 1], R[2, 2])
        theta3 = np.arctan2(R[1, 0], R[0, 0])
    else:
        # gimbal lock: only theta1 - theta3 (or theta1 + theta3) is determined
        theta3 = 0.0
        theta1 = np.arctan2(-R[1, 2], R[1, 1])
    return np.array([theta1, theta2, theta3])


def pose_to_transform(p: Pose, K: CameraIntrinsics) -> RigidTransform:
    if p.tz <= 0:
        raise ValueError("tz must be positive")
    R = euler_to_rotation(p.theta1, p.theta2, p.theta3)
    t = np.array([p.tu * p.tz / K.f, p.tv * p.tz / K.f, p.tz])
    return RigidTransform(R, t)


def transform_to_pose(T: RigidTransform, K: CameraIntrinsics) -> Pose:
    th = rotation_to_euler(T.R)
    tz = float(T.t[2])
    return Pose(th[0], th[1], th[2], T.t[0] * K.f / tz, T.t[1] * K.f / tz, tz)


def camera_to_pixel(K: CameraIntrinsics, Pc):
    """Pinhole projection of camera-frame points (..., 3) to ``(u, v)``."""
    Pc = np.asarray(Pc, dtype=float)
    z = Pc[..., 2]
    return K.f * Pc[..., 0] / z + K.u0, K.f * Pc[..., 1] / z + K.v0


def project_point(K: CameraIntrinsics, T: RigidTransform, X):
    """Project one object-frame point; returns ``(u, v, Zc)``.

    Raises :class:`BehindCameraError` when the camera-frame depth is at most
    ``MIN_DEPTH``.
    """
    Pc = T.apply(np.asarray(X, dtype=float).reshape(3))
    if Pc[2] <= MIN_DEPTH:
        raise BehindCameraError(f"point at depth {Pc[2]:.3g} is behind the camera")
    u, v = camera_to_pixel(K, Pc)
    return float(u), float(v), float(Pc[2])


def project_points(K: CameraIntrinsics, T: RigidTransform, X):
    """Vectorized projection of (N, 3) points.

    Returns ``(u, v, zc, valid)``; entries with ``valid == False`` lie behind
    the camera and their ``u, v`` are set to NaN.
    """
    Pc = T.apply(np.asarray(X, dtype=float).reshape(-1, 3))
    zc = Pc[:, 2]
    valid = zc > MIN_DEPTH
    safe = np.where(valid, zc, 1.0)
    u = np.where(valid, K.f * Pc[:, 0] / safe + K.u0, np.nan)
    v = np.where(valid, K.f * Pc[:, 1] / safe + K.v0, np.nan)
    return u, v, zc, valid


def camera_points_pose_jacobian(K: CameraIntrinsics, p: Pose, X) -> tuple[np.ndarray, np.ndarray]:
    """Camera-frame points ``P = R X + t`` (N, 3) and ``dP/dp`` (N, 3, 6)."""
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    R, dR = euler_rotation_derivatives(p.theta1, p.theta2, p.theta3)
    t = np.array([p.tu * p.tz / K.f, p.tv * p.tz / K.f, p.tz])
    P = X @ R.T + t
    J = np.zeros((X.shape[0], 3, 6))
    for i in range(3):
        J[:, :, i] = X @ dR[i].T
    J[:, 0, 3] = p.tz / K.f
    J[:, 1, 4] = p.tz / K.f
    J[:, :, 5] = [p.tu / K.f, p.tv / K.f, 1.0]
    return P, J


def projection_pose_jacobians(K: CameraIntrinsics, p: Pose, X):
    """Vectorized ``d(u, v)/dp`` for (N, 3) points.

    Returns ``(u, v, J, valid)`` with ``J`` of shape (N, 2, 6); rows for points
    behind the camera are zero.
    """
    P, dP = camera_points_pose_jacobian(K, p, X)
    z = P[:, 2]
    valid = z > MIN_DEPTH
    z = np.where(valid, z, 1.0)
    u = K.f * P[:, 0] / z + K.u0
    v = K.f * P[:, 1] / z + K.v0
    J = np.empty((P.shape[0], 2, 6))
    z2 = (z * z)[:, None]
    J[:, 0, :] = K.f * (dP[:, 0, :] * z[:, None] - P[:, 0, None] * dP[:, 2, :]) / z2
    J[:, 1, :] = K.f * (dP[:, 1, :] * z[:, None] - P[:, 1, None] * dP[:, 2, :]) / z2
    J[~valid] = 0.0
    u[~valid] = np.nan
    v[~valid] = np.nan
    return u, v, J, valid


def projection_pose_jacobian(K: CameraIntrinsics, p: Pose, X) -> np.ndarray:
    """Analytic 2x6 Jacobian of the pixel coordinates of ``X`` w.r.t. the pose vector."""
    _, _, J, valid = projection_pose_jacobians(K, p, np.asarray(X, dtype=float).reshape(1, 3))
    if not valid[0]:
        raise BehindCameraError("point is behind the camera")
    return J[0]


def rotation_error(R1, R2) -> float:
    """Geodesic angle between two rotations, in degrees."""
    R1 = np.asarray(R1, dtype=float)
    R2 = np.asarray(R2, dtype=float)
    c = (np.trace(R1.T @ R2) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def translation_error(t_est, t_gt) -> float:
    """Translation error in percent of the ground-truth translation norm."""
    t_est = np.asarray(t_est, dtype=float)
    t_gt = np.asarray(t_gt, dtype=float)
    norm = np.linalg.norm(t_gt)
    if norm == 0:
        raise ValueError("ground-truth translation must be nonzero")
    return float(100.0 * np.linalg.norm(t_est - t_gt) / norm)


def pose_errors(p_est: Pose, p_gt: Pose, K: CameraIntrinsics) -> tuple[float, float]:
    """(rotation error in degrees, translation error in percent)."""
    Te, Tg = pose_to_transform(p_est, K), pose_to_transform(p_gt, K)
    return rotation_error(Te.R, Tg.R), translation_error(Te.t, Tg.t)


DEFAULT_AZIMUTH = (0.0, 2.0 * np.pi)
DEFAULT_ELEVATION = (-np.pi / 6, np.pi / 6)
DEFAULT_ROLL = (0.0, 0.0)
DEFAULT_DISTANCE = (2.4, 2.8)
DEFAULT_OFFSET = (-4.0, 4.0)


def _check_range(name, r, positive=False):
    lo, hi = float(r[0]), float(r[1])
    if not (np.isfinite(lo) and np.isfinite(hi)) or hi < lo:
        raise ValueError(f"invalid {name} range {r}")
    if positive and lo <= 0:
        raise ValueError(f"{name} range must be positive, got {r}")
    return lo, hi


def random_pose(seed, azimuth=DEFAULT_AZIMUTH, elevation=DEFAULT_ELEVATION, distance=DEFAULT_DISTANCE,
                roll=DEFAULT_ROLL, offset=DEFAULT_OFFSET) -> Pose:
    """Draw a pose: theta1 from ``elevation``, theta2 from ``azimuth``, theta3 from
    ``roll``, tz from ``distance`` and tu, tv from ``offset`` (pixels).

    With the default ranges and the default 150 px camera the whole unit cube
    projects inside a 128x128 image.
    """
    rng = np.random.default_rng(seed)
    az = _check_range("azimuth", azimuth)
    el = _check_range("elevation", elevation)
    ro = _check_range("roll", roll)
    di = _check_range("distance", distance, positive=True)
    of = _check_range("offset", offset)
    return Pose(
        theta1=rng.uniform(*el),
        theta2=rng.uniform(*az),
        theta3=rng.uniform(*ro),
        tu=rng.uniform(*of),
        tv=rng.uniform(*of),
        tz=rng.uniform(*di),
    )
