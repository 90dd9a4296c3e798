"""Occupancy grids over the canonical cube [-0.5, 0.5]^3.

A grid is a ``(D, D, D)`` float array indexed ``V[i, j, k]`` with ``i`` along x,
``j`` along y and ``k`` along z. On disk the values are written with x varying
fastest (Fortran order of the array).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_DIM = 32
DEFAULT_TAU = 0.4

GRID_MAGIC = b"PSVH"
GRID_VERSION = 1
_HEADER = struct.Struct("<4sBI")


class GridFormatError(ValueError):
    pass


class ObjParseError(ValueError):
    def __init__(self, msg, lineno):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


def check_grid(V, name="grid") -> np.ndarray:
    V = np.asarray(V)
    if V.ndim != 3 or len(set(V.shape)) != 1:
        raise ValueError(f"{name} must be a cubic 3-D array, got shape {V.shape}")
    if V.shape[0] < 2:
        raise ValueError(f"{name} needs at least 2 voxels per side")
    return V


def empty_grid(D=DEFAULT_DIM, dtype=np.float64) -> np.ndarray:
    return np.zeros((D, D, D), dtype=dtype)


def voxel_center(idx, D) -> np.ndarray:
    idx = np.asarray(idx)
    if idx.shape != (3,) or np.any(idx < 0) or np.any(idx >= D):
        raise IndexError(f"voxel index {tuple(idx)} out of range for D={D}")
    return -0.5 + (idx + 0.5) / D


def voxel_centers(D) -> np.ndarray:
    """All voxel centers as a ``(D, D, D, 3)`` array."""
    c = -0.5 + (np.arange(D) + 0.5) / D
    return np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)


def binarize(V, tau=DEFAULT_TAU) -> np.ndarray:
    """1.0 where ``V >= tau``, else 0.0."""
    return (np.asarray(V) >= tau).astype(np.float64)


def iou(A, B, tau=DEFAULT_TAU) -> float:
    """Volumetric IoU after binarizing both grids at ``tau`` (1.0 if both are empty)."""
    A = check_grid(A, "A")
    B = check_grid(B, "B")
    if A.shape != B.shape:
        raise ValueError(f"dimension mismatch: {A.shape} vs {B.shape}")
    a = np.asarray(A) >= tau
    b = np.asarray(B) >= tau
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def trilinear_sample(V, points) -> np.ndarray:
    """Sample a grid at object-frame points (..., 3); coordinates are clamped to
    the outermost voxel centers."""
    V = np.asarray(V)
    D = V.shape[0]
    g = (np.asarray(points, dtype=float) + 0.5) * D - 0.5
    g = np.clip(g, 0.0, D - 1)
    i0 = np.minimum(np.floor(g).astype(np.intp), D - 2)
    f = g - i0
    x0, y0, z0 = i0[..., 0], i0[..., 1], i0[..., 2]
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    out = np.zeros(g.shape[:-1])
    for dx in (0, 1):
        wx = fx if dx else 1.0 - fx
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            for dz in (0, 1):
                wz = fz if dz else 1.0 - fz
                out += wx * wy * wz * V[x0 + dx, y0 + dy, z0 + dz]
    return out


def save_grid(path, V):
    V = check_grid(V)
    D = V.shape[0]
    payload = np.asarray(V, dtype="<f4").ravel(order="F").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(GRID_MAGIC, GRID_VERSION, D))
        fh.write(payload)


def load_grid(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise GridFormatError("file too short for grid header")
    magic, version, D = _HEADER.unpack_from(data)
    if magic != GRID_MAGIC:
        raise GridFormatError(f"bad magic {magic!r}")
    if version != GRID_VERSION:
        raise GridFormatError(f"unsupported grid version {version}")
    if D < 2:
        raise GridFormatError(f"invalid grid dimension {D}")
    expected = 4 * D ** 3
    body = data[_HEADER.size:]
    if len(body) != expected:
        raise GridFormatError(f"payload has {len(body)} bytes, expected {expected}")
    vals = np.frombuffer(body, dtype="<f4").astype(np.float64)
    return vals.reshape((D, D, D), order="F")


@dataclass
class Mesh:
    vertices: np.ndarray  # (N, 3) float
    triangles: np.ndarray  # (M, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.intp).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")


def load_obj(path) -> Mesh:
    """Read ``v`` and ``f`` records of an ASCII OBJ file; polygons are fan-triangulated."""
    verts = []
    tris = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split("#", 1)[0].split()
            if not parts:
                continue
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise ObjParseError("vertex needs three coordinates", lineno)
                try:
                    verts.append([float(x) for x in parts[1:4]])
                except ValueError:
                    raise ObjParseError(f"bad vertex coordinate in {line.strip()!r}", lineno) from None
            elif tag == "f":
                if len(parts) < 4:
                    raise ObjParseError("face needs at least three vertices", lineno)
                idx = []
                for tok in parts[1:]:
                    try:
                        k = int(tok.split("/")[0])
                    except ValueError:
                        raise ObjParseError(f"bad face index {tok!r}", lineno) from None
                    if k == 0:
                        raise ObjParseError("face index 0 is invalid", lineno)
                    k = k - 1 if k > 0 else len(verts) + k
                    if not 0 <= k < len(verts):
                        raise ObjParseError(f"face index {tok} out of range", lineno)
                    idx.append(k)
                for a in range(1, len(idx) - 1):
                    tris.append([idx[0], idx[a], idx[a + 1]])
    return Mesh(np.array(verts, dtype=float).reshape(-1, 3), np.array(tris, dtype=np.intp).reshape(-1, 3))


def write_obj(path, mesh: Mesh):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]!r} {v[1]!r} {v[2]!r}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


# ray origins are nudged off the voxel-center lattice so rays never graze edges
_RAY_JITTER = (1e-7, 1.3e-7)


def voxelize_solid(mesh: Mesh, D=DEFAULT_DIM, chunk=4096) -> np.ndarray:
    """Binary occupancy of a closed mesh sampled at voxel centers.

    A center is inside when a ray cast from it along +x crosses the surface an
    odd number of times.
    """
    if len(mesh.triangles) == 0:
        raise ValueError("mesh has no triangles")
    tri = mesh.vertices[mesh.triangles]  # (M, 3, 3)
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    # signed area of the yz projection; edge-on triangles never hit an x ray
    det = e1[:, 1] * e2[:, 2] - e1[:, 2] * e2[:, 1]
    keep = np.abs(det) > 1e-15
    if not np.any(keep):
        raise ValueError("mesh is degenerate")
    tri, e1, e2, det = tri[keep], e1[keep], e2[keep], det[keep]

    c = -0.5 + (np.arange(D) + 0.5) / D
    ry = c + _RAY_JITTER[0]
    rz = c + _RAY_JITTER[1]
    ymin, ymax = tri[:, :, 1].min(1), tri[:, :, 1].max(1)
    zmin, zmax = tri[:, :, 2].min(1), tri[:, :, 2].max(1)

    # crossings[j, k, b]: number of surface hits on ray (j, k) with exactly b centers below the hit
    crossings = np.zeros((D, D, D + 1), dtype=np.int64)
    for s in range(0, len(tri), chunk):
        sl = slice(s, s + chunk)
        jlo = np.searchsorted(ry, ymin[sl], side="left")
        jhi = np.searchsorted(ry, ymax[sl], side="right")
        klo = np.searchsorted(rz, zmin[sl], side="left")
        khi = np.searchsorted(rz, zmax[sl], side="right")
        for m in np.nonzero((jhi > jlo) & (khi > klo))[0]:
            t = s + m
            J, Kk = np.meshgrid(np.arange(jlo[m], jhi[m]), np.arange(klo[m], khi[m]), indexing="ij")
            py = ry[J] - tri[t, 0, 1]
            pz = rz[Kk] - tri[t, 0, 2]
            a = (py * e2[t, 2] - pz * e2[t, 1]) / det[t]
            b = (e1[t, 1] * pz - e1[t, 2] * py) / det[t]
            hit = (a >= 0) & (b >= 0) & (a + b <= 1)
            if not np.any(hit):
                continue
            xh = tri[t, 0, 0] + a[hit] * e1[t, 0] + b[hit] * e2[t, 0]
            nb = np.searchsorted(c, xh, side="left")
            np.add.at(crossings, (J[hit], Kk[hit], nb), 1)
    # hits above center i are those with bin > i
    above = np.cumsum(crossings[:, :, ::-1], axis=2)[:, :, ::-1][:, :, 1:]
    occ = (above % 2 == 1).astype(np.float64)  # occ[j, k, i]
    return np.ascontiguousarray(occ.transpose(2, 0, 1))


def box_mesh(lo, hi) -> Mesh:
    """Closed triangle mesh of an axis-aligned box."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    v = np.array([[hi[0] if (n >> 0) & 1 else lo[0], hi[1] if (n >> 1) & 1 else lo[1],
                   hi[2] if (n >> 2) & 1 else lo[2]] for n in range(8)])
    quads = [(0, 2, 3, 1), (4, 5, 7, 6), (0, 1, 5, 4), (2, 6, 7, 3), (0, 4, 6, 2), (1, 3, 7, 5)]
    tris = [t for q in quads for t in ((q[0], q[1], q[2]), (q[0], q[2], q[3]))]
    return Mesh(v, tris)


def sphere_mesh(radius, center=(0.0, 0.0, 0.0), n_lat=48, n_lon=96) -> Mesh:
    """Closed UV-sphere mesh."""
    center = np.asarray(center, dtype=float)
    verts = [center + [0.0, 0.0, radius]]
    for i in range(1, n_lat):
        th = np.pi * i / n_lat
        for j in range(n_lon):
            ph = 2 * np.pi * j / n_lon
            verts.append(center + radius * np.array([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)]))
    verts.append(center + [0.0, 0.0, -radius])
    bottom = len(verts) - 1
    tris = []

    def ring(i, j):
        return 1 + (i - 1) * n_lon + (j % n_lon)

    for j in range(n_lon):
        tris.append((0, ring(1, j), ring(1, j + 1)))
        tris.append((bottom, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)))
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b = ring(i, j), ring(i, j + 1)
            c_, d = ring(i + 1, j), ring(i + 1, j + 1)
            tris.append((a, c_, d))
            tris.append((a, d, b))
    return Mesh(np.array(verts), np.array(tris))
