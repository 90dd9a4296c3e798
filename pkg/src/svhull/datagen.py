"""Synthetic shapes, posed silhouettes, corrupted coarse grids and noisy
pose/silhouette estimates.

Shapes are built upright with "up" along -y of the object frame, so that at the
identity rotation they stand upright in the image (image v grows downwards).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import CameraIntrinsics, Pose, random_pose
from .silhouette import DEFAULT_SIZE, degrade_silhouette, render_silhouette, save_pgm
from .voxelgrid import DEFAULT_DIM, iou, save_grid, voxel_centers

SHAPE_KINDS = ("box", "sphere", "cylinder", "chairoid", "tabloid")

DEFAULT_INTRINSICS = CameraIntrinsics(f=150.0, u0=64.0, v0=64.0)


# ---------------------------------------------------------------------------
# shapes
# ---------------------------------------------------------------------------

def _centers_1d(D):
    return -0.5 + (np.arange(D) + 0.5) / D


def _box(D, lo, hi):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(lo < -0.5 - 1e-12) or np.any(hi > 0.5 + 1e-12) or np.any(hi < lo):
        raise ValueError(f"box [{lo}, {hi}] does not fit in the unit cube")
    c = _centers_1d(D)
    mx = (c >= lo[0]) & (c <= hi[0])
    my = (c >= lo[1]) & (c <= hi[1])
    mz = (c >= lo[2]) & (c <= hi[2])
    return (mx[:, None, None] & my[None, :, None] & mz[None, None, :]).astype(np.float64)


def _vbox(D, lo_idx, hi_idx):
    """Box covering voxels ``lo_idx <= idx < hi_idx`` (edges on voxel faces)."""
    lo = -0.5 + np.asarray(lo_idx, dtype=float) / D
    hi = -0.5 + np.asarray(hi_idx, dtype=float) / D
    return _box(D, lo, hi)


def _fits(center, extent):
    center = np.asarray(center, dtype=float)
    return np.all(np.abs(center) + np.asarray(extent, dtype=float) <= 0.5 + 1e-12)


DEFAULT_PARAMS = {
    "box": {"size": (0.5, 0.5, 0.5), "center": (0.0, 0.0, 0.0)},
    "sphere": {"radius": 0.4, "center": (0.0, 0.0, 0.0)},
    "cylinder": {"radius": 0.3, "height": 0.8, "center": (0.0, 0.0, 0.0)},
    # chairoid / tabloid parameters are in voxels of a 32-grid and scaled with D
    "chairoid": {"width": 16, "depth": 16, "seat_y": 16, "seat_thick": 3, "leg": 2, "leg_height": 10,
                 "back_height": 12, "back_thick": 3},
    "tabloid": {"width": 22, "depth": 16, "top_y": 10, "top_thick": 3, "leg": 2, "leg_height": 14},
}


def make_shape(kind, params=None, D=DEFAULT_DIM) -> np.ndarray:
    """Solid binary occupancy for a parametric shape.

    ``box``: ``size`` (full edge lengths), ``center``. ``sphere``: ``radius``,
    ``center``. ``cylinder``: vertical (y) axis, ``radius``, ``height``,
    ``center``. ``chairoid``: seat slab, four square legs below it and a back
    slab above its rear edge. ``tabloid``: top slab on four legs. Composite
    shapes take integer voxel sizes relative to a 32 grid and are snapped to
    voxel faces, so legs of ``leg=2`` are exactly two voxels thick at D=32.
    """
    if kind not in SHAPE_KINDS:
        raise ValueError(f"unknown shape kind {kind!r}")
    prm = dict(DEFAULT_PARAMS[kind])
    prm.update(params or {})
    if kind == "box":
        size = np.asarray(prm["size"], dtype=float)
        c = np.asarray(prm["center"], dtype=float)
        if np.any(size < 0) or not _fits(c, size / 2):
            raise ValueError("box does not fit in the unit cube")
        return _box(D, c - size / 2, c + size / 2)
    if kind == "sphere":
        r = float(prm["radius"])
        c = np.asarray(prm["center"], dtype=float)
        if r < 0 or not _fits(c, [r, r, r]):
            raise ValueError("sphere does not fit in the unit cube")
        X = voxel_centers(D)
        if r == 0:
            return np.zeros((D, D, D))
        return (np.sum((X - c) ** 2, axis=-1) <= r * r).astype(np.float64)
    if kind == "cylinder":
        r, hgt = float(prm["radius"]), float(prm["height"])
        c = np.asarray(prm["center"], dtype=float)
        if r < 0 or hgt < 0 or not _fits(c, [r, hgt / 2, r]):
            raise ValueError("cylinder does not fit in the unit cube")
        X = voxel_centers(D) - c
        return (((X[..., 0] ** 2 + X[..., 2] ** 2) <= r * r) & (np.abs(X[..., 1]) <= hgt / 2)).astype(np.float64)
    s = D / 32.0

    def q(name):
        return int(round(prm[name] * s))

    if kind == "chairoid":
        w, d, sy, st, leg, lh, bh, bt = (q(n) for n in ("width", "depth", "seat_y", "seat_thick", "leg",
                                                          "leg_height", "back_height", "back_thick"))
        x0 = (D - w) // 2
        z0 = (D - d) // 2
        if min(w, d, st, leg, bt) < 1 or sy - bh < 0 or sy + st + lh > D or x0 < 0 or z0 < 0 or 2 * leg > min(w, d):
            raise ValueError("chairoid parameters do not fit in the grid")
        V = _vbox(D, (x0, sy, z0), (x0 + w, sy + st, z0 + d))
        V = np.maximum(V, _vbox(D, (x0, sy - bh, z0 + d - bt), (x0 + w, sy, z0 + d)))
        for lx in (x0, x0 + w - leg):
            for lz in (z0, z0 + d - leg):
                V = np.maximum(V, _vbox(D, (lx, sy + st, lz), (lx + leg, sy + st + lh, lz + leg)))
        return V
    # tabloid
    w, d, ty, tt, leg, lh = (q(n) for n in ("width", "depth", "top_y", "top_thick", "leg", "leg_height"))
    x0 = (D - w) // 2
    z0 = (D - d) // 2
    if min(w, d, tt, leg) < 1 or ty < 0 or ty + tt + lh > D or x0 < 0 or z0 < 0 or 2 * leg > min(w, d):
        raise ValueError("tabloid parameters do not fit in the grid")
    V = _vbox(D, (x0, ty, z0), (x0 + w, ty + tt, z0 + d))
    for lx in (x0, x0 + w - leg):
        for lz in (z0, z0 + d - leg):
            V = np.maximum(V, _vbox(D, (lx, ty + tt, lz), (lx + leg, ty + tt + lh, lz + leg)))
    return V


def random_shape_params(kind, rng) -> dict:
    """Random parameters for ``kind`` that always fit in the cube."""
    if kind == "box":
        size = rng.uniform(0.25, 0.75, size=3)
        return {"size": tuple(size), "center": tuple(rng.uniform(-1, 1, 3) * (0.5 - size / 2) * 0.3)}
    if kind == "sphere":
        r = rng.uniform(0.2, 0.45)
        return {"radius": r, "center": tuple(rng.uniform(-1, 1, 3) * (0.5 - r) * 0.5)}
    if kind == "cylinder":
        r = rng.uniform(0.12, 0.35)
        h = rng.uniform(0.35, 0.9)
        return {"radius": r, "height": h, "center": (0.0, 0.0, 0.0)}
    if kind == "chairoid":
        sy = int(rng.integers(13, 18))
        st = int(rng.integers(3, 5))
        lh = int(rng.integers(6, 32 - sy - st - 1))
        return {"width": int(rng.integers(12, 22)), "depth": int(rng.integers(12, 20)), "seat_y": sy,
                "seat_thick": st, "leg": 2, "leg_height": lh,
                "back_height": int(rng.integers(6, sy - 1)), "back_thick": int(rng.integers(3, 5))}
    ty = int(rng.integers(6, 14))
    tt = int(rng.integers(3, 5))
    return {"width": int(rng.integers(14, 26)), "depth": int(rng.integers(12, 22)), "top_y": ty,
            "top_thick": tt, "leg": 2, "leg_height": int(rng.integers(8, 32 - ty - tt - 1))}


def jitter_shape_params(kind, params, rng, amount) -> dict:
    """Perturb shape parameters by a relative ``amount`` (a plausible but wrong
    instance of the same shape class); results still fit in the cube."""
    if amount <= 0:
        return dict(params)
    out = dict(params)
    if kind == "box":
        size = np.clip(np.asarray(params["size"]) * (1 + amount * rng.uniform(-1, 1, 3)), 0.1, 0.9)
        c = np.asarray(params["center"]) + amount * 0.2 * rng.uniform(-1, 1, 3)
        c = np.clip(c, -(0.5 - size / 2), 0.5 - size / 2)
        return {"size": tuple(size), "center": tuple(c)}
    if kind == "sphere":
        r = float(np.clip(params["radius"] * (1 + amount * rng.uniform(-1, 1)), 0.1, 0.48))
        c = np.clip(np.asarray(params["center"]) + amount * 0.2 * rng.uniform(-1, 1, 3), -(0.5 - r), 0.5 - r)
        return {"radius": r, "center": tuple(c)}
    if kind == "cylinder":
        r = float(np.clip(params["radius"] * (1 + amount * rng.uniform(-1, 1)), 0.08, 0.45))
        h = float(np.clip(params["height"] * (1 + amount * rng.uniform(-1, 1)), 0.2, 0.95))
        return {"radius": r, "height": h, "center": params["center"]}
    for key, lo, hi in _INT_RANGES[kind]:
        v = params[key] * (1 + amount * rng.uniform(-1, 1))
        out[key] = int(np.clip(round(v), lo, hi))
    # keep the composite inside the grid
    if kind == "chairoid":
        out["leg_height"] = int(min(out["leg_height"], 32 - out["seat_y"] - out["seat_thick"] - 1))
        out["back_height"] = int(min(out["back_height"], out["seat_y"] - 1))
    else:
        out["leg_height"] = int(min(out["leg_height"], 32 - out["top_y"] - out["top_thick"] - 1))
    return out


_INT_RANGES = {
    "chairoid": [("width", 8, 26), ("depth", 8, 24), ("seat_y", 10, 20), ("seat_thick", 2, 6),
                 ("leg_height", 4, 16), ("back_height", 4, 16), ("back_thick", 2, 6)],
    "tabloid": [("width", 10, 28), ("depth", 8, 26), ("top_y", 4, 16), ("top_thick", 2, 6),
                ("leg_height", 4, 22)],
}


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------

_SIX = ndimage.generate_binary_structure(3, 1)


def thin_components(V, size_threshold=None):
    """Label the thin parts of a binary grid: voxels removed by an opening with a
    3x3x3 cube, split into 6-connected components. Returns ``(labels, n, sizes)``;
    components above ``size_threshold`` voxels are discarded."""
    occ = np.asarray(V) >= 0.5
    opened = ndimage.binary_opening(occ, structure=np.ones((3, 3, 3), bool))
    labels, n = ndimage.label(occ & ~opened, structure=_SIX)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    if size_threshold is not None:
        for lab in np.nonzero(sizes > size_threshold)[0] + 1:
            labels[labels == lab] = 0
    keep = np.unique(labels[labels > 0])
    relabeled = np.zeros_like(labels)
    for new, old in enumerate(keep, start=1):
        relabeled[labels == old] = new
    return relabeled, len(keep), np.bincount(relabeled.ravel(), minlength=len(keep) + 1)[1:]


def corrupt_voxels(V_gt, seed=0, drop_components=0, blur=0, noise_sigma=0.0, size_threshold=400,
                   spurious=0, spurious_size=(3, 7)):
    """Coarse-prediction emulation: drop up to ``drop_components`` randomly chosen
    thin components (at most ``size_threshold`` voxels each), add ``spurious``
    solid boxes with edges drawn from ``spurious_size``, then a box blur of
    radius ``blur``, then additive Gaussian noise clamped to [0, 1]."""
    if drop_components < 0 or blur < 0 or noise_sigma < 0 or spurious < 0:
        raise ValueError("corruption parameters must be nonnegative")
    rng = np.random.default_rng(seed)
    V = np.array(V_gt, dtype=float)
    if drop_components:
        labels, n, _ = thin_components(V, size_threshold)
        if n:
            chosen = rng.choice(np.arange(1, n + 1), size=min(int(drop_components), n), replace=False)
            V[np.isin(labels, chosen)] = 0.0
    D = V.shape[0]
    lo_e, hi_e = int(spurious_size[0]), int(spurious_size[1])
    for _ in range(int(spurious)):
        edge = rng.integers(lo_e, hi_e + 1, size=3)
        lo = rng.integers(0, D - edge + 1)
        V[lo[0]:lo[0] + edge[0], lo[1]:lo[1] + edge[1], lo[2]:lo[2] + edge[2]] = 1.0
    if blur:
        V = ndimage.uniform_filter(V, size=2 * int(blur) + 1, mode="constant")
    if noise_sigma:
        V = V + rng.normal(0.0, noise_sigma, V.shape)
    return np.clip(V, 0.0, 1.0)


def perturb_pose(p: Pose, seed=0, rot_deg_sigma=0.0, trans_sigma=0.0, K: CameraIntrinsics = DEFAULT_INTRINSICS,
                 max_tries=100) -> Pose:
    """Gaussian noise on the Euler angles (sigma in degrees) and on the metric
    translation ``t`` (sigma in cube units); draws with ``tz <= 0`` are redrawn."""
    if rot_deg_sigma < 0 or trans_sigma < 0:
        raise ValueError("sigmas must be nonnegative")
    if rot_deg_sigma == 0 and trans_sigma == 0:
        return p
    rng = np.random.default_rng(seed)
    t = np.array([p.tu * p.tz / K.f, p.tv * p.tz / K.f, p.tz])
    for _ in range(max_tries):
        dth = np.radians(rng.normal(0.0, rot_deg_sigma, 3))
        t2 = t + rng.normal(0.0, trans_sigma, 3)
        if t2[2] > 0:
            break
    else:
        raise RuntimeError("could not draw a pose in front of the camera")
    th = p.angles + dth
    return Pose(th[0], th[1], th[2], t2[0] * K.f / t2[2], t2[1] * K.f / t2[2], t2[2])


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class NoiseSpec:
    # coarse shape
    shape_jitter: float = 0.15
    drop_components: int = 2
    coarse_blur: int = 1
    coarse_noise: float = 0.15
    spurious: int = 4
    # pose estimate
    rot_deg_sigma: float = 5.0
    trans_sigma: float = 0.02
    # silhouette estimate
    sil_blur: int = 0
    sil_dilate: int = 2
    sil_erode: int = 0
    sil_flip: float = 0.0

    @classmethod
    def from_dict(cls, d) -> "NoiseSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown noise keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Sample:
    sample_id: str
    shape_id: int
    view_id: int
    kind: str
    split: str
    V_gt: np.ndarray
    pose_gt: Pose
    S_gt: np.ndarray
    V_coarse: np.ndarray
    pose_est: Pose
    S_est: np.ndarray
    noise: dict = field(default_factory=dict)


def sample_rng(seed, shape_id, view_id=0, stream=0):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(shape_id), int(view_id), int(stream)]))


def split_shapes(n_shapes, seed, train_frac=0.8) -> dict:
    """Assign each shape id to 'train' or 'test' (``round(train_frac * n)`` train shapes)."""
    order = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC0FFEE])).permutation(n_shapes)
    n_train = int(round(train_frac * n_shapes)) if n_shapes > 1 else 1
    return {int(s): ("train" if r < n_train else "test") for r, s in enumerate(order)}


def make_sample(seed, shape_id, view_id, split="train", K=DEFAULT_INTRINSICS, noise: NoiseSpec | None = None,
                D=DEFAULT_DIM, size=DEFAULT_SIZE, kind=None) -> Sample:
    """Build one sample; all randomness is derived from (seed, shape_id, view_id)."""
    noise = noise or NoiseSpec()
    srng = sample_rng(seed, shape_id)
    kind = kind or SHAPE_KINDS[shape_id % len(SHAPE_KINDS)]
    params = random_shape_params(kind, srng)
    V_gt = make_shape(kind, params, D)
    vrng = sample_rng(seed, shape_id, view_id, 1)
    pose_gt = random_pose(vrng.integers(2 ** 63))
    S_gt = render_silhouette(V_gt, pose_gt, K, size)
    coarse_params = jitter_shape_params(kind, params, vrng, noise.shape_jitter)
    V_base = make_shape(kind, coarse_params, D)
    V_coarse = corrupt_voxels(V_base, int(vrng.integers(2 ** 63)), noise.drop_components, noise.coarse_blur,
                              noise.coarse_noise, spurious=noise.spurious)
    pose_est = perturb_pose(pose_gt, int(vrng.integers(2 ** 63)), noise.rot_deg_sigma, noise.trans_sigma, K)
    S_est = degrade_silhouette(S_gt, int(vrng.integers(2 ** 63)), noise.sil_blur, noise.sil_dilate,
                               noise.sil_erode, noise.sil_flip)
    meta = asdict(noise)
    meta["shape_params"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in params.items()}
    return Sample(f"s{shape_id:04d}_v{view_id:02d}", shape_id, view_id, kind, split, V_gt, pose_gt, S_gt,
                  V_coarse, pose_est, S_est, meta)


def make_dataset(n_shapes, views_per_shape=24, K=DEFAULT_INTRINSICS, seed=0, noise: NoiseSpec | None = None,
                 out_dir=None, D=DEFAULT_DIM, size=DEFAULT_SIZE):
    """Generate ``n_shapes * views_per_shape`` samples with an 80/20 train/test
    split by shape id. With ``out_dir`` every sample is written to disk together
    with ``manifest.json``. Returns ``(samples, manifest)``."""
    if n_shapes < 1 or views_per_shape < 1:
        raise ValueError("need at least one shape and one view")
    noise = noise or NoiseSpec()
    split = split_shapes(n_shapes, seed)
    samples = [make_sample(seed, s, v, split[s], K, noise, D, size)
               for s in range(n_shapes) for v in range(views_per_shape)]
    manifest = {
        "format": "psvh-dataset",
        "version": 1,
        "seed": int(seed),
        "grid_dim": int(D),
        "image_size": [int(size[0]), int(size[1])],
        "intrinsics": K.to_dict(),
        "noise": asdict(noise),
        "splits": {"train": sorted(s for s, v in split.items() if v == "train"),
                   "test": sorted(s for s, v in split.items() if v == "test")},
        "samples": [],
    }
    for smp in samples:
        entry = {
            "id": smp.sample_id, "shape_id": smp.shape_id, "view_id": smp.view_id, "kind": smp.kind,
            "split": smp.split,
            "vgt": f"{smp.sample_id}/vgt.grid", "vcoarse": f"{smp.sample_id}/vcoarse.grid",
            "sil": f"{smp.sample_id}/sil.pgm", "pose": f"{smp.sample_id}/pose.json",
            "sil_est": f"{smp.sample_id}/sil_est.pgm", "pose_est": f"{smp.sample_id}/pose_est.json",
            "noise": smp.noise,
        }
        manifest["samples"].append(entry)
    if out_dir is not None:
        write_dataset(out_dir, samples, manifest)
    return samples, manifest


def write_dataset(out_dir, samples, manifest):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for smp, entry in zip(samples, manifest["samples"]):
        (out / smp.sample_id).mkdir(exist_ok=True)
        save_grid(out / entry["vgt"], smp.V_gt)
        save_grid(out / entry["vcoarse"], smp.V_coarse)
        save_pgm(out / entry["sil"], smp.S_gt)
        save_pgm(out / entry["sil_est"], smp.S_est)
        (out / entry["pose"]).write_text(json.dumps(smp.pose_gt.to_dict(), sort_keys=True) + "\n")
        (out / entry["pose_est"]).write_text(json.dumps(smp.pose_est.to_dict(), sort_keys=True) + "\n")
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(root):
    """Read a dataset directory back into ``(samples, manifest)``.

    Silhouettes come back 8-bit quantized, grids as float32-rounded values.
    """
    from .silhouette import load_pgm
    from .voxelgrid import load_grid

    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    samples = []
    for e in manifest["samples"]:
        samples.append(Sample(
            e["id"], e["shape_id"], e["view_id"], e["kind"], e["split"],
            load_grid(root / e["vgt"]),
            Pose.from_dict(json.loads((root / e["pose"]).read_text())),
            load_pgm(root / e["sil"]),
            load_grid(root / e["vcoarse"]),
            Pose.from_dict(json.loads((root / e["pose_est"]).read_text())),
            load_pgm(root / e["sil_est"]),
            e.get("noise", {}),
        ))
    return samples, manifest


def dataset_digest(root) -> str:
    """SHA-256 over every file of a dataset directory (sorted relative paths)."""
    root = Path(root)
    h = hashlib.sha256()
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(root)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def coarse_iou(sample: Sample) -> float:
    return iou(sample.V_coarse, sample.V_gt)
