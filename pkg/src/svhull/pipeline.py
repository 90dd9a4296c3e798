"""Glue shared by the command line and the experiment scripts: hulls for a
sample under different pose/silhouette sources, training triples, and the
evaluation rows with their noise buckets."""

from __future__ import annotations

import numpy as np

from .datagen import DEFAULT_INTRINSICS, Sample, perturb_pose, sample_rng
from .geometry import CameraIntrinsics, Pose, pose_errors, pose_to_transform, rotation_error
from .psvh import psvh_forward
from .refine import carve_refine, rnet_forward
from .silhouette import silhouette_iou
from .voxelgrid import DEFAULT_TAU, iou

HULL_MODES = ("gt", "noisy", "const")
ROTATION_BUCKETS = (0.0, 5.0, 10.0, 20.0)

EVAL_COLUMNS = ("sample_id", "split", "kind", "noise_bucket", "rot_sigma_deg", "iou_coarse", "iou_refined",
                "iou_gain", "rotation_error", "translation_error", "silhouette_iou")
AGGREGATE_COLUMNS = ("noise_bucket", "n", "iou_coarse", "iou_refined", "iou_gain", "rotation_error",
                     "translation_error", "silhouette_iou")


def sample_hull(sample: Sample, mode="gt", K: CameraIntrinsics = DEFAULT_INTRINSICS):
    """``gt``: true silhouette and pose; ``noisy``: the sample's estimates;
    ``const``: an uninformative all-ones grid."""
    D = sample.V_gt.shape[0]
    if mode == "gt":
        return psvh_forward(sample.S_gt, sample.pose_gt, K, D)
    if mode == "noisy":
        return psvh_forward(sample.S_est, sample.pose_est, K, D)
    if mode == "const":
        return np.ones((D, D, D))
    raise ValueError(f"unknown hull mode {mode!r}; expected one of {HULL_MODES}")


def make_triples(samples, mode="gt", K=DEFAULT_INTRINSICS):
    return [(s.V_coarse, sample_hull(s, mode, K), s.V_gt) for s in samples]


def split_samples(samples):
    train = [s for s in samples if s.split == "train"]
    test = [s for s in samples if s.split == "test"]
    return train, test


def bucket_pose(sample: Sample, rot_sigma_deg, seed=0, K=DEFAULT_INTRINSICS):
    """The true pose with rotation noise of ``rot_sigma_deg`` (per Euler angle);
    the draw depends only on ``(seed, sample, sigma)``."""
    if rot_sigma_deg == 0:
        return sample.pose_gt
    rng = sample_rng(seed, sample.shape_id, sample.view_id, 100 + int(round(rot_sigma_deg * 10)))
    return perturb_pose(sample.pose_gt, int(rng.integers(2 ** 63)), rot_sigma_deg, 0.0, K)


def refine_grid(V, H, params=None):
    """Learned refinement when ``params`` is given, hull carving otherwise."""
    return rnet_forward(params, V, H) if params is not None else carve_refine(V, H)


def evaluate_samples(samples, params=None, K=DEFAULT_INTRINSICS, buckets=ROTATION_BUCKETS, seed=0,
                     include_estimate=True, tau=DEFAULT_TAU):
    """One row per (sample, noise bucket).

    The ``est`` bucket uses the sample's stored pose and silhouette estimates;
    ``rotNN`` buckets perturb the true pose by ``NN`` degrees and pair it with the
    estimated silhouette.
    """
    rows = []
    for s in samples:
        D = s.V_gt.shape[0]
        coarse = iou(s.V_coarse, s.V_gt, tau)
        sil = silhouette_iou(s.S_est, s.S_gt)
        runs = []
        if include_estimate:
            runs.append(("est", float("nan"), s.pose_est))
        for b in buckets:
            runs.append((f"rot{int(round(b)):02d}", float(b), bucket_pose(s, b, seed, K)))
        for label, sigma, pose in runs:
            H = psvh_forward(s.S_est, pose, K, D)
            refined = iou(refine_grid(s.V_coarse, H, params), s.V_gt, tau)
            errs = pose_errors(pose, s.pose_gt, K)
            rows.append({
                "sample_id": s.sample_id, "split": s.split, "kind": s.kind, "noise_bucket": label,
                "rot_sigma_deg": sigma, "iou_coarse": coarse, "iou_refined": refined,
                "iou_gain": refined - coarse, "rotation_error": errs[0], "translation_error": errs[1],
                "silhouette_iou": sil,
            })
    return rows


def aggregate_rows(rows):
    """Mean of every numeric column per noise bucket, plus an ``all`` row."""
    labels = list(dict.fromkeys(r["noise_bucket"] for r in rows))
    out = []
    for label in labels + ["all"]:
        sel = [r for r in rows if label == "all" or r["noise_bucket"] == label]
        if not sel:
            continue
        row = {"noise_bucket": label, "n": len(sel)}
        for col in AGGREGATE_COLUMNS[2:]:
            row[col] = float(np.mean([r[col] for r in sel]))
        out.append(row)
    return out


def containment(H, V_gt, h_tau=0.5):
    """Fraction of occupied ground-truth voxels whose hull value is ``>= h_tau``."""
    occ = np.asarray(V_gt) >= 0.5
    if not occ.any():
        return 1.0
    return float(np.mean(np.asarray(H)[occ] >= h_tau))


def rotation_error_deg(p_est: Pose, p_gt: Pose) -> float:
    K = DEFAULT_INTRINSICS
    return rotation_error(pose_to_transform(p_est, K).R, pose_to_transform(p_gt, K).R)
