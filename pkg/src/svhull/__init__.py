"""Single-view probabilistic visual hulls on voxel grids.

Build a hull grid from a silhouette and a camera pose, refine coarse occupancy
grids with it, and push gradients from the hull back to the silhouette and the
pose.
"""

from .geometry import (
    BehindCameraError,
    CameraIntrinsics,
    Pose,
    RigidTransform,
    pose_errors,
    pose_to_transform,
    project_point,
    project_points,
    random_pose,
    rotation_error,
    translation_error,
)
from .psvh import gradcheck, psvh_backward_exact, psvh_forward, psvh_pose_grad_paper, spatial_gradient
from .refine import RefinerConfig, carve_refine, pose_fit, probability_maps, rnet_forward, rnet_train
from .silhouette import load_pgm, render_silhouette, save_pgm, silhouette_iou
from .voxelgrid import binarize, iou, load_grid, load_obj, save_grid, voxelize_solid

__version__ = "0.1.0"

__all__ = [
    "BehindCameraError", "CameraIntrinsics", "Pose", "RigidTransform", "pose_errors", "pose_to_transform",
    "project_point", "project_points", "random_pose", "rotation_error", "translation_error",
    "gradcheck", "psvh_backward_exact", "psvh_forward", "psvh_pose_grad_paper", "spatial_gradient",
    "RefinerConfig", "carve_refine", "pose_fit", "probability_maps", "rnet_forward", "rnet_train",
    "load_pgm", "render_silhouette", "save_pgm", "silhouette_iou",
    "binarize", "iou", "load_grid", "load_obj", "save_grid", "voxelize_solid",
]
