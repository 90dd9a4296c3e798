"""
Silhouettes and single-view hulls
=================================

Render a synthetic chair-like shape, lift its silhouette back into a hull grid,
and see what a wrong pose does to it.

Run as a script or step through the ``# %%`` cells in an editor.
"""

# %%
import numpy as np

from svhull import Pose, psvh_forward, render_silhouette
from svhull.datagen import DEFAULT_INTRINSICS, make_shape, perturb_pose
from svhull.pipeline import containment, rotation_error_deg
from svhull.silhouette import degrade_silhouette, silhouette_iou
from svhull.voxelgrid import iou

K = DEFAULT_INTRINSICS
V = make_shape("chairoid")
pose = Pose(0.35, 0.8, 0.0, 3.0, -2.0, 2.6)
print("occupied voxels:", int(V.sum()), "of", V.size)

# %%
# The silhouette is the max of the grid along each pixel ray.
S = render_silhouette(V, pose, K)
print("silhouette shape", S.shape, "foreground pixels", int((S >= 0.5).sum()))
for row in S[::8, ::4]:
    print("".join("#" if s >= 0.5 else "." for s in row))

# %%
# Every voxel looks up the silhouette at its projection. Occupied voxels land
# inside the silhouette, so the hull contains the shape.
H, stats = psvh_forward(S, pose, K, return_stats=True)
print("containment", containment(H, V))
print("hull voxels", int((H >= 0.5).sum()), "IoU(hull, shape) %.3f" % iou(H, V, 0.5))
print("voxels projecting off the image:", stats["off_image_fraction"])

# %%
# A wrong pose moves the hull away from the shape.
for deg in (2, 5, 10, 20):
    wrong = perturb_pose(pose, seed=1, rot_deg_sigma=deg)
    print(f"rotation error {rotation_error_deg(wrong, pose):5.1f} deg  "
          f"containment {containment(psvh_forward(S, wrong, K), V):.3f}")

# %%
# A slightly larger silhouette buys some of that containment back.
wrong = perturb_pose(pose, seed=1, rot_deg_sigma=10)
for px in (0, 1, 2, 4):
    S_big = degrade_silhouette(S, dilate_px=px) if px else S
    print(f"dilate {px} px  silhouette IoU {silhouette_iou(S_big, S):.3f}  "
          f"containment {containment(psvh_forward(S_big, wrong, K), V):.3f}")

# %%
np.set_printoptions(precision=3)
print("hull slice through the seat (y = 15):")
print((H[:, 15, :] >= 0.5).astype(int)[::2, ::2])
