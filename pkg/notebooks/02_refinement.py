"""
Refining a coarse shape with its hull
=====================================

Coarse shapes are corrupted copies of the truth: jittered proportions, missing
thin parts, blur, noise and stray blobs. The hull says where the object cannot
be. Carving uses that directly and a small residual network learns how to use it.

Training takes a couple of minutes on one CPU core.
"""

# %%
import time

import numpy as np

from svhull.datagen import make_dataset
from svhull.pipeline import aggregate_rows, evaluate_samples, make_triples, split_samples
from svhull.refine import RefinerConfig, carve_refine, evaluate_refiner, rnet_train
from svhull.voxelgrid import iou

samples, manifest = make_dataset(40, 2, seed=5)
train, test = split_samples(samples)
print(len(train), "training samples,", len(test), "held-out samples")

# %%
# Carving with the true hull can only remove wrong voxels.
s = test[0]
gt = make_triples([s], "gt")[0][1]
noisy = make_triples([s], "noisy")[0][1]
print(f"{s.sample_id} ({s.kind}) coarse IoU {iou(s.V_coarse, s.V_gt):.3f}")
print(f"  carved with true hull      {iou(carve_refine(s.V_coarse, gt), s.V_gt):.3f}")
print(f"  carved with estimated hull {iou(carve_refine(s.V_coarse, noisy), s.V_gt):.3f}")

# %%
# The learned refiner also fills in what carving cannot: missing legs and
# eroded parts inside the hull.
t = time.perf_counter()
config = RefinerConfig(lr=1e-3, epochs=6)
result = rnet_train(make_triples(train, "noisy"), config, holdout=make_triples(test, "noisy"))
for row in result.log:
    print(f"epoch {row['epoch']}  loss {row['loss']:.4f}  held-out IoU "
          f"{row['holdout_iou_coarse']:.3f} -> {row['holdout_iou_refined']:.3f}")
print(f"{time.perf_counter() - t:.0f}s")

# %%
for mode in ("gt", "noisy", "const"):
    before, after = evaluate_refiner(result.params, make_triples(test, mode))
    print(f"hull {mode:5s}  IoU {before:.3f} -> {after:.3f}")

# %%
# Worse pose estimates give worse hulls and smaller gains.
rows = evaluate_samples(test, result.params, include_estimate=False)
for row in aggregate_rows(rows):
    print(f"{row['noise_bucket']:6s} n={row['n']:3d}  gain {row['iou_gain']:+.3f}  "
          f"rotation error {row['rotation_error']:.1f} deg")
print("median coarse IoU", np.median([r["iou_coarse"] for r in rows]).round(3))
