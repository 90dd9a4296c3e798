import json

import numpy as np
import pytest
from scipy import ndimage

from svhull.datagen import (
    DEFAULT_INTRINSICS,
    SHAPE_KINDS,
    NoiseSpec,
    corrupt_voxels,
    dataset_digest,
    jitter_shape_params,
    load_dataset,
    make_dataset,
    make_sample,
    make_shape,
    perturb_pose,
    random_shape_params,
    split_shapes,
    thin_components,
)
from svhull.geometry import CameraIntrinsics, Pose, euler_to_rotation, random_pose, rotation_error
from svhull.psvh import psvh_forward
from svhull.silhouette import quantize, render_silhouette
from svhull.voxelgrid import iou

SMALL_K = CameraIntrinsics(75.0, 32.0, 32.0)


class TestShapes:
    def test_box_count(self):
        assert make_shape("box", {"size": (0.5, 0.5, 0.5)}, 32).sum() == 16 ** 3

    def test_chairoid_legs(self):
        prm = {"width": 16, "depth": 14, "seat_y": 14, "seat_thick": 3, "leg": 2, "leg_height": 9,
               "back_height": 10, "back_thick": 3}
        V = make_shape("chairoid", prm, 32)
        # the legs are everything below the seat slab
        below = V[:, 14 + 3:, :]
        assert below.sum() == 4 * 2 * 2 * 9
        _, n = ndimage.label(below, structure=ndimage.generate_binary_structure(3, 1))
        assert n == 4

    def test_sphere_zero_radius(self):
        assert not make_shape("sphere", {"radius": 0.0}, 16).any()

    @pytest.mark.parametrize("kind", SHAPE_KINDS)
    def test_random_params_fit_and_connected(self, kind):
        rng = np.random.default_rng(0)
        for _ in range(10):
            V = make_shape(kind, random_shape_params(kind, rng))
            assert V.any() and set(np.unique(V)) <= {0.0, 1.0}
            _, n = ndimage.label(V, structure=ndimage.generate_binary_structure(3, 1))
            assert n == 1
            make_shape(kind, jitter_shape_params(kind, random_shape_params(kind, rng), rng, 0.3))

    def test_out_of_cube(self):
        with pytest.raises(ValueError):
            make_shape("box", {"size": (0.8, 0.8, 0.8), "center": (0.2, 0, 0)})
        with pytest.raises(ValueError):
            make_shape("sphere", {"radius": 0.6})
        with pytest.raises(ValueError):
            make_shape("teapot")


class TestCorrupt:
    @pytest.fixture
    def chair(self):
        return make_shape("chairoid")

    def test_identity(self, chair):
        np.testing.assert_array_equal(corrupt_voxels(chair, seed=3), chair)

    def test_drop_removes_a_leg(self, chair):
        _, n_legs, _ = thin_components(chair)
        assert n_legs == 4
        V = corrupt_voxels(chair, seed=1, drop_components=1)
        _, n_after, _ = thin_components(V)
        assert n_after == 3
        assert iou(V, chair) < 1

    @pytest.mark.parametrize("kw", [dict(drop_components=2), dict(blur=1), dict(noise_sigma=0.2),
                                    dict(spurious=2), dict(blur=1, noise_sigma=0.1, drop_components=1)])
    def test_range_and_iou_below_one(self, chair, kw):
        V = corrupt_voxels(chair, seed=5, **kw)
        assert V.min() >= 0 and V.max() <= 1
        assert iou(V, chair) < 1

    def test_deterministic(self, chair):
        a = corrupt_voxels(chair, 9, 1, 1, 0.1, spurious=3)
        np.testing.assert_array_equal(a, corrupt_voxels(chair, 9, 1, 1, 0.1, spurious=3))

    def test_negative_params(self, chair):
        with pytest.raises(ValueError):
            corrupt_voxels(chair, blur=-1)


class TestPerturbPose:
    def test_zero_sigma(self):
        p = random_pose(0)
        assert perturb_pose(p, 4) == p

    def test_rotation_error_statistics(self):
        # zero middle angle keeps the three perturbation axes orthogonal
        p = Pose(0.3, 0.0, -0.2, 0, 0, 2.5)
        R = euler_to_rotation(*p.angles)
        sigma = 2.0
        errs = [rotation_error(R, euler_to_rotation(*perturb_pose(p, s, rot_deg_sigma=sigma).angles))
                for s in range(1000)]
        mean = float(np.mean(errs))
        assert abs(mean - 1.25 * sigma) <= 0.3 * 1.25 * sigma
        # small angles compose like a 3-D Gaussian vector; its mean norm is 2*sqrt(2/pi)*sigma
        assert mean == pytest.approx(2 * np.sqrt(2 / np.pi) * sigma, rel=0.05)

    def test_depth_stays_positive(self):
        p = Pose(0, 0, 0, 0, 0, 0.05)
        for s in range(200):
            assert perturb_pose(p, s, trans_sigma=0.05).tz > 0

    def test_translation_units(self):
        p = Pose(0, 0, 0, 10, -5, 2.0)
        q = perturb_pose(p, 0, trans_sigma=1e-9, K=DEFAULT_INTRINSICS)
        assert (q.tu, q.tv, q.tz) == pytest.approx((10, -5, 2.0), abs=1e-6)

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            perturb_pose(random_pose(0), 0, rot_deg_sigma=-1)


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    samples, manifest = make_dataset(5, 2, K=SMALL_K, seed=3, out_dir=out, D=16, size=(64, 64))
    return out, samples, manifest


class TestDataset:
    def test_same_seed_same_bytes(self, small, tmp_path):
        out, _, _ = small
        make_dataset(5, 2, K=SMALL_K, seed=3, out_dir=tmp_path, D=16, size=(64, 64))
        assert (tmp_path / "manifest.json").read_bytes() == (out / "manifest.json").read_bytes()
        assert dataset_digest(tmp_path) == dataset_digest(out)

    def test_other_seed_differs(self, small, tmp_path):
        out, _, _ = small
        make_dataset(5, 2, K=SMALL_K, seed=4, out_dir=tmp_path, D=16, size=(64, 64))
        assert dataset_digest(tmp_path) != dataset_digest(out)

    def test_layout(self, small):
        out, samples, manifest = small
        on_disk = json.loads((out / "manifest.json").read_text())
        assert on_disk == json.loads(json.dumps(manifest))
        for e in on_disk["samples"]:
            for key in ("vgt", "vcoarse", "sil", "pose"):
                assert (out / e[key]).is_file()
        assert len(on_disk["samples"]) == 10

    def test_rerender_invariant(self, small):
        out, samples, manifest = small
        for s in samples:
            np.testing.assert_array_equal(s.S_gt, render_silhouette(s.V_gt, s.pose_gt, SMALL_K, (64, 64)))
        loaded, _ = load_dataset(out)
        K = CameraIntrinsics.from_dict(manifest["intrinsics"])
        for s in loaded:
            S = render_silhouette(s.V_gt, s.pose_gt, K, tuple(manifest["image_size"]))
            np.testing.assert_array_equal(quantize(S), quantize(s.S_gt))

    def test_split_disjoint(self):
        split = split_shapes(50, seed=0)
        train = {s for s, v in split.items() if v == "train"}
        test = {s for s, v in split.items() if v == "test"}
        assert not train & test and len(train) == 40 and len(test) == 10

    def test_split_by_shape(self, small):
        _, samples, _ = small
        by_shape = {}
        for s in samples:
            by_shape.setdefault(s.shape_id, set()).add(s.split)
        assert all(len(v) == 1 for v in by_shape.values())

    def test_hull_contains_gt(self):
        for sid in range(5):
            s = make_sample(11, sid, 0)
            H = psvh_forward(s.S_gt, s.pose_gt, DEFAULT_INTRINSICS)
            assert np.mean(H[s.V_gt > 0.5] >= 0.5) >= 0.99

    def test_noise_spec_keys(self):
        assert NoiseSpec.from_dict({"rot_deg_sigma": 10.0}).rot_deg_sigma == 10.0
        with pytest.raises(ValueError):
            NoiseSpec.from_dict({"rotation": 1.0})

    def test_bad_counts(self):
        with pytest.raises(ValueError):
            make_dataset(0)

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            make_dataset(1, 1, K=SMALL_K, out_dir=blocker / "sub", D=8, size=(64, 64))
