import numpy as np
import pytest
from scipy.spatial import ConvexHull

from svhull.geometry import CameraIntrinsics, Pose, pose_to_transform, project_points, random_pose
from svhull.psvh import psvh_forward
from svhull.silhouette import (
    PGMFormatError,
    degrade_silhouette,
    load_pgm,
    render_silhouette,
    save_pgm,
    silhouette_iou,
)

K = CameraIntrinsics(150.0, 64.0, 64.0)


def projected_polygon(lo, hi, pose):
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    u, v, _, _ = project_points(K, pose_to_transform(pose, K), corners)
    pts = np.stack([u, v], 1)
    return pts[ConvexHull(pts).vertices]


def pixel_centers(h=128, w=128):
    uu, vv = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    return np.stack([uu.ravel(), vv.ravel()], 1)


def inside_convex(poly, pts):
    # hull vertices come counter-clockwise
    inside = np.ones(len(pts), bool)
    for a, b in zip(poly, np.roll(poly, -1, axis=0)):
        e = b - a
        inside &= (e[0] * (pts[:, 1] - a[1]) - e[1] * (pts[:, 0] - a[0])) >= 0
    return inside


def dist_to_polygon_edges(poly, pts):
    d = np.full(len(pts), np.inf)
    for a, b in zip(poly, np.roll(poly, -1, axis=0)):
        ab = b - a
        t = np.clip(((pts - a) @ ab) / (ab @ ab), 0, 1)
        d = np.minimum(d, np.linalg.norm(pts - (a + t[:, None] * ab), axis=1))
    return d


class TestRender:
    def test_empty(self):
        S = render_silhouette(np.zeros((16, 16, 16)), Pose(0, 0, 0, 0, 0, 2.5), K)
        assert S.shape == (128, 128) and not S.any()

    @pytest.mark.parametrize("pose", [Pose(0, 0, 0, 0, 0, 2.6), Pose(0.4, 0.7, 0.1, 3, -2, 2.5)])
    def test_full_cube_footprint(self, pose):
        S = render_silhouette(np.ones((16, 16, 16)), pose, K)
        poly = projected_polygon([-0.5] * 3, [0.5] * 3, pose)
        pts = pixel_centers()
        inside = inside_convex(poly, pts)
        far = dist_to_polygon_edges(poly, pts) > 1.0
        fg = S.ravel() >= 0.5
        np.testing.assert_array_equal(fg[far], inside[far])
        # every projected hull corner sits on the silhouette boundary
        for cu, cv in poly:
            c, r = int(cu), int(cv)
            patch = fg.reshape(128, 128)[max(r - 2, 0):r + 3, max(c - 2, 0):c + 3]
            assert patch.any() and not patch.all()

    @pytest.mark.parametrize("seed", range(6))
    def test_box_area(self, seed):
        # trilinear max rendering rounds box edges off by a fraction of a voxel,
        # so the box spans most of the grid to keep that below the tolerance
        V = np.zeros((32, 32, 32))
        V[4:28, 6:26, 4:28] = 1.0
        lo = -0.5 + np.array([4, 6, 4]) / 32
        hi = -0.5 + np.array([28, 26, 28]) / 32
        pose = random_pose(seed)
        S = render_silhouette(V, pose, K)
        area = ConvexHull(projected_polygon(lo, hi, pose)).volume
        assert abs(np.count_nonzero(S >= 0.5) - area) / area < 0.03

    def test_monotone_in_occupancy(self):
        rng = np.random.default_rng(0)
        V = (rng.random((12, 12, 12)) > 0.85).astype(float)
        W = np.maximum(V, (rng.random((12, 12, 12)) > 0.9).astype(float))
        pose = Pose(0.2, 1.0, -0.1, 0, 0, 2.5)
        assert np.all(render_silhouette(W, pose, K) >= render_silhouette(V, pose, K) - 1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_hull_contains_shape(self, seed):
        rng = np.random.default_rng(seed)
        V = np.zeros((32, 32, 32))
        for _ in range(4):
            lo = rng.integers(0, 24, 3)
            hi = lo + rng.integers(2, 10, 3)
            V[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = 1.0
        pose = Pose(*rng.uniform(-1, 1, 3), *rng.uniform(-4, 4, 2), rng.uniform(2.4, 2.8))
        H = psvh_forward(render_silhouette(V, pose, K), pose, K)
        assert np.mean(H[V == 1] >= 0.5) >= 0.99


class TestSilhouetteIoU:
    def test_identical(self):
        S = np.random.default_rng(0).random((16, 16))
        assert silhouette_iou(S, S) == 1.0

    def test_complement(self):
        S = (np.random.default_rng(1).random((16, 16)) > 0.5).astype(float)
        assert silhouette_iou(S, 1 - S) == 0.0

    def test_counted_overlap(self):
        A = np.zeros((10, 10))
        B = np.zeros((10, 10))
        A[:, :5] = 1
        B[:5, :] = 1
        assert silhouette_iou(A, B) == pytest.approx(25 / 75)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            silhouette_iou(np.zeros((10, 10)), np.zeros((10, 12)))


def disk(r, n=64):
    yy, xx = np.mgrid[:n, :n]
    return ((xx - n / 2 + 0.5) ** 2 + (yy - n / 2 + 0.5) ** 2 <= r * r).astype(float)


class TestDegrade:
    def test_zero_params_identity(self):
        S = np.random.default_rng(0).random((20, 20))
        np.testing.assert_array_equal(degrade_silhouette(S, seed=5), S)

    def test_dilate_single_pixel(self):
        S = np.zeros((9, 9))
        S[4, 4] = 1
        out = degrade_silhouette(S, dilate_px=1)
        expected = np.zeros((9, 9))
        expected[3:6, 3:6] = 1
        np.testing.assert_array_equal(out, expected)

    def test_iou_drops_with_dilation(self):
        S = disk(15)
        scores = [silhouette_iou(S, degrade_silhouette(S, dilate_px=d)) for d in (1, 2, 3, 4)]
        assert scores[0] < 1
        assert all(a > b for a, b in zip(scores, scores[1:]))

    def test_flips_deterministic_and_bounded(self):
        S = disk(10)
        a = degrade_silhouette(S, seed=3, blur_radius=1, flip_rate=0.1)
        b = degrade_silhouette(S, seed=3, blur_radius=1, flip_rate=0.1)
        np.testing.assert_array_equal(a, b)
        assert a.min() >= 0 and a.max() <= 1
        assert not np.array_equal(a, degrade_silhouette(S, seed=4, blur_radius=1, flip_rate=0.1))

    def test_erode_undoes_dilate_on_disk(self):
        S = disk(12)
        np.testing.assert_array_equal(degrade_silhouette(S, dilate_px=2, erode_px=2), S)


class TestPGM:
    def test_binary_roundtrip(self, tmp_path):
        S = disk(20, 128)
        save_pgm(tmp_path / "m.pgm", S)
        np.testing.assert_array_equal(load_pgm(tmp_path / "m.pgm"), S)

    def test_header(self, tmp_path):
        save_pgm(tmp_path / "h.pgm", np.zeros((128, 128)))
        data = (tmp_path / "h.pgm").read_bytes()
        assert data.split()[:4] == [b"P5", b"128", b"128", b"255"]
        assert len(data) == len(b"P5\n128 128\n255\n") + 128 * 128

    def test_gray_rounding(self, tmp_path):
        save_pgm(tmp_path / "g.pgm", np.full((8, 8), 0.5))
        data = (tmp_path / "g.pgm").read_bytes()
        assert data[-1] == 128
        assert load_pgm(tmp_path / "g.pgm")[0, 0] == 128 / 255

    def test_roundtrip_within_one_level(self, tmp_path):
        S = np.random.default_rng(0).random((10, 14))
        save_pgm(tmp_path / "r.pgm", S)
        T = load_pgm(tmp_path / "r.pgm")
        assert T.shape == (10, 14)
        assert np.abs(T - S).max() <= 0.5 / 255 + 1e-12

    def test_malformed(self, tmp_path):
        (tmp_path / "bad.pgm").write_bytes(b"P2\n8 8\n255\n" + bytes(64))
        with pytest.raises(PGMFormatError):
            load_pgm(tmp_path / "bad.pgm")
        (tmp_path / "short.pgm").write_bytes(b"P5\n8 8\n255\n" + bytes(10))
        with pytest.raises(PGMFormatError):
            load_pgm(tmp_path / "short.pgm")
