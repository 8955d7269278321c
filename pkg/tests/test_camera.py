import numpy as np
import pytest

from stentsew.camera import (BehindCameraError, CameraIntrinsics, Feature, PointCloud,
                             backproject, cloud_from_depth, denormalize, load_depth,
                             normalize, pixel_grid, project, save_depth)


@pytest.fixture
def K():
    return CameraIntrinsics()


class TestIntrinsics:
    def test_defaults(self, K):
        assert (K.fx, K.fy, K.cu, K.cv, K.width, K.height) == (600, 600, 320, 240, 640, 480)
        assert np.allclose(K.matrix(), [[600, 0, 320], [0, 600, 240], [0, 0, 1]])

    @pytest.mark.parametrize("kw", [{"fx": 0}, {"fy": -1}, {"width": 0}])
    def test_rejects_bad_values(self, kw):
        with pytest.raises(ValueError):
            CameraIntrinsics(**kw)


class TestProjection:
    def test_known_point(self, K):
        assert np.allclose(project([0.1, -0.05, 0.5], K), [320 + 120, 240 - 60])

    def test_principal_ray(self, K):
        assert np.allclose(project([0.0, 0.0, 2.0], K), [320, 240])

    def test_behind_camera_raises(self, K):
        with pytest.raises(BehindCameraError):
            project([0.0, 0.0, -1.0], K)
        with pytest.raises(BehindCameraError):
            project([[0, 0, 1.0], [0, 0, 0.0]], K)

    def test_round_trip(self, K):
        rng = np.random.default_rng(1)
        X = np.c_[rng.uniform(-0.2, 0.2, (100, 2)), rng.uniform(0.2, 1.0, 100)]
        assert np.allclose(backproject(project(X, K), X[:, 2], K), X)

    def test_normalize_denormalize(self, K):
        m = np.array([[10.0, 470.0], [639.0, 0.0]])
        assert np.allclose(denormalize(normalize(m, K), K), m)

    def test_backproject_invalid_depth_is_nan(self, K):
        pts = backproject(np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]),
                          np.array([0.0, np.nan, 0.5]), K)
        assert np.all(np.isnan(pts[:2]))
        assert np.all(np.isfinite(pts[2]))


class TestDepthAndClouds:
    def test_pixel_grid(self, K):
        g = pixel_grid(K)
        assert g.shape == (480, 640, 2)
        assert tuple(g[5, 7]) == (7.0, 5.0)

    def test_cloud_from_flat_depth(self, K):
        depth = np.full((K.height, K.width), 0.5)
        depth[0, 0] = 0.0
        cloud = cloud_from_depth(depth, K)
        assert len(cloud) == K.width * K.height
        assert cloud.mask.sum() == K.width * K.height - 1
        assert np.allclose(cloud.valid_points[:, 2], 0.5)

    def test_cloud_shape_mismatch(self, K):
        with pytest.raises(ValueError):
            cloud_from_depth(np.ones((10, 10)), K)

    @pytest.mark.parametrize("name", ["d.csv", "d.raw"])
    def test_depth_io_round_trip(self, K, tmp_path, name):
        small = CameraIntrinsics(width=8, height=6, cu=4, cv=3)
        depth = np.random.default_rng(2).uniform(0.3, 0.6, (6, 8))
        save_depth(tmp_path / name, depth)
        back = load_depth(tmp_path / name, small)
        assert np.allclose(back, depth, rtol=1e-6)

    def test_raw_depth_size_check(self, tmp_path):
        np.zeros(5, dtype="<f4").tofile(tmp_path / "d.raw")
        with pytest.raises(ValueError):
            load_depth(tmp_path / "d.raw", CameraIntrinsics(width=4, height=4, cu=2, cv=2))

    def test_cloud_exports(self, tmp_path):
        pts = np.array([[0, 0, 1.0], [np.nan, np.nan, np.nan]])
        cloud = PointCloud(pts, np.array([True, False]), (1, 2))
        cloud.to_csv(tmp_path / "c.csv")
        cloud.to_ply(tmp_path / "c.ply")
        assert (tmp_path / "c.csv").read_text().splitlines()[0].startswith("x,y,z")
        ply = (tmp_path / "c.ply").read_text()
        assert ply.startswith("ply") and "element vertex 1" in ply


def test_feature_validity():
    assert Feature(0, (1.0, 2.0), 0.5).valid
    assert not Feature(0, (1.0, 2.0)).valid
    assert not Feature(0, (1.0, 2.0), -0.1).valid
