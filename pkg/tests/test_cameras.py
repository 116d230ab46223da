"""Pinhole projection, backprojection, bilinear sampling, rig JSON."""

import numpy as np
import pytest

from splat4d.cameras import (
    CameraRig,
    CameraView,
    backproject,
    bilinear_sample,
    load_rig,
    project,
    save_rig,
)


def identity_camera(fx=100.0, fy=100.0, cx=32.0, cy=32.0, w=64, h=64):
    return CameraView(
        fx=fx, fy=fy, cx=cx, cy=cy, width=w, height=h,
        rotation=np.eye(3), translation=np.zeros(3),
    )


def random_camera(rng, w=64, h=64):
    # random rotation via QR of a Gaussian matrix, det fixed to +1
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return CameraView(
        fx=float(rng.uniform(40, 200)),
        fy=float(rng.uniform(40, 200)),
        cx=float(rng.uniform(20, 44)),
        cy=float(rng.uniform(20, 44)),
        width=w, height=h,
        rotation=q,
        translation=rng.standard_normal(3),
    )


class TestProject:
    def test_point_on_optical_axis_hits_principal_point(self):
        cam = identity_camera(cx=31.5, cy=30.0)
        px, z = project(cam, np.array([[0.0, 0.0, 2.0]]))
        assert np.allclose(px[0], [31.5, 30.0])
        assert z[0] == 2.0

    def test_unit_lateral_offset_moves_fx_over_z_pixels(self):
        cam = identity_camera(fx=100.0, cx=32.0)
        px, _ = project(cam, np.array([[1.0, 0.0, 2.0]]))
        assert np.allclose(px[0, 0], 32.0 + 100.0 / 2.0)

    def test_depth_is_camera_frame_z(self):
        rng = np.random.default_rng(3)
        cam = random_camera(rng)
        pts = rng.standard_normal((10, 3)) * 2.0
        _, z = project(cam, pts)
        expected = (pts @ cam.rotation.T + cam.translation)[:, 2]
        assert np.allclose(z, expected)

    def test_point_behind_camera_has_negative_depth(self):
        cam = identity_camera()
        _, z = project(cam, np.array([[0.0, 0.0, -1.0]]))
        assert z[0] < 0


class TestBackproject:
    def test_round_trip_identity(self):
        # project(backproject(p, d)) == (p, d) for random pixels and depths
        rng = np.random.default_rng(11)
        for _ in range(20):
            cam = random_camera(rng)
            px = np.stack(
                [rng.uniform(0, cam.width - 1, 50), rng.uniform(0, cam.height - 1, 50)],
                axis=1,
            )
            d = rng.uniform(0.5, 8.0, 50)
            pts = backproject(cam, px, d)
            px2, d2 = project(cam, pts)
            assert np.allclose(px2, px, atol=1e-9)
            assert np.allclose(d2, d, atol=1e-11)

    def test_reverse_round_trip_on_world_points(self):
        rng = np.random.default_rng(12)
        cam = random_camera(rng)
        pts = rng.standard_normal((40, 3))
        pts = pts[(pts @ cam.rotation.T + cam.translation)[:, 2] > 0.1]
        px, d = project(cam, pts)
        back = backproject(cam, px, d)
        assert np.allclose(back, pts, atol=1e-10)

    def test_length_mismatch_raises(self):
        cam = identity_camera()
        with pytest.raises(ValueError):
            backproject(cam, np.zeros((3, 2)), np.zeros(2))


class TestBilinearSample:
    def test_midpoint_between_two_texels(self):
        grid = np.array([[0.0, 1.0], [0.0, 1.0]])
        val, ok = bilinear_sample(grid, np.array([[0.5, 0.0]]))
        assert ok[0] and val[0] == pytest.approx(0.5)

    def test_constant_map_everywhere(self):
        grid = np.full((5, 7), 5.0)
        rng = np.random.default_rng(0)
        px = np.stack([rng.uniform(0, 6, 30), rng.uniform(0, 4, 30)], axis=1)
        val, ok = bilinear_sample(grid, px)
        assert ok.all()
        assert np.allclose(val, 5.0)

    def test_out_of_bounds_is_invalid(self):
        grid = np.ones((4, 4))
        val, ok = bilinear_sample(grid, np.array([[-0.5, 0.0], [0.0, 3.01], [3.5, 1.0]]))
        assert not ok.any()
        assert np.isnan(val).all()

    def test_exact_border_positions_are_valid(self):
        grid = np.arange(16, dtype=float).reshape(4, 4)
        val, ok = bilinear_sample(grid, np.array([[3.0, 3.0], [0.0, 0.0]]))
        assert ok.all()
        assert val[0] == 15.0 and val[1] == 0.0

    def test_nan_tap_invalidates_strict_sample(self):
        grid = np.ones((4, 4))
        grid[1, 2] = np.nan
        val, ok = bilinear_sample(grid, np.array([[1.5, 1.0], [0.5, 2.5]]))
        assert not ok[0]  # touches the NaN texel
        assert ok[1] and val[1] == 1.0

    def test_tap_mask_renormalizes(self):
        grid = np.array([[1.0, 3.0], [1.0, 3.0]])
        keep = np.array([[True, False], [True, False]])
        val, ok = bilinear_sample(grid, np.array([[0.5, 0.5]]), tap_valid=keep)
        assert ok[0] and val[0] == pytest.approx(1.0)

    def test_all_taps_masked_is_invalid(self):
        grid = np.ones((2, 2))
        keep = np.zeros((2, 2), dtype=bool)
        _, ok = bilinear_sample(grid, np.array([[0.5, 0.5]]), tap_valid=keep)
        assert not ok[0]

    def test_channel_maps(self):
        grid = np.zeros((2, 2, 3))
        grid[:, 1, :] = [1.0, 2.0, 3.0]
        val, ok = bilinear_sample(grid, np.array([[0.5, 0.5]]))
        assert ok[0]
        assert np.allclose(val[0], [0.5, 1.0, 1.5])

    def test_agrees_with_manual_interpolation(self):
        rng = np.random.default_rng(5)
        grid = rng.standard_normal((8, 9))
        px = np.stack([rng.uniform(0, 7.999, 100), rng.uniform(0, 6.999, 100)], axis=1)
        val, ok = bilinear_sample(grid, px)
        assert ok.all()
        for (u, v), got in zip(px, val):
            u0, v0 = int(u), int(v)
            fu, fv = u - u0, v - v0
            want = (
                grid[v0, u0] * (1 - fu) * (1 - fv)
                + grid[v0, u0 + 1] * fu * (1 - fv)
                + grid[v0 + 1, u0] * (1 - fu) * fv
                + grid[v0 + 1, u0 + 1] * fu * fv
            )
            assert got == pytest.approx(want, abs=1e-12)


class TestCameraValidation:
    def test_rejects_non_orthonormal_rotation(self):
        bad = np.eye(3)
        bad[0, 1] = 1e-6
        with pytest.raises(ValueError, match="orthonormal"):
            CameraView(fx=50, fy=50, cx=16, cy=16, width=32, height=32,
                       rotation=bad, translation=np.zeros(3))

    def test_rejects_nonpositive_focal(self):
        with pytest.raises(ValueError, match="focal"):
            CameraView(fx=0.0, fy=50, cx=16, cy=16, width=32, height=32,
                       rotation=np.eye(3), translation=np.zeros(3))


class TestRig:
    def make_views(self, n_frames=3, n_views=2):
        views = []
        for t in range(n_frames):
            for n in range(n_views):
                views.append(CameraView(
                    fx=100.0, fy=100.0, cx=32.0, cy=32.0, width=64, height=64,
                    rotation=np.eye(3),
                    translation=np.array([0.3 * n, 0.0, 0.0]),
                    view_index=n, frame_index=t,
                ))
        return views

    def test_grid_accessor(self):
        rig = CameraRig(self.make_views())
        assert rig.num_frames == 3 and rig.num_views == 2
        v = rig.view(2, 1)
        assert v.frame_index == 2 and v.view_index == 1

    def test_missing_slot_rejected(self):
        views = self.make_views()
        with pytest.raises(ValueError, match="incomplete"):
            CameraRig(views[:-1])

    def test_duplicate_slot_rejected(self):
        views = self.make_views()
        views.append(views[0])
        with pytest.raises(ValueError, match="duplicate"):
            CameraRig(views)

    def test_intrinsics_must_be_constant_per_view(self):
        views = self.make_views()
        v = views[-1]
        views[-1] = CameraView(
            fx=v.fx + 1.0, fy=v.fy, cx=v.cx, cy=v.cy, width=v.width, height=v.height,
            rotation=v.rotation, translation=v.translation,
            view_index=v.view_index, frame_index=v.frame_index,
        )
        with pytest.raises(ValueError, match="intrinsics"):
            CameraRig(views)

    def test_frame_time_normalization(self):
        rig = CameraRig(self.make_views(n_frames=5))
        assert rig.frame_time(0) == 0.0
        assert rig.frame_time(4) == 1.0
        assert rig.frame_time(2) == pytest.approx(0.5)

    def test_single_frame_maps_to_zero(self):
        rig = CameraRig(self.make_views(n_frames=1))
        assert rig.frame_time(0) == 0.0

    def test_json_round_trip(self, tmp_path):
        views = self.make_views()
        path = str(tmp_path / "rig.json")
        save_rig(path, views)
        rig = load_rig(path)
        assert rig.num_frames == 3 and rig.num_views == 2
        for orig in views:
            got = rig.view(orig.frame_index, orig.view_index)
            assert np.array_equal(got.rotation, orig.rotation)
            assert np.array_equal(got.translation, orig.translation)
            assert got.fx == orig.fx

    def test_malformed_entry_reports_missing_keys(self, tmp_path):
        path = str(tmp_path / "rig.json")
        with open(path, "w") as f:
            f.write('[{"view": 0, "frame": 0, "fx": 10.0}]')
        with pytest.raises(ValueError, match="missing keys"):
            load_rig(path)
