from __future__ import annotations

import numpy as np
import pytest

from hairdistill.geomcore import (AngleMap, CameraPose, GridSpec, ImageBuffer, camera_rays, grid_points,
                                  read_pnm, view_overlap, write_pnm)
from hairdistill.teacher import TeacherLatent


class TestCameraRays:
    def test_center_ray_points_at_origin(self):
        pose = CameraPose(0.0, 0.0, 2.0, np.deg2rad(40), 3, 3)
        rays = camera_rays(pose)
        centre = rays.directions[4]
        expected = -pose.position / np.linalg.norm(pose.position)
        np.testing.assert_allclose(centre, expected, atol=1e-12)
        np.testing.assert_allclose(pose.position, [0, 0, 2], atol=1e-12)

    def test_unit_directions(self):
        pose = CameraPose(0.7, -0.4, 1.8, np.deg2rad(55), 17, 11)
        d = camera_rays(pose).directions
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-9)

    def test_row_major_order(self):
        pose = CameraPose(0.0, 0.0, 2.0, np.deg2rad(40), 4, 3)
        d = camera_rays(pose).directions
        assert len(d) == 12
        # first row looks up, first column looks left (camera right is -x at azimuth 0)
        assert d[0, 1] > 0 and d[-1, 1] < 0
        assert d[0, 0] < d[3, 0]

    def test_periodic_in_azimuth(self):
        a = camera_rays(CameraPose(0.3, 0.2, 2.0))
        b = camera_rays(CameraPose(0.3 + 2 * np.pi, 0.2, 2.0))
        np.testing.assert_allclose(a.directions, b.directions, atol=1e-9)
        np.testing.assert_allclose(a.origins, b.origins, atol=1e-9)

    def test_deterministic(self):
        pose = CameraPose(1.1, 0.5)
        a, b = camera_rays(pose), camera_rays(pose)
        assert np.array_equal(a.directions, b.directions)

    def test_project_inverts_rays(self):
        pose = CameraPose(0.4, 0.3, 2.0, np.deg2rad(40), 8, 6)
        rays = camera_rays(pose)
        pts = rays.origins + 1.3 * rays.directions
        col, row, z = pose.project(pts)
        rr, cc = np.divmod(np.arange(48), 8)
        np.testing.assert_allclose(col, cc, atol=1e-9)
        np.testing.assert_allclose(row, rr, atol=1e-9)

    def test_top_view_is_well_defined(self):
        pose = CameraPose(0.0, np.pi / 2, 2.0)
        R = pose.rotation
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)

    @pytest.mark.parametrize("kw", [{"radius": 0.0}, {"fov": np.pi}, {"width": 0}])
    def test_invalid_pose(self, kw):
        with pytest.raises(ValueError):
            CameraPose(0.0, 0.0, **kw)


class TestGridPoints:
    def test_resolution_two_gives_corners(self):
        pts = grid_points(GridSpec(2))
        assert len(pts) == 8
        assert set(map(tuple, np.abs(pts))) == {(0.75, 0.75, 0.75)}

    def test_middle_point_is_origin(self):
        pts = grid_points(GridSpec(3))
        np.testing.assert_array_equal(pts[13], [0.0, 0.0, 0.0])

    def test_resolution_512_counts(self):
        spec = GridSpec(512)
        assert spec.num_points == 134_217_728
        np.testing.assert_allclose(spec.spacing, 1.5 / 511, rtol=1e-15)

    def test_uniform_spacing(self):
        for ax in GridSpec(37).axes():
            np.testing.assert_allclose(np.diff(ax), 1.5 / 36, atol=1e-12)

    def test_index_round_trip(self):
        spec = GridSpec(9)
        x = np.array([[0.1, -0.2, 0.7]])
        np.testing.assert_allclose(spec.to_world(spec.to_index(x)), x, atol=1e-15)

    def test_invalid(self):
        with pytest.raises(ValueError):
            GridSpec(1)


class TestViewOverlap:
    sphere = TeacherLatent()

    def test_identical_poses(self):
        pose = CameraPose(0.2, 0.1, 2.0, np.deg2rad(40), 32, 32)
        assert view_overlap(pose, pose, self.sphere) == 1.0

    def test_opposite_poses(self):
        a = CameraPose(0.0, 0.0, 2.0, np.deg2rad(40), 32, 32)
        b = CameraPose(np.pi, 0.0, 2.0, np.deg2rad(40), 32, 32)
        assert view_overlap(a, b, self.sphere) <= 0.1

    def test_ten_degrees(self):
        a = CameraPose(0.0, 0.0, 2.0, np.deg2rad(40), 32, 32)
        b = CameraPose(np.deg2rad(10), 0.0, 2.0, np.deg2rad(40), 32, 32)
        assert view_overlap(a, b, self.sphere) >= 0.7

    def test_no_surface_seen(self):
        # a 2x2 image whose pixel rays all pass beside a tiny head
        a = CameraPose(0.0, 0.0, 2.0, np.deg2rad(20), 2, 2)
        tiny = TeacherLatent(head_radii=(0.01, 0.01, 0.01), shell_thickness=0.001)
        assert view_overlap(a, a, tiny) == 0.0


class TestImageIO:
    def test_pnm_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        img = np.round(rng.random((5, 7, 3)) * 255) / 255
        write_pnm(tmp_path / "a.ppm", img)
        np.testing.assert_array_equal(read_pnm(tmp_path / "a.ppm"), img)
        gray = np.round(rng.random((4, 3)) * 255) / 255
        ImageBuffer(gray).save(tmp_path / "g.pgm")
        np.testing.assert_array_equal(ImageBuffer.load(tmp_path / "g.pgm").values[..., 0], gray)

    def test_angle_map_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        am = AngleMap(rng.random((6, 6)) * np.pi, rng.random((6, 6)) * 0.8)
        am.save(tmp_path / "o")
        back = AngleMap.load(tmp_path / "o")
        np.testing.assert_allclose(back.angle, am.angle, atol=np.pi / 255)
        np.testing.assert_allclose(back.confidence, am.confidence, atol=0.8 / 255)

    def test_angle_map_wraps(self):
        am = AngleMap(np.array([[np.pi, -0.5, 7.0]]), np.ones((1, 3)))
        assert np.all((am.angle >= 0) & (am.angle < np.pi))

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            ImageBuffer(np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            AngleMap(np.zeros((2, 2)), np.zeros((3, 2)))
