from __future__ import annotations

import numpy as np
import pytest

from hairdistill import render
from hairdistill.geomcore import CameraPose, camera_rays
from hairdistill.teacher import (TeacherLatent, UndefinedRegionError, features_to_vector, latent_features,
                                 surface_hits, teacher_normal, teacher_orientation, teacher_render,
                                 teacher_sdf, teacher_semantic)

BALD = TeacherLatent(hair_polar_extent=0.0)


class TestTeacherSdf:
    def test_sphere_values(self):
        lat = TeacherLatent(hair_polar_extent=0.0)
        assert teacher_sdf(np.zeros(3), lat) == pytest.approx(0.5)
        assert teacher_sdf(np.array([0.5, 0.0, 0.0]), lat) == pytest.approx(0.0, abs=1e-9)
        assert teacher_sdf(np.array([0.7, 0.0, 0.0]), lat) == pytest.approx(-0.2)

    def test_bald_sphere_matches_norm(self):
        x = np.random.default_rng(0).uniform(-0.75, 0.75, (2000, 3))
        np.testing.assert_allclose(teacher_sdf(x, BALD), 0.5 - np.linalg.norm(x, axis=1), atol=1e-15)

    def test_hairy_sphere_matches_union_distance(self):
        lat = TeacherLatent(hair_polar_extent=np.pi, shell_thickness=0.05)
        x = np.random.default_rng(1).uniform(-0.75, 0.75, (2000, 3))
        np.testing.assert_allclose(teacher_sdf(x, lat), 0.55 - np.linalg.norm(x, axis=1), atol=1e-12)

    def test_hair_cap_thickens_top_only(self):
        lat = TeacherLatent()
        assert teacher_sdf(np.array([0.0, 0.52, 0.0]), lat) > 0
        assert teacher_sdf(np.array([0.0, -0.52, 0.0]), lat) < 0

    def test_sign_convention_flip(self):
        lat = TeacherLatent()
        x = np.array([[0.1, 0.2, 0.0]])
        render.set_sdf_sign(-1)
        try:
            neg = teacher_sdf(x, lat)
        finally:
            render.set_sdf_sign(1)
        assert neg[0] == pytest.approx(-teacher_sdf(x, lat)[0])


class TestTeacherSemantic:
    lat = TeacherLatent()

    def test_poles(self):
        assert teacher_semantic(np.array([0.0, 0.5, 0.0]), self.lat)
        assert not teacher_semantic(np.array([0.0, -0.5, 0.0]), self.lat)

    def test_equator_inclusive(self):
        assert teacher_semantic(np.array([0.5, 0.0, 0.0]), self.lat)

    def test_bald(self):
        assert not teacher_semantic(np.array([0.0, 0.5, 0.0]), BALD)


class TestTeacherOrientation:
    def test_meridian_at_equator(self):
        o = teacher_orientation(np.array([[0.5, 0.0, 0.0]]), TeacherLatent())
        assert abs(abs(o[0] @ np.array([0.0, -1.0, 0.0])) - 1.0) < 1e-12

    def test_swirl_quarter_turn_is_azimuthal(self):
        x = np.array([[0.5, 0.0, 0.0]])
        # |swirl| is bounded below 1.4, so test the rotation angle directly
        a = teacher_orientation(x, TeacherLatent(swirl=0.0))[0]
        b = teacher_orientation(x, TeacherLatent(swirl=1.0))[0]
        assert np.arccos(np.clip(abs(a @ b), 0, 1)) == pytest.approx(1.0, abs=1e-9)
        n = np.array([1.0, 0.0, 0.0])
        azimuthal = np.cross(np.array([0.0, 1.0, 0.0]), n)
        expected = np.cos(1.0) * a + np.sin(1.0) * azimuthal
        assert abs(abs(b @ expected) - 1.0) < 1e-9

    def test_unit_and_tangential(self):
        lat = TeacherLatent(head_radii=(0.45, 0.5, 0.48), swirl=0.5, hair_polar_extent=2.0)
        rng = np.random.default_rng(3)
        d = rng.normal(size=(500, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        d = d[d[:, 1] > 0.1]
        x = d * lat.radii
        o = teacher_orientation(x, lat)
        np.testing.assert_allclose(np.linalg.norm(o, axis=1), 1.0, atol=1e-12)
        assert np.max(np.abs(np.sum(o * teacher_normal(x, lat), axis=1))) < 1e-6

    def test_undefined_outside_hair(self):
        with pytest.raises(UndefinedRegionError):
            teacher_orientation(np.array([[0.0, -0.5, 0.0]]), TeacherLatent())


class TestTeacherLatent:
    def test_validation(self):
        with pytest.raises(ValueError):
            TeacherLatent(head_radii=(0.8, 0.5, 0.5))
        with pytest.raises(ValueError):
            TeacherLatent(swirl=1.5)

    def test_feature_round_trip(self):
        lat = TeacherLatent.sample(np.random.default_rng(5))
        np.testing.assert_allclose(features_to_vector(latent_features(lat)), lat.to_vector(), atol=1e-12)
        assert np.all(np.abs(latent_features(lat)) <= 1.0)

    def test_config_round_trip(self):
        lat = TeacherLatent.sample(np.random.default_rng(6))
        assert TeacherLatent.from_config(lat.to_config()) == lat


class TestTeacherRender:
    def test_bald_mask_is_empty(self):
        tr = teacher_render(CameraPose(0.0, 0.3, 2.0, np.deg2rad(40), 24, 24), BALD)
        assert tr.hair_mask.values.max() == 0.0

    def test_top_view_mask_covers_silhouette(self):
        pose = CameraPose(0.0, np.pi / 2, 2.0, np.deg2rad(40), 32, 32)
        lat = TeacherLatent()
        tr = teacher_render(pose, lat)
        hits = surface_hits(pose, lat)
        mask = tr.hair_mask.values[..., 0].reshape(-1) >= 0.5
        assert hits.hit.sum() > 100
        assert np.array_equal(mask, hits.hit)

    def test_background_pixels(self):
        pose = CameraPose(0.0, 0.0, 2.0, np.deg2rad(90), 16, 16)
        tr = teacher_render(pose, TeacherLatent(), background=0.25)
        rays = camera_rays(pose)
        img = tr.image.values.reshape(-1, 3)
        # rays that miss the scene box carry no density at all
        box_miss = ~render.sample_rays(rays, 8).valid
        assert box_miss.any()
        np.testing.assert_allclose(img[box_miss], 0.25, atol=1e-12)
        # rays passing 20 teacher betas outside the hair shell (radius 0.55)
        far = np.linalg.norm(np.cross(rays.origins, rays.directions), axis=1) > 0.75
        assert (far & ~box_miss).any()
        np.testing.assert_allclose(img[far], 0.25, atol=1e-6)

    def test_deterministic(self):
        pose = CameraPose(0.5, 0.2, 2.0, np.deg2rad(40), 12, 12)
        a = teacher_render(pose, TeacherLatent(), rng=np.random.default_rng(3))
        b = teacher_render(pose, TeacherLatent(), rng=np.random.default_rng(3))
        assert np.array_equal(a.image.values, b.image.values)
        assert np.array_equal(a.densities, b.densities)
