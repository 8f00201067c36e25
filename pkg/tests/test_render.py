from __future__ import annotations

import math

import numpy as np
import pytest

from hairdistill import autodiff as ad
from hairdistill import render
from hairdistill.geomcore import CameraPose, camera_rays, Rays


def branch_neg(s, beta):
    return math.exp(s / beta) / (2 * beta)


def branch_pos(s, beta):
    return (1 - 0.5 * math.exp(-s / beta)) / beta


class TestSdf2Dens:
    def test_hand_values(self):
        assert render.sdf2dens_np(0.0, 0.1) == pytest.approx(5.0, abs=1e-12)
        assert render.sdf2dens_np(-0.1, 0.1) == pytest.approx(5.0 * math.exp(-1), abs=1e-12)
        assert render.sdf2dens_np(10.0, 0.1) == pytest.approx(10.0, abs=1e-12)

    def test_continuity(self):
        for beta in np.logspace(-3, 0, 20):
            assert abs(branch_neg(0.0, beta) - branch_pos(0.0, beta)) < 1e-12
            assert abs(render.sdf2dens_np(0.0, beta) - branch_neg(0.0, beta)) < 1e-12 * max(1.0, 1 / beta)

    def test_matches_branches(self):
        rng = np.random.default_rng(0)
        for s, beta in zip(rng.uniform(-1, 1, 50), rng.uniform(0.01, 1, 50)):
            ref = branch_neg(s, beta) if s <= 0 else branch_pos(s, beta)
            assert render.sdf2dens_np(s, beta) == pytest.approx(ref, rel=1e-12)

    def test_monotone(self):
        rng = np.random.default_rng(1)
        s = rng.uniform(-2, 2, 10_000)
        beta = rng.uniform(1e-3, 1, 10_000)
        ds = rng.uniform(1e-6, 0.1, 10_000)
        assert np.all(render.sdf2dens_np(s + ds, beta) >= render.sdf2dens_np(s, beta))

    def test_negative_inside_convention(self):
        render.set_sdf_sign(-1)
        try:
            v = render.sdf2dens_np(-0.1, 0.1)
        finally:
            render.set_sdf_sign(1)
        assert v == pytest.approx(branch_pos(0.1, 0.1))


class TestComposite:
    def test_transparent(self):
        c = render.composite(np.zeros((3, 4)), np.full((3, 4), 0.1), np.ones((3, 4, 3)), 0.3)
        np.testing.assert_allclose(c.color.data, 0.3)
        np.testing.assert_allclose(c.opacity.data, 0.0)

    def test_opaque_single_sample(self):
        colors = np.zeros((1, 2, 3))
        colors[0, 0] = [0.2, 0.4, 0.6]
        c = render.composite(np.array([[50.0, 0.0]]), np.ones((1, 2)), colors, 1.0)
        np.testing.assert_allclose(c.color.data[0], [0.2, 0.4, 0.6], atol=1e-20)

    def test_two_sample_hand_case(self):
        c1, c2, bg = np.array([1.0, 0.0, 0.2]), np.array([0.0, 1.0, 0.4]), 0.6
        c = render.composite_alpha(np.array([[0.5, 0.5]]), np.stack([c1, c2])[None], bg)
        np.testing.assert_allclose(c.color.data[0], 0.5 * c1 + 0.25 * c2 + 0.25 * bg, atol=1e-12)

    def test_weights_and_residual(self):
        rng = np.random.default_rng(2)
        sigma = rng.exponential(5.0, (10_000, 16))
        deltas = rng.uniform(0, 0.2, (10_000, 16))
        c = render.composite(sigma, deltas, np.zeros((10_000, 16, 3)), 0.0)
        residual = np.exp(-np.sum(sigma * deltas, axis=1))
        np.testing.assert_allclose(c.opacity.data + residual, 1.0, atol=1e-9)
        alpha = 1 - np.exp(-sigma * deltas)
        trans = np.concatenate([np.ones((10_000, 1)), np.cumprod(1 - alpha, axis=1)[:, :-1]], axis=1)
        np.testing.assert_allclose(c.weights.data, trans * alpha, atol=1e-12)

    def test_gradient_through_composite(self):
        rng = np.random.default_rng(3)
        s0 = rng.normal(size=(2, 5))
        col = rng.random((2, 5, 3))
        deltas = np.full((2, 5), 0.1)

        def f(s):
            return float(np.sum(render.composite(render.sdf2dens_np(s, 0.2), deltas, col, 0.5).color.data))

        p = ad.Parameter(s0.copy())
        with ad.GradientTape() as tape:
            out = ad.tsum(render.composite(render.sdf2dens(p, 0.2), deltas, col, 0.5).color)
        (g,) = tape.gradient(out, [p])
        fd = np.zeros_like(s0)
        for i in np.ndindex(s0.shape):
            a, b = s0.copy(), s0.copy()
            a[i] += 1e-6
            b[i] -= 1e-6
            fd[i] = (f(a) - f(b)) / 2e-6
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-8)


def sphere_field(radius=0.5):
    def field(points):
        return {"sdf": radius - np.linalg.norm(points, axis=1),
                "semantic": np.ones(len(points)),
                "orientation": np.tile([0.0, 1.0, 0.0], (len(points), 1))}
    return field


class TestSurfacePoints:
    def test_chord_depth(self):
        rays = Rays(np.array([[0.0, 0.0, 2.0]]), np.array([[0.0, 0.0, -1.0]]))
        samples = render.sample_rays(rays, 64)
        sp = render.surface_points(rays, samples, sphere_field())
        spacing = 1.5 / 64
        assert len(sp) == 1
        assert abs(sp.depth[0] - 1.5) <= spacing

    def test_dense_refinement(self):
        pose = CameraPose(0.3, 0.2, 2.0, np.deg2rad(40), 24, 24)
        rays = camera_rays(pose)
        sp = render.surface_points(rays, render.sample_rays(rays, 256), sphere_field())
        assert len(sp) > 100
        assert np.max(np.abs(np.linalg.norm(sp.positions, axis=1) - 0.5)) < 1e-3

    def test_bracket(self):
        pose = CameraPose(0.0, 0.0, 2.0, np.deg2rad(40), 16, 16)
        rays = camera_rays(pose)
        f = sphere_field()
        sp = render.surface_points(rays, render.sample_rays(rays, 32), f)
        s_at = f(sp.positions)["sdf"]
        assert np.all(sp.bracket[:, 0] <= 0) and np.all(sp.bracket[:, 1] > 0)
        assert np.all(np.abs(s_at) <= np.max(np.abs(sp.bracket), axis=1) + 1e-15)

    def test_miss(self):
        rays = Rays(np.array([[0.0, 0.7, 2.0]]), np.array([[0.0, 0.0, -1.0]]))
        assert len(render.surface_points(rays, render.sample_rays(rays, 32), sphere_field())) == 0

    def test_starting_inside_is_counted(self):
        rays = Rays(np.array([[0.0, 0.0, 2.0]]), np.array([[0.0, 0.0, -1.0]]))
        samples = render.sample_rays(rays, 16)
        sp = render.surface_points(rays, samples, sphere_field(radius=1.5))
        assert len(sp) == 0 and sp.skipped_inside == 1


class TestProjection:
    pose = CameraPose(0.0, 0.0, 2.0, np.deg2rad(40), 9, 9)

    def _points(self, orientation):
        rays = camera_rays(self.pose)
        sp = render.surface_points(rays, render.sample_rays(rays, 64), sphere_field())
        sp.orientation = np.tile(orientation, (len(sp), 1))
        return sp

    def test_no_points(self):
        sp = render.first_crossing(np.full((81, 4), -1.0), render.sample_rays(camera_rays(self.pose), 4))
        sp.semantic = np.zeros(0)
        assert render.project_semantic(sp, self.pose).values.max() == 0.0

    def test_full_semantic_is_silhouette(self):
        rays = camera_rays(self.pose)
        sp = render.surface_points(rays, render.sample_rays(rays, 64), sphere_field())
        mask = render.project_semantic(sp, self.pose).values[..., 0].reshape(-1)
        hit = np.zeros(81, dtype=bool)
        hit[sp.ray_index] = True
        np.testing.assert_array_equal(mask == 1.0, hit)

    def test_axis_angles(self):
        up = self.pose.rotation[:, 1]
        right = self.pose.rotation[:, 0]
        centre = 40
        a_up = render.project_orientation(self._points(up), self.pose).angle.reshape(-1)[centre]
        a_right = render.project_orientation(self._points(right), self.pose).angle.reshape(-1)[centre]
        assert a_up == pytest.approx(np.pi / 2, abs=1e-12)
        assert a_right == pytest.approx(0.0, abs=1e-12)

    def test_sign_invariance(self):
        o = np.array([0.3, 0.5, -0.8]) / np.linalg.norm([0.3, 0.5, -0.8])
        a = render.project_orientation(self._points(o), self.pose)
        b = render.project_orientation(self._points(-o), self.pose)
        np.testing.assert_allclose(a.angle, b.angle, atol=1e-12)
        np.testing.assert_allclose(a.confidence, b.confidence, atol=1e-12)

    def test_view_axis_orientation_is_degenerate(self):
        forward = self.pose.rotation[:, 2]
        am = render.project_orientation(self._points(forward), self.pose)
        assert am.confidence.reshape(-1)[40] == 0.0 and am.angle.reshape(-1)[40] == 0.0

    def test_plucker_matches_projected_endpoints(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(-0.3, 0.3, (50, 3))
        d = rng.normal(size=(50, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        ang, _ = render.line_angles(d, x, self.pose)
        c0, r0, _ = self.pose.project(x)
        c1, r1, _ = self.pose.project(x + 1e-6 * d)
        ref = np.mod(np.arctan2(-(r1 - r0), c1 - c0), np.pi)
        diff = np.abs(ang - ref)
        assert np.all(np.minimum(diff, np.pi - diff) < 1e-5)
