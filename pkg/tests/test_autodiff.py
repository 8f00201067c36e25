from __future__ import annotations

import numpy as np
import pytest

from hairdistill import autodiff as ad


def _fd(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


class TestTape:
    def test_quadratic_gradient(self):
        p = ad.Parameter(np.array([1.0, -2.0, 3.5]))
        with ad.GradientTape() as tape:
            loss = ad.tsum(p * p)
        (g,) = tape.gradient(loss, [p])
        np.testing.assert_array_equal(g, 2 * p.data)

    def test_detached_branch_has_zero_gradient(self):
        a = ad.Parameter(np.array([1.0, 2.0]))
        b = ad.Parameter(np.array([3.0, 4.0]))
        with ad.GradientTape() as tape:
            loss = ad.tsum(a * 2.0) + ad.tsum(b.detach())
        ga, gb = tape.gradient(loss, [a, b])
        np.testing.assert_array_equal(ga, [2.0, 2.0])
        np.testing.assert_array_equal(gb, [0.0, 0.0])

    def test_no_recording_outside_tape(self):
        p = ad.Parameter(np.ones(3))
        out = p * 3.0
        assert out._vjp is None

    def test_pause_suspends_recording(self):
        p = ad.Parameter(np.ones(2))
        with ad.GradientTape() as tape:
            with ad.pause():
                frozen = p * 5.0
            loss = ad.tsum(frozen) + ad.tsum(p)
        (g,) = tape.gradient(loss, [p])
        np.testing.assert_array_equal(g, [1.0, 1.0])

    def test_non_scalar_target_rejected(self):
        p = ad.Parameter(np.ones(2))
        with ad.GradientTape() as tape:
            y = p * 2.0
        with pytest.raises(ValueError):
            tape.gradient(y, [p])

    def test_broadcast_gradient_reduces(self):
        a = ad.Parameter(np.ones((4, 3)))
        b = ad.Parameter(np.array([1.0, 2.0, 3.0]))
        with ad.GradientTape() as tape:
            loss = ad.tsum(a * b)
        ga, gb = tape.gradient(loss, [a, b])
        np.testing.assert_array_equal(ga, np.tile([1.0, 2.0, 3.0], (4, 1)))
        np.testing.assert_array_equal(gb, [4.0, 4.0, 4.0])


OPS = {
    "exp": lambda t: ad.exp(t),
    "log": lambda t: ad.log(ad.absolute(t) + 0.5),
    "sqrt": lambda t: ad.sqrt(t * t + 0.3),
    "sin_cos": lambda t: ad.sin(t) * ad.cos(t * 2.0),
    "sigmoid": lambda t: ad.sigmoid(t * 3.0),
    "softplus": lambda t: ad.softplus(t, 5.0),
    "atan2": lambda t: ad.atan2(t, t * 0.5 + 2.0),
    "div": lambda t: t / (t * t + 1.0),
    "power": lambda t: ad.power(t * t + 1.0, 1.5),
    "cumsum": lambda t: ad.cumsum(t, axis=-1) * t,
    "norm": lambda t: ad.norm(t, axis=-1, keepdims=True) * t,
    "matmul": lambda t: ad.matmul(t, ad.swapaxes(t, 0, 1)),
    "concat_stack": lambda t: ad.concat([t, ad.stack([t[:, 0], t[:, 1]], axis=1)], axis=1),
    "getitem": lambda t: t[np.array([0, 2, 2]), 1:],
    "where_max": lambda t: ad.where(t.data > 0, t * 2.0, ad.maximum(t, -0.2)),
    "clip": lambda t: ad.clip(t, -0.4, 0.6),
}


class TestOpGradients:
    @pytest.mark.parametrize("name", sorted(OPS))
    def test_matches_finite_differences(self, name):
        rng = np.random.default_rng(7)
        x0 = rng.normal(size=(3, 4))
        # keep away from kinks of the piecewise ops
        x0[np.abs(x0) < 0.05] += 0.1
        x0[np.abs(x0 + 0.2) < 0.05] += 0.1
        x0[np.abs(x0 + 0.4) < 0.05] += 0.1
        x0[np.abs(x0 - 0.6) < 0.05] += 0.1
        weights = rng.normal(size=np.shape(OPS[name](ad.Tensor(x0)).data))

        def f(x):
            return float(np.sum(OPS[name](ad.Tensor(x)).data * weights))

        p = ad.Parameter(x0.copy())
        with ad.GradientTape() as tape:
            loss = ad.tsum(OPS[name](p) * weights)
        (g,) = tape.gradient(loss, [p])
        np.testing.assert_allclose(g, _fd(f, x0), rtol=1e-5, atol=1e-7)

    def test_softplus_pair_slope(self):
        x = np.linspace(-0.3, 0.3, 13)
        val, slope = ad.softplus_pair(ad.Tensor(x), 20.0)
        np.testing.assert_allclose(val.data, np.log1p(np.exp(20 * x)) / 20, rtol=1e-12)
        np.testing.assert_allclose(slope.data, 1 / (1 + np.exp(-20 * x)), rtol=1e-12)

    def test_softplus_large_inputs_finite(self):
        y = ad.softplus_np(np.array([-1e4, 0.0, 1e4]), 100.0)
        assert np.all(np.isfinite(y))
        assert y[2] == pytest.approx(1e4)
