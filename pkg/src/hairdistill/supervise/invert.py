"""Latent inversion: fit the conditioning vector to a target image with the field frozen."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from .. import render
from .. import student as st
from ..geomcore import CameraPose, ImageBuffer, camera_rays

BCE_EPS = 1e-7


class InversionAborted(RuntimeError):
    """Raised when the inversion loss stops being finite."""


@dataclass(frozen=True)
class InvertConfig:
    steps: int = 500
    lr: float = 0.05
    samples_per_ray: int = 48
    background: float = 0.5
    mask_weight: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.lr <= 0 or self.samples_per_ray < 2:
            raise ValueError("need steps >= 0, lr > 0 and at least two samples per ray")


@dataclass
class InversionResult:
    latent: np.ndarray
    initial_mse: float
    best_mse: float
    history: list = field(default_factory=list)

    @property
    def reduction(self) -> float:
        return self.initial_mse / max(self.best_mse, 1e-300)


class _Scene:
    """Ray samples and constant point features for one camera."""

    def __init__(self, params: st.PsiParams, pose: CameraPose, K: int):
        self.pose = pose
        self.rays = camera_rays(pose)
        self.samples = render.sample_rays(self.rays, K)
        pts = self.samples.positions.reshape(-1, 3)
        zero = np.zeros(params.spec.latent_dim)
        self.point_feat = st.encode(pts, zero, params.spec, params.dtype)[:, :params.spec.point_dim]
        self.deltas = self.samples.deltas.astype(params.dtype)


def _features(point_feat: np.ndarray, w: ad.Tensor):
    ones = np.ones((len(point_feat), 1), dtype=point_feat.dtype)
    return ad.concat([point_feat, ones * ad.reshape(w, (1, -1))], axis=1)


def render_latent(params: st.PsiParams, scene: _Scene, w: ad.Tensor, background: float):
    """Differentiable image (H*W, 3) and per-ray hair probability for latent ``w``."""
    s, c, _ = st.geometry_forward(_features(scene.point_feat, w), params)
    shape = scene.samples.depths.shape
    sigma = ad.reshape(render.sdf2dens(s, params.beta()), shape)
    comp = render.composite(sigma, scene.deltas, ad.reshape(c, shape + (3,)), background)
    sp = render.first_crossing(np.asarray(s.data).reshape(shape), scene.samples)
    n = len(scene.rays)
    if len(sp):
        zero = np.zeros(params.spec.latent_dim)
        pf = st.encode(sp.positions, zero, params.spec, params.dtype)[:, :params.spec.point_dim]
        _, m, _, _ = st.attribute_forward(_features(pf, w), params)
        gather = np.full(n, len(sp))
        gather[sp.ray_index] = np.arange(len(sp))
        m = ad.concat([m, np.zeros(1, dtype=params.dtype)], axis=0)[gather]
    else:
        m = ad.Tensor(np.zeros(n, dtype=params.dtype))
    return comp.color, m


def invert(params: st.PsiParams, target: ImageBuffer, pose: CameraPose, config: InvertConfig = InvertConfig(),
           target_mask: ImageBuffer | None = None, init=None) -> InversionResult:
    """Adam on the latent vector for image MSE (plus mask BCE); returns the best latent seen."""
    if target.height != pose.height or target.width != pose.width:
        raise st.DimensionError(f"target is {target.width}x{target.height}, camera is {pose.width}x{pose.height}")
    D = params.spec.latent_dim
    rng = np.random.default_rng(config.seed)
    w0 = rng.uniform(-1.0, 1.0, D) if init is None else np.asarray(init, dtype=np.float64)
    if w0.shape != (D,):
        raise st.DimensionError(f"latent has shape {w0.shape}, expected ({D},)")
    dt = params.dtype
    img = target.values if target.channels == 3 else np.repeat(target.values, 3, axis=-1)
    y_img = img.reshape(-1, 3).astype(dt)
    y_mask = None if target_mask is None else (target_mask.values[..., 0].reshape(-1) >= 0.5).astype(dt)
    scene = _Scene(params, pose, config.samples_per_ray)
    w = ad.Parameter(w0.astype(dt))
    opt = st.Adam([w], lr=config.lr)
    history = []
    best_w, best = w0.copy(), np.inf
    for it in range(config.steps + 1):
        with ad.GradientTape() as tape:
            color, m = render_latent(params, scene, w, config.background)
            diff = color - y_img
            mse = ad.mean(diff * diff)
            loss = mse
            if y_mask is not None and config.mask_weight > 0:
                p = ad.clip(m, BCE_EPS, 1.0 - BCE_EPS)
                bce = -(ad.log(p) * y_mask + ad.log(1.0 - p) * (1.0 - y_mask))
                loss = loss + ad.mean(bce) * config.mask_weight
        value, mse_v = float(loss.data), float(mse.data)
        if not (np.isfinite(value) and np.isfinite(mse_v)):
            raise InversionAborted(f"non-finite inversion loss at step {it}")
        history.append(mse_v)
        if mse_v < best:
            best, best_w = mse_v, np.asarray(w.data, dtype=np.float64).copy()
        if it == config.steps:
            break
        opt.step(tape.gradient(loss, [w]))
    return InversionResult(best_w, history[0], best, history)
