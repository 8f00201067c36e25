"""Volume rendering over signed distance fields, surface detection and
projection of per-point semantics and orientations into image space.

Functions accept numpy arrays or autodiff tensors; they return tensors so the
same code is used when a gradient tape is recording.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geomcore import SCENE_MAX, SCENE_MIN, CameraPose, AngleMap, ImageBuffer, Rays, ray_box

# +1: signed distance is positive inside the solid. Every module reads this.
SDF_SIGN = 1


def set_sdf_sign(sign: int) -> None:
    global SDF_SIGN
    if sign not in (1, -1):
        raise ValueError("sdf_sign must be +1 or -1")
    SDF_SIGN = sign


def inside_value(s):
    """Convert a stored sdf to the positive-inside convention."""
    return s if SDF_SIGN == 1 else -s


def sdf2dens(s, beta):
    """Laplace-CDF density of a positive-inside signed distance.

    ``s <= 0``: exp(s/beta) / (2 beta); ``s > 0``: (1 - exp(-s/beta)/2) / beta.
    """
    s = inside_value(s)
    sd = s.data if isinstance(s, ad.Tensor) else np.asarray(s)
    e = ad.exp(-ad.absolute(s) / beta)
    pos = (sd > 0).astype(e.dtype)
    # pos + (1 - 2 pos) e/2 evaluates each branch without cancellation, keeping it monotone in s
    return (pos + (1.0 - 2.0 * pos) * (0.5 * e)) / beta


def sdf2dens_np(s, beta: float) -> np.ndarray:
    return sdf2dens(np.asarray(s, dtype=np.float64), beta).data


@dataclass
class RaySamples:
    """K samples per ray: positions (N, K, 3), depths (N, K), segment lengths (N, K).

    Rays that miss the scene box carry zero-length segments.
    """

    positions: np.ndarray
    depths: np.ndarray
    deltas: np.ndarray
    valid: np.ndarray

    @property
    def num_rays(self) -> int:
        return self.depths.shape[0]

    @property
    def num_samples(self) -> int:
        return self.depths.shape[1]


def sample_rays(rays: Rays, K: int, rng: np.random.Generator | None = None,
                bmin=(SCENE_MIN,) * 3, bmax=(SCENE_MAX,) * 3) -> RaySamples:
    """Stratified samples between the scene-box entry and exit (bin centres if no rng)."""
    if K < 2:
        raise ValueError("need at least two samples per ray")
    near, far, hit = ray_box(rays.origins, rays.directions, bmin, bmax)
    near = np.where(hit, near, 0.0)
    far = np.where(hit, far, 0.0)
    width = (far - near) / K
    u = np.full((len(rays), K), 0.5) if rng is None else rng.random((len(rays), K))
    t = near[:, None] + (np.arange(K)[None, :] + u) * width[:, None]
    deltas = np.empty_like(t)
    deltas[:, :-1] = t[:, 1:] - t[:, :-1]
    deltas[:, -1] = far - t[:, -1]
    deltas[~hit] = 0.0
    pos = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    return RaySamples(pos, t, deltas, hit)


@dataclass
class Composite:
    color: ad.Tensor
    weights: ad.Tensor
    opacity: ad.Tensor


def composite(sigma, deltas, colors, background=0.0) -> Composite:
    """C = sum_i T_i alpha_i c_i + T_final * background with alpha = 1 - exp(-sigma delta)."""
    tau = ad.mul(sigma, deltas)
    alpha = 1.0 - ad.exp(-tau)
    csum = ad.cumsum(tau, axis=-1)
    trans = ad.exp(-(csum - tau))
    weights = trans * alpha
    opacity = ad.tsum(weights, axis=-1)
    residual = ad.exp(-csum[..., -1])
    color = ad.tsum(ad.reshape(weights, weights.shape + (1,)) * colors, axis=-2)
    color = color + ad.reshape(residual, residual.shape + (1,)) * np.asarray(background, dtype=weights.dtype)
    return Composite(color, weights, opacity)


def composite_alpha(alpha, colors, background=0.0) -> Composite:
    """Compositing from per-sample opacities (used for hand-checked cases)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    with np.errstate(divide="ignore"):
        tau = -np.log1p(-alpha)
    return composite(tau, np.ones_like(tau), colors, background)


def render_rays(rays: Rays, samples: RaySamples, field, background=0.0) -> Composite:
    """Render rays through ``field(points) -> (sigma, color)`` evaluated at the samples."""
    n, k = samples.depths.shape
    sigma, color = field(samples.positions.reshape(-1, 3))
    sigma = ad.reshape(sigma, (n, k))
    color = ad.reshape(color, (n, k, 3))
    return composite(sigma, samples.deltas, color, background)


@dataclass
class SurfacePoints:
    """First visible zero crossings; ``ray_index`` refers to the ray batch."""

    positions: np.ndarray
    ray_index: np.ndarray
    depth: np.ndarray
    bracket: np.ndarray  # (M, 2) sdf values at the bracketing samples
    skipped_inside: int = 0
    semantic: np.ndarray | None = None
    orientation: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ray_index)


def first_crossing(sdf: np.ndarray, samples: RaySamples) -> SurfacePoints:
    """First outside-to-inside sign change per ray, refined by linear interpolation."""
    s = inside_value(np.asarray(sdf, dtype=np.float64)).reshape(samples.depths.shape)
    inside = s > 0
    starts_inside = inside[:, 0] & samples.valid
    change = ~inside[:, :-1] & inside[:, 1:]
    has = change.any(axis=1) & ~starts_inside & samples.valid
    first = np.argmax(change, axis=1)
    rays = np.nonzero(has)[0]
    i = first[rays]
    s0, s1 = s[rays, i], s[rays, i + 1]
    t0, t1 = samples.depths[rays, i], samples.depths[rays, i + 1]
    frac = np.where(s1 - s0 > 0, -s0 / np.where(s1 - s0 > 0, s1 - s0, 1.0), 0.0)
    t = t0 + frac * (t1 - t0)
    p0 = samples.positions[rays, i]
    p1 = samples.positions[rays, i + 1]
    pos = p0 + frac[:, None] * (p1 - p0)
    bracket = np.stack([s0, s1], axis=1)
    return SurfacePoints(pos, rays, t, bracket, skipped_inside=int(starts_inside.sum()))


def surface_points(rays: Rays, samples: RaySamples, field) -> SurfacePoints:
    """Detect surface points with ``field(points) -> dict`` that returns 'sdf',
    'semantic' and 'orientation' arrays, then evaluate attributes at them."""
    sdf = field(samples.positions.reshape(-1, 3))["sdf"]
    sp = first_crossing(np.asarray(sdf).reshape(samples.depths.shape), samples)
    if len(sp):
        attrs = field(sp.positions)
        sp.semantic = np.asarray(attrs["semantic"]).reshape(-1)
        sp.orientation = np.asarray(attrs["orientation"]).reshape(-1, 3)
    else:
        sp.semantic = np.zeros(0)
        sp.orientation = np.zeros((0, 3))
    return sp


def project_semantic(points: SurfacePoints, pose: CameraPose, pixels=None) -> ImageBuffer:
    """Hard first-surface projection of m_S; zero where no surface was hit.

    ``pixels`` maps ray-batch indices to row-major pixel indices (identity by default).
    """
    img = np.zeros(pose.width * pose.height)
    if len(points):
        idx = points.ray_index if pixels is None else np.asarray(pixels)[points.ray_index]
        img[idx] = points.semantic
    return ImageBuffer(img.reshape(pose.height, pose.width))


def image_line(orientation, positions: np.ndarray, pose: CameraPose):
    """Image-plane direction (vx, vy) of 3D lines through ``positions``.

    Uses the Plücker moment m = x × d in the camera frame: the projected
    line is {(u, v): m . (u, v, 1) = 0}, whose direction is (m_y, -m_x)/z.
    Equivalent to d_xy - p * d_z with p the normalised image point, so it
    reduces to dropping the view-axis component at the principal point.
    """
    rot = pose.rotation
    xc = pose.to_camera(positions)
    z = np.where(np.abs(xc[:, 2]) > 1e-12, xc[:, 2], 1e-12)
    px = (xc[:, 0] / z)[:, None]
    py = (xc[:, 1] / z)[:, None]
    oc = ad.matmul(orientation, rot.astype(_dtype(orientation)))
    dx, dy, dz = oc[:, 0:1], oc[:, 1:2], oc[:, 2:3]
    vx = dx - dz * px.astype(_dtype(orientation))
    vy = dy - dz * py.astype(_dtype(orientation))
    return ad.reshape(vx, (-1,)), ad.reshape(vy, (-1,))


def _dtype(v):
    return v.dtype if isinstance(v, (ad.Tensor, np.ndarray)) else np.float64


def line_angles(orientation: np.ndarray, positions: np.ndarray, pose: CameraPose):
    """Angle in [0, pi) and in-plane magnitude of projected 3D orientations."""
    vx, vy = image_line(np.asarray(orientation, dtype=np.float64), positions, pose)
    vx, vy = vx.data, vy.data
    mag = np.minimum(np.hypot(vx, vy), 1.0)
    ang = np.mod(np.arctan2(vy, vx), np.pi)
    degenerate = mag < 1e-6
    ang[degenerate] = 0.0
    mag[degenerate] = 0.0
    ang[ang >= np.pi] = 0.0
    return ang, mag


def project_orientation(points: SurfacePoints, pose: CameraPose, pixels=None) -> AngleMap:
    angle = np.zeros(pose.width * pose.height)
    conf = np.zeros(pose.width * pose.height)
    if len(points):
        idx = points.ray_index if pixels is None else np.asarray(pixels)[points.ray_index]
        a, c = line_angles(points.orientation, points.positions, pose)
        angle[idx] = a
        conf[idx] = c
    shape = (pose.height, pose.width)
    return AngleMap(angle.reshape(shape), conf.reshape(shape))
