"""Procedural analytic head used as the distillation teacher.

The head is an ellipsoid; a hair shell of given thickness covers the cap
whose polar angle (measured from +y in ellipsoid-normalised coordinates)
does not exceed ``hair_polar_extent``. Hair carries a stripe texture whose
stripes run along the orientation field: meridians rotated by ``swirl``,
i.e. loxodromes in Mercator coordinates. Every quantity is computed in
coordinates q = x / head_radii, where the head is the unit sphere.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import render
from .geomcore import SCENE_MAX, CameraPose, ImageBuffer, camera_rays, normalize

BETA_TEACHER = 0.01
STRIPES = 16
STRIPE_CONTRAST = 0.7
LIGHT_DIR = normalize(np.array([0.3, 0.8, 0.5]))
DEFAULT_BACKGROUND = 0.5


class UndefinedRegionError(ValueError):
    """Orientation requested outside the hair shell."""


@dataclass(frozen=True)
class TeacherLatent:
    head_radii: tuple = (0.5, 0.5, 0.5)
    hair_polar_extent: float = np.pi / 2
    shell_thickness: float = 0.05
    swirl: float = 0.0
    skin_color: tuple = (0.85, 0.65, 0.55)
    hair_color: tuple = (0.35, 0.2, 0.1)
    seed: int = 0

    VECTOR_DIM = 12

    def __post_init__(self):
        object.__setattr__(self, "head_radii", tuple(float(v) for v in self.head_radii))
        object.__setattr__(self, "skin_color", tuple(float(v) for v in self.skin_color))
        object.__setattr__(self, "hair_color", tuple(float(v) for v in self.hair_color))
        r = np.asarray(self.head_radii)
        if r.shape != (3,) or np.any(r <= 0) or np.any(r >= 0.7):
            raise ValueError(f"head radii must lie in (0, 0.7), got {self.head_radii}")
        if not 0.0 <= self.hair_polar_extent <= np.pi:
            raise ValueError("hair_polar_extent must lie in [0, pi]")
        if not 0.0 < self.shell_thickness < 0.2:
            raise ValueError("shell_thickness must lie in (0, 0.2)")
        if abs(self.swirl) >= 1.4:
            raise ValueError("|swirl| must stay below 1.4 rad")
        for c in (self.skin_color, self.hair_color):
            if len(c) != 3 or min(c) < 0 or max(c) > 1:
                raise ValueError("colors must be RGB triples in [0, 1]")
        outer = r * (1.0 + self.shell_thickness / r.min())
        if np.any(outer >= SCENE_MAX):
            raise ValueError("head with hair shell must fit inside [-0.75, 0.75]^3")

    @property
    def radii(self) -> np.ndarray:
        return np.asarray(self.head_radii)

    @property
    def unit_thickness(self) -> float:
        return self.shell_thickness / float(self.radii.min())

    @property
    def bald(self) -> bool:
        return self.hair_polar_extent <= 0.0

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.radii, [self.hair_polar_extent, self.shell_thickness, self.swirl],
                               self.skin_color, self.hair_color])

    @classmethod
    def from_vector(cls, v, seed: int = 0) -> "TeacherLatent":
        v = np.asarray(v, dtype=np.float64)
        return cls(tuple(v[0:3]), float(v[3]), float(v[4]), float(v[5]),
                   tuple(v[6:9]), tuple(v[9:12]), seed)

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "TeacherLatent":
        """Draw from the teacher prior (stand-in for z ~ N(0, I))."""
        radii = rng.uniform([0.44, 0.47, 0.45], [0.52, 0.55, 0.53])
        return cls(tuple(radii), float(rng.uniform(0.9, 1.9)), float(rng.uniform(0.035, 0.06)),
                   float(rng.uniform(-0.6, 0.6)), tuple(rng.uniform([0.7, 0.5, 0.4], [0.95, 0.75, 0.65])),
                   tuple(rng.uniform([0.05, 0.03, 0.02], [0.5, 0.35, 0.25])), int(rng.integers(0, 2**31)))

    def to_config(self, prefix: str = "teacher.") -> dict:
        d = asdict(self)
        return {prefix + k: (" ".join(repr(float(x)) for x in v) if isinstance(v, tuple) else repr(v))
                for k, v in d.items()}

    @classmethod
    def from_config(cls, items: dict, prefix: str = "teacher.") -> "TeacherLatent":
        base = cls()
        kwargs = {}
        for key, raw in items.items():
            if not key.startswith(prefix):
                continue
            name = key[len(prefix):]
            current = getattr(base, name)
            if isinstance(current, tuple):
                kwargs[name] = tuple(float(x) for x in str(raw).split())
            elif isinstance(current, int) and not isinstance(current, bool):
                kwargs[name] = int(raw)
            else:
                kwargs[name] = float(raw)
        return replace(base, **kwargs)


VECTOR_LOW = np.array([0.44, 0.47, 0.45, 0.9, 0.035, -0.6, 0.7, 0.5, 0.4, 0.05, 0.03, 0.02])
VECTOR_HIGH = np.array([0.52, 0.55, 0.53, 1.9, 0.06, 0.6, 0.95, 0.75, 0.65, 0.5, 0.35, 0.25])


def latent_features(latent) -> np.ndarray:
    """Latent vector rescaled so the teacher prior maps to [-1, 1] per component."""
    v = latent.to_vector() if isinstance(latent, TeacherLatent) else np.asarray(latent, dtype=np.float64)
    return 2.0 * (v - VECTOR_LOW) / (VECTOR_HIGH - VECTOR_LOW) - 1.0


def features_to_vector(f) -> np.ndarray:
    return (np.asarray(f) + 1.0) * 0.5 * (VECTOR_HIGH - VECTOR_LOW) + VECTOR_LOW


# geometry in normalised coordinates ------------------------------------------

def _polar(q: np.ndarray):
    rxz = np.hypot(q[..., 0], q[..., 2])
    return np.arctan2(rxz, q[..., 1]), rxz


def _unit_sdf(q: np.ndarray, extent: float, thick: float) -> np.ndarray:
    """Exact positive-inside distance to {|q|<=1} U {|q|<=1+thick, polar<=extent}.

    The solid is rotationally symmetric about y, so the distance is the 2D
    distance in the meridian half-plane (r, y) to its profile curve.
    """
    theta, r = _polar(q)
    y = q[..., 1]
    rho = np.sqrt(r * r + y * y)
    if extent <= 0.0:
        return 1.0 - rho
    outer = 1.0 + thick

    def arc(radius, lo, hi):
        on = (theta >= lo) & (theta <= hi)
        d_end = np.minimum(np.hypot(r - radius * np.sin(lo), y - radius * np.cos(lo)),
                           np.hypot(r - radius * np.sin(hi), y - radius * np.cos(hi)))
        return np.where(on, np.abs(rho - radius), d_end)

    d = arc(outer, 0.0, extent)
    if extent < np.pi:
        d = np.minimum(d, arc(1.0, extent, np.pi))
        u = np.array([np.sin(extent), np.cos(extent)])
        t = np.clip(r * u[0] + y * u[1], 1.0, outer)
        d = np.minimum(d, np.hypot(r - t * u[0], y - t * u[1]))
    inside = (rho <= 1.0) | ((rho <= outer) & (theta <= extent))
    return np.where(inside, d, -d)


def teacher_sdf(x, latent: TeacherLatent) -> np.ndarray:
    """Signed distance of head and hair shell (scaled-sphere approximation for ellipsoids).

    Exact for spherical heads; for ellipsoids the sign and zero set are exact.
    """
    x = np.asarray(x, dtype=np.float64)
    q = x / latent.radii
    s = float(latent.radii.min()) * _unit_sdf(q, latent.hair_polar_extent, latent.unit_thickness)
    return render.SDF_SIGN * s


def teacher_normal(x, latent: TeacherLatent) -> np.ndarray:
    """Outward normal of the ellipsoidal level set through x."""
    x = np.asarray(x, dtype=np.float64)
    return normalize(x / latent.radii ** 2)


def teacher_semantic(x, latent: TeacherLatent, tol: float = 0.0) -> np.ndarray:
    """True inside the hair shell: polar angle <= extent (inclusive) and the
    normalised radius between head and outer shell surface (widened by ``tol``)."""
    x = np.asarray(x, dtype=np.float64)
    if latent.bald:
        return np.zeros(x.shape[:-1], dtype=bool)
    q = x / latent.radii
    theta, _ = _polar(q)
    rho = np.linalg.norm(q, axis=-1)
    t = tol / float(latent.radii.min())
    return (theta <= latent.hair_polar_extent) & (rho >= 1.0 - t) & (rho <= 1.0 + latent.unit_thickness + t)


def _sphere_frame(q: np.ndarray):
    theta, _ = _polar(q)
    lam = np.arctan2(q[..., 0], q[..., 2])
    ct, st = np.cos(theta), np.sin(theta)
    cl, sl = np.cos(lam), np.sin(lam)
    e_theta = np.stack([ct * sl, -st, ct * cl], axis=-1)
    e_lam = np.stack([cl, np.zeros_like(cl), -sl], axis=-1)
    return theta, lam, e_theta, e_lam


def orientation_field(x, latent: TeacherLatent) -> np.ndarray:
    """Swirled meridian direction, defined at every point off the y axis."""
    x = np.asarray(x, dtype=np.float64)
    q = x / latent.radii
    _, _, e_theta, e_lam = _sphere_frame(q)
    o_unit = np.cos(latent.swirl) * e_theta + np.sin(latent.swirl) * e_lam
    # push the unit-sphere tangent onto the ellipsoid; stays tangent to the level set
    return normalize(o_unit * latent.radii)


def teacher_orientation(x, latent: TeacherLatent, tol: float = 1e-9) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    ok = teacher_semantic(x, latent, tol)
    if not np.all(ok):
        raise UndefinedRegionError("orientation is only defined inside the hair shell")
    return orientation_field(x, latent)


def stripe_phase(x, latent: TeacherLatent) -> np.ndarray:
    """Texture phase, constant along orientation-field flow lines (loxodromes)."""
    q = np.asarray(x, dtype=np.float64) / latent.radii
    theta, lam, _, _ = _sphere_frame(q)
    theta = np.clip(theta, 1e-6, np.pi - 1e-6)
    mercator = -np.log(np.tan(0.5 * theta))
    return STRIPES * (lam + np.tan(latent.swirl) * mercator)


def teacher_color(x, latent: TeacherLatent) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = teacher_normal(x, latent)
    shade = 0.75 + 0.25 * np.clip(n @ LIGHT_DIR, 0.0, 1.0)
    hair = teacher_semantic(x, latent, tol=0.5 * latent.shell_thickness) | (
        (~latent.bald) & (_polar(x / latent.radii)[0] <= latent.hair_polar_extent)
        & (np.linalg.norm(x / latent.radii, axis=-1) > 1.0))
    stripes = 1.0 - STRIPE_CONTRAST * (0.5 + 0.5 * np.cos(stripe_phase(x, latent)))
    base = np.where(hair[..., None], np.asarray(latent.hair_color) * stripes[..., None],
                    np.asarray(latent.skin_color))
    return np.clip(base * shade[..., None], 0.0, 1.0)


@dataclass
class SurfaceHits:
    positions: np.ndarray  # (N, 3); meaningful where hit
    depth: np.ndarray
    hit: np.ndarray


def surface_hits(pose: CameraPose, latent: TeacherLatent, K: int = 128,
                 refine_steps: int = 30) -> SurfaceHits:
    """First outside-to-inside crossing per pixel ray, refined by bisection."""
    rays = camera_rays(pose)
    samples = render.sample_rays(rays, K)
    sdf = teacher_sdf(samples.positions.reshape(-1, 3), latent).reshape(samples.depths.shape)
    sp = render.first_crossing(sdf, samples)
    n = len(rays)
    pos = np.zeros((n, 3))
    depth = np.full(n, np.inf)
    hit = np.zeros(n, dtype=bool)
    if len(sp):
        idx = sp.ray_index
        i = np.argmax(render.inside_value(sdf[idx]) > 0, axis=1)
        lo = samples.depths[idx, i - 1]
        hi = samples.depths[idx, i]
        o, d = rays.origins[idx], rays.directions[idx]
        for _ in range(refine_steps):
            mid = 0.5 * (lo + hi)
            inside = render.inside_value(teacher_sdf(o + mid[:, None] * d, latent)) > 0
            hi = np.where(inside, mid, hi)
            lo = np.where(inside, lo, mid)
        t = 0.5 * (lo + hi)
        pos[idx] = o + t[:, None] * d
        depth[idx] = t
        hit[idx] = True
    return SurfaceHits(pos, depth, hit)


@dataclass
class TeacherRender:
    image: ImageBuffer
    hair_mask: ImageBuffer
    densities: np.ndarray  # (num_pixels, K)
    samples: render.RaySamples
    hits: SurfaceHits


def teacher_render(pose: CameraPose, latent: TeacherLatent, K: int = 64,
                   background: float = DEFAULT_BACKGROUND,
                   rng: np.random.Generator | None = None) -> TeacherRender:
    """Image, hair mask and per-sample densities from the analytic head."""
    rays = camera_rays(pose)
    samples = render.sample_rays(rays, K, rng)
    pts = samples.positions.reshape(-1, 3)
    sigma = render.sdf2dens_np(teacher_sdf(pts, latent), BETA_TEACHER).reshape(samples.depths.shape)
    colors = teacher_color(pts, latent).reshape(samples.depths.shape + (3,))
    comp = render.composite(sigma, samples.deltas, colors, background)
    image = ImageBuffer(comp.color.data.reshape(pose.height, pose.width, 3))
    hits = surface_hits(pose, latent, max(K, 128))
    mask = np.zeros(len(rays))
    if hits.hit.any():
        mask[hits.hit] = teacher_semantic(hits.positions[hits.hit], latent, tol=1e-6)
    hair_mask = ImageBuffer(mask.reshape(pose.height, pose.width))
    return TeacherRender(image, hair_mask, sigma, samples, hits)
