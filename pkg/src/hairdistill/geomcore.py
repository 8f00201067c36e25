"""Cameras, rays, sampling grids and image buffers.

Conventions used throughout the package:

* world +y is up; a camera at azimuth 0 and elevation 0 sits on the +z axis
  and looks at the origin;
* camera frame axes are (right, up, forward); image angles are measured with
  x to the right and y up, so a vertical image line has angle pi/2;
* pixel (row, col) rays pass through pixel centres.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCENE_MIN = -0.75
SCENE_MAX = 0.75


def normalize(v: np.ndarray, axis: int = -1, eps: float = 1e-12) -> np.ndarray:
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    return v / np.maximum(n, eps)


@dataclass(frozen=True)
class CameraPose:
    """Look-at pinhole camera orbiting the world origin.

    ``fov`` is the vertical field of view; horizontal extent follows the
    aspect ratio.
    """

    azimuth: float
    elevation: float
    radius: float = 2.0
    fov: float = np.deg2rad(40.0)
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"camera radius must be positive, got {self.radius}")
        if not 0 < self.fov < np.pi:
            raise ValueError(f"field of view must lie in (0, pi), got {self.fov}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be >= 1, got {self.width}x{self.height}")
        if not np.all(np.isfinite([self.azimuth, self.elevation])):
            raise ValueError("camera angles must be finite")

    @property
    def position(self) -> np.ndarray:
        ca, sa = np.cos(self.azimuth), np.sin(self.azimuth)
        ce, se = np.cos(self.elevation), np.sin(self.elevation)
        return self.radius * np.array([ce * sa, se, ce * ca])

    @property
    def rotation(self) -> np.ndarray:
        """3x3 matrix whose columns are the camera right, up and forward axes."""
        ca, sa = np.cos(self.azimuth), np.sin(self.azimuth)
        ce, se = np.cos(self.elevation), np.sin(self.elevation)
        forward = -np.array([ce * sa, se, ce * ca])
        # d(position)/d(elevation): well defined even when looking straight down
        up = np.array([-se * sa, ce, -se * ca])
        right = np.cross(forward, up)
        return np.stack([right, up, forward], axis=1)

    @property
    def tan_half_fov(self) -> float:
        return float(np.tan(0.5 * self.fov))

    @property
    def aspect(self) -> float:
        return self.width / self.height

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) to camera coordinates (right, up, depth)."""
        return (np.asarray(points) - self.position) @ self.rotation

    def project(self, points: np.ndarray):
        """Continuous pixel coordinates ``(col, row)`` and depth of world points."""
        pc = self.to_camera(points)
        z = pc[..., 2]
        safe = np.where(np.abs(z) > 1e-12, z, 1e-12)
        px = pc[..., 0] / safe / (self.tan_half_fov * self.aspect)
        py = pc[..., 1] / safe / self.tan_half_fov
        col = 0.5 * (px + 1.0) * self.width - 0.5
        row = 0.5 * (1.0 - py) * self.height - 0.5
        return col, row, z

    def pixel_index(self, points: np.ndarray):
        """Nearest pixel (row, col) for world points plus an in-image mask."""
        col, row, z = self.project(points)
        ci = np.rint(col).astype(np.int64)
        ri = np.rint(row).astype(np.int64)
        inside = (z > 0) & (ci >= 0) & (ci < self.width) & (ri >= 0) & (ri < self.height)
        return ri, ci, inside


@dataclass(frozen=True)
class Rays:
    origins: np.ndarray
    directions: np.ndarray

    def __len__(self) -> int:
        return len(self.origins)

    def subset(self, index) -> "Rays":
        return Rays(self.origins[index], self.directions[index])


def camera_rays(pose: CameraPose) -> Rays:
    """One unit ray per pixel, row-major, through pixel centres."""
    rows = np.arange(pose.height, dtype=np.float64)
    cols = np.arange(pose.width, dtype=np.float64)
    px = (2.0 * (cols + 0.5) / pose.width - 1.0) * pose.tan_half_fov * pose.aspect
    py = (1.0 - 2.0 * (rows + 0.5) / pose.height) * pose.tan_half_fov
    gy, gx = np.meshgrid(py, px, indexing="ij")
    d_cam = np.stack([gx, gy, np.ones_like(gx)], axis=-1).reshape(-1, 3)
    dirs = normalize(d_cam @ pose.rotation.T)
    origins = np.broadcast_to(pose.position, dirs.shape).copy()
    return Rays(origins, dirs)


@dataclass(frozen=True)
class GridSpec:
    resolution: int
    bounds_min: tuple = (SCENE_MIN,) * 3
    bounds_max: tuple = (SCENE_MAX,) * 3

    def __post_init__(self):
        if self.resolution < 2:
            raise ValueError(f"grid resolution must be >= 2, got {self.resolution}")
        if not np.all(np.asarray(self.bounds_min) < np.asarray(self.bounds_max)):
            raise ValueError("bounds_min must be below bounds_max on every axis")
        object.__setattr__(self, "bounds_min", tuple(float(v) for v in self.bounds_min))
        object.__setattr__(self, "bounds_max", tuple(float(v) for v in self.bounds_max))

    @property
    def num_points(self) -> int:
        return self.resolution ** 3

    @property
    def spacing(self) -> np.ndarray:
        return (np.asarray(self.bounds_max) - np.asarray(self.bounds_min)) / (self.resolution - 1)

    @property
    def shape(self) -> tuple:
        return (self.resolution,) * 3

    def axes(self):
        return [np.linspace(lo, hi, self.resolution)
                for lo, hi in zip(self.bounds_min, self.bounds_max)]

    def points(self) -> np.ndarray:
        """All grid nodes, lexicographic order (x slowest, z fastest)."""
        ax, ay, az = self.axes()
        g = np.meshgrid(ax, ay, az, indexing="ij")
        return np.stack(g, axis=-1).reshape(-1, 3)

    def to_index(self, points: np.ndarray) -> np.ndarray:
        """Continuous grid coordinates of world points."""
        return (np.asarray(points) - np.asarray(self.bounds_min)) / self.spacing

    def to_world(self, index: np.ndarray) -> np.ndarray:
        return np.asarray(index) * self.spacing + np.asarray(self.bounds_min)

    def nearest_index(self, points: np.ndarray):
        """Nearest node index (N, 3) and a mask of points inside the grid."""
        idx = np.rint(self.to_index(points)).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < self.resolution), axis=-1)
        return np.clip(idx, 0, self.resolution - 1), inside


def grid_points(spec: GridSpec) -> np.ndarray:
    return spec.points()


@dataclass
class ImageBuffer:
    """Image with values in [0, 1], stored as (height, width, channels)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[..., None]
        if v.ndim != 3 or v.shape[2] not in (1, 3):
            raise ValueError(f"image must be HxW, HxWx1 or HxWx3, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("image values must be finite")
        self.values = v

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def gray(self) -> np.ndarray:
        if self.channels == 1:
            return self.values[..., 0]
        return self.values @ np.array([0.299, 0.587, 0.114])

    def save(self, path) -> None:
        write_pnm(path, self.values)

    @classmethod
    def load(cls, path) -> "ImageBuffer":
        return cls(read_pnm(path))


@dataclass
class AngleMap:
    """Per-pixel line angle in [0, pi) and confidence in [0, 1]."""

    angle: np.ndarray
    confidence: np.ndarray
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.angle = np.mod(np.asarray(self.angle, dtype=np.float64), np.pi)
        # mod can round up to exactly pi for tiny negative inputs
        self.angle[self.angle >= np.pi] = 0.0
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        if self.angle.shape != self.confidence.shape:
            raise ValueError("angle and confidence maps must have equal shapes")
        if not np.all(np.isfinite(self.confidence)):
            raise ValueError("confidence must be finite")

    @property
    def shape(self):
        return self.angle.shape

    def save(self, stem) -> None:
        """Write ``<stem>_angle.pgm``, ``<stem>_conf.pgm`` and ``<stem>.txt``."""
        stem = Path(stem)
        write_pnm(stem.with_name(stem.name + "_angle.pgm"), self.angle / np.pi)
        cmax = float(self.confidence.max()) if self.confidence.size else 0.0
        scale = cmax if cmax > 0 else 1.0
        write_pnm(stem.with_name(stem.name + "_conf.pgm"), np.clip(self.confidence / scale, 0, 1))
        with open(stem.with_name(stem.name + ".txt"), "w") as fh:
            fh.write(f"width {self.shape[1]}\nheight {self.shape[0]}\n")
            fh.write(f"angle_scale {np.pi!r}\nconfidence_scale {scale!r}\n")

    @classmethod
    def load(cls, stem) -> "AngleMap":
        stem = Path(stem)
        header = {}
        with open(stem.with_name(stem.name + ".txt")) as fh:
            for line in fh:
                key, value = line.split()
                header[key] = float(value)
        ang = read_pnm(stem.with_name(stem.name + "_angle.pgm"))[..., 0] * header["angle_scale"]
        conf = read_pnm(stem.with_name(stem.name + "_conf.pgm"))[..., 0] * header["confidence_scale"]
        return cls(ang, conf)


def write_pnm(path, values: np.ndarray) -> None:
    """8-bit binary PGM (1 channel) or PPM (3 channels); values quantised by round(v*255)."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 2:
        v = v[..., None]
    h, w, c = v.shape
    magic = {1: b"P5", 3: b"P6"}.get(c)
    if magic is None:
        raise ValueError(f"cannot write {c}-channel image as PNM")
    q = np.rint(np.clip(v, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(q.tobytes())


def read_pnm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    c = {b"P5": 1, b"P6": 3}.get(magic)
    if c is None or maxval != 255:
        raise ValueError(f"unsupported PNM file {path}")
    arr = np.frombuffer(data, dtype=np.uint8, count=w * h * c, offset=pos)
    return arr.reshape(h, w, c).astype(np.float64) / 255.0


def ray_box(origins: np.ndarray, dirs: np.ndarray,
            bmin=(SCENE_MIN,) * 3, bmax=(SCENE_MAX,) * 3):
    """Slab test; returns entry/exit distances and a hit mask."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (np.asarray(bmin) - origins) * inv
        t1 = (np.asarray(bmax) - origins) * inv
    t0 = np.nan_to_num(t0, nan=-np.inf)
    t1 = np.nan_to_num(t1, nan=np.inf)
    near = np.max(np.minimum(t0, t1), axis=-1)
    far = np.min(np.maximum(t0, t1), axis=-1)
    near = np.maximum(near, 0.0)
    return near, far, far > near


def view_overlap(pose_a: CameraPose, pose_b: CameraPose, teacher, samples: int = 128) -> float:
    """Fraction of pose_a's surface hits that land in pose_b's image, front-facing.

    ``teacher`` is a ``TeacherLatent``; hits come from ray casting its
    analytic surface.
    """
    from .teacher import surface_hits, teacher_normal

    hits = surface_hits(pose_a, teacher, samples)
    pts = hits.positions[hits.hit]
    return overlap_fraction(pts, teacher_normal(pts, teacher), pose_b)


def overlap_fraction(points: np.ndarray, normals: np.ndarray, pose_b: CameraPose) -> float:
    """Fraction of surface points inside pose_b's image and facing its camera."""
    if len(points) == 0:
        return 0.0
    _, _, inside = pose_b.pixel_index(points)
    facing = np.sum(normals * (pose_b.position - points), axis=-1) > 0
    return float(np.mean(inside & facing))
