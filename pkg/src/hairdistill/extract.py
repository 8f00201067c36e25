"""Explicit geometry: iso-surfaces, hair surface, scalp proxy, extrusion and voxel booleans."""

from __future__ import annotations

import logging
import struct
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from skimage import measure

from . import render
from . import student as st
from .geomcore import SCENE_MAX, SCENE_MIN, GridSpec, normalize

log = logging.getLogger(__name__)

VOXEL_MAGIC = b"VXM1"
# irrational sub-cell ray offsets keep parity rays off mesh edges and vertices
_RAY_JITTER = (1.3107e-6, 2.7183e-6)


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    semantic: np.ndarray | None = None
    orientation: np.ndarray | None = None
    degenerate: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("mesh has non-finite vertices")

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def face_normals(self, unit: bool = True) -> np.ndarray:
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return normalize(n) if unit else n

    def area(self) -> float:
        return 0.5 * float(np.linalg.norm(self.face_normals(unit=False), axis=1).sum())

    def signed_volume(self) -> float:
        v = self.vertices[self.faces]
        return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted vertex normals."""
        fn = self.face_normals(unit=False)
        out = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(out, self.faces[:, k], fn)
        return normalize(out)

    def edge_counts(self):
        """Undirected edges (E, 2) and how many faces use each."""
        e = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        return np.unique(e, axis=0, return_counts=True)

    def is_watertight(self) -> bool:
        """Every edge shared by exactly two triangles."""
        if self.is_empty:
            return False
        _, counts = self.edge_counts()
        return bool(np.all(counts == 2))

    def euler_characteristic(self) -> int:
        used = np.unique(self.faces)
        edges, _ = self.edge_counts()
        return len(used) - len(edges) + len(self.faces)

    def num_components(self) -> int:
        return int(_face_components(self)[0]) if not self.is_empty else 0

    def submesh(self, face_mask: np.ndarray) -> "TriangleMesh":
        """Keep the selected faces and drop vertices no longer referenced."""
        faces = self.faces[face_mask]
        used = np.unique(faces)
        remap = np.full(len(self.vertices), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        pick = lambda a: None if a is None else a[used]
        return TriangleMesh(self.vertices[used], remap[faces], pick(self.semantic),
                            pick(self.orientation), pick(self.degenerate))

    def save_obj(self, path) -> None:
        save_obj(self, path)


def _face_components(mesh: TriangleMesh):
    f = mesh.faces
    n = len(mesh.vertices)
    rows = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
    cols = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    count, labels = connected_components(graph, directed=False)
    return count, labels[f[:, 0]]


def largest_component(mesh: TriangleMesh) -> TriangleMesh:
    """Keep the connected component with the most faces (drops stray floaters)."""
    if mesh.is_empty:
        return mesh
    count, face_label = _face_components(mesh)
    if count == 1:
        return mesh
    sizes = np.bincount(face_label)
    return mesh.submesh(face_label == np.argmax(sizes))


# ---------------------------------------------------------------- iso-surface

def marching_cubes(values: np.ndarray, spec: GridSpec, level: float = 0.0,
                   inside_sign: int | None = None) -> TriangleMesh:
    """Iso-surface of grid node values with normals pointing out of the inside region.

    ``inside_sign`` says which side counts as interior (default: the SDF sign
    convention). A grid that never crosses ``level`` gives an empty mesh.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape != spec.shape:
        raise ValueError(f"values shape {values.shape} does not match grid {spec.shape}")
    sign = render.SDF_SIGN if inside_sign is None else inside_sign
    f = sign * (values - level)
    if not (f.max() > 0 and f.min() < 0):
        return TriangleMesh.empty()
    verts, faces, _, _ = measure.marching_cubes(f, 0.0, spacing=tuple(spec.spacing),
                                                method="lorensen", gradient_direction="descent")
    verts = verts + np.asarray(spec.bounds_min)
    # skimage winds counter-clockwise seen from the low side for "descent"
    return TriangleMesh(verts, faces[:, ::-1])


def _coarse_index(n: int, stride: int) -> np.ndarray:
    idx = np.arange(0, n, stride)
    return idx if idx[-1] == n - 1 else np.append(idx, n - 1)


def sdf_grid(fn, spec: GridSpec, stride: int = 4, lipschitz: float = 2.0) -> np.ndarray:
    """Evaluate ``fn`` (points -> values) on every grid node, coarse to fine.

    A coarse lattice is evaluated first. Coarse cells whose corners change
    sign or come within ``lipschitz`` cell diagonals of zero are refined with
    exact node values; elsewhere trilinear interpolation of the coarse
    values (which cannot change sign there) fills in.
    """
    R = spec.resolution
    axes = spec.axes()
    if stride <= 1 or R <= 2 * stride:
        return np.asarray(fn(spec.points()), dtype=np.float64).reshape(spec.shape)
    ci = _coarse_index(R, stride)
    cg = np.stack(np.meshgrid(axes[0][ci], axes[1][ci], axes[2][ci], indexing="ij"), -1)
    coarse = np.asarray(fn(cg.reshape(-1, 3)), dtype=np.float64).reshape((len(ci),) * 3)
    tau = lipschitz * stride * float(np.linalg.norm(spec.spacing))
    corners = [coarse[a:len(ci) - 1 + a, b:len(ci) - 1 + b, c:len(ci) - 1 + c]
               for a in (0, 1) for b in (0, 1) for c in (0, 1)]
    lo = np.min(corners, axis=0)
    hi = np.max(corners, axis=0)
    near = (np.min(np.abs(corners), axis=0) < tau) | ((lo < 0) & (hi > 0))
    interp = RegularGridInterpolator([a[ci] for a in axes], coarse)
    out = np.empty(spec.shape)
    # fill slab by slab to bound memory
    ax1, ax2 = axes[1], axes[2]
    g1, g2 = np.meshgrid(ax1, ax2, indexing="ij")
    for i in range(R):
        pts = np.stack([np.full_like(g1, axes[0][i]), g1, g2], -1).reshape(-1, 3)
        out[i] = interp(pts).reshape(R, R)
    refine = np.zeros(spec.shape, dtype=bool)
    for cx, cy, cz in zip(*np.nonzero(near)):
        refine[ci[cx]:ci[cx + 1] + 1, ci[cy]:ci[cy + 1] + 1, ci[cz]:ci[cz + 1] + 1] = True
    idx = np.nonzero(refine.reshape(-1))[0]
    if len(idx):
        pts = spec.to_world(np.stack(np.unravel_index(idx, spec.shape), -1).astype(np.float64))
        out.reshape(-1)[idx] = np.asarray(fn(pts), dtype=np.float64)
    return out


def student_sdf_grid(params: st.PsiParams, w, spec: GridSpec, stride: int = 4) -> np.ndarray:
    return sdf_grid(lambda p: st.sdf_values(p, w, params), spec, stride)


def vertex_attributes(mesh: TriangleMesh, params: st.PsiParams, w) -> TriangleMesh:
    """Attach hair probability and tangential orientation to every vertex."""
    if mesh.is_empty or len(mesh.vertices) == 0:
        return TriangleMesh(mesh.vertices, mesh.faces, np.zeros(len(mesh.vertices)),
                            np.zeros((len(mesh.vertices), 3)), np.zeros(len(mesh.vertices), dtype=bool))
    out = st.evaluate(mesh.vertices, w, params, with_grad=True)
    o = out["o"].astype(np.float64)
    n = normalize(out["grad"].astype(np.float64))
    o = o - np.sum(o * n, axis=1, keepdims=True) * n
    norm = np.linalg.norm(o, axis=1)
    degenerate = (norm < 1e-8) | out["degenerate"]
    o = np.where(degenerate[:, None], 0.0, o / np.maximum(norm, 1e-300)[:, None])
    # one more projection removes rounding left by the normalization
    o -= np.sum(o * n, axis=1, keepdims=True) * n
    o = np.where(degenerate[:, None], 0.0, normalize(o))
    return TriangleMesh(mesh.vertices, mesh.faces, out["m"].astype(np.float64), o, degenerate)


def hair_surface(mesh: TriangleMesh, threshold: float = 0.5):
    """Faces whose three vertices are hair; returns (mesh, kept-face fraction)."""
    if mesh.semantic is None:
        raise ValueError("mesh has no semantic attribute")
    if mesh.is_empty:
        return TriangleMesh.empty(), 0.0
    keep = np.all(mesh.semantic[mesh.faces] >= threshold, axis=1)
    return mesh.submesh(keep), float(keep.mean())


# ---------------------------------------------------------------- scalp proxy

@dataclass(frozen=True)
class ScalpFit:
    """Similarity placing the canonical unit-sphere scalp cap inside every head.

    The canonical mesh is a UV sphere of radius 1 at the origin; the cap is
    its upper hemisphere. ``scale`` acts about the cap's vertex centroid.
    """

    translation: tuple = (0.0, 0.0, 0.0)
    scale: float = 1.0
    rings: int = 16
    segments: int = 48
    canonical: str = "uv_cap"

    def __post_init__(self):
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.rings < 1 or self.segments < 3:
            raise ValueError("need rings >= 1 and segments >= 3")
        if self.canonical != "uv_cap":
            raise ValueError(f"unknown canonical scalp {self.canonical!r}")
        v = self.transform(_uv_sphere(self.rings, self.segments, full=False)[0])
        if v.min() < SCENE_MIN or v.max() > SCENE_MAX:
            raise ValueError("scalp leaves the scene bounds")

    @classmethod
    def default(cls, radius: float = 0.40, center=(0.0, 0.0, 0.0), rings: int = 16,
                segments: int = 48) -> "ScalpFit":
        """Fit whose sphere has the given radius and centre."""
        g = canonical_centroid(rings, segments)
        t = np.asarray(center, dtype=np.float64) - g * (1.0 - radius)
        return cls(tuple(t), radius, rings, segments)

    @property
    def centroid(self) -> np.ndarray:
        return canonical_centroid(self.rings, self.segments) + np.asarray(self.translation)

    @property
    def center(self) -> np.ndarray:
        """Centre of the sphere the scalp cap lies on."""
        return self.transform(np.zeros((1, 3)))[0]

    @property
    def radius(self) -> float:
        return float(self.scale)

    def transform(self, v: np.ndarray) -> np.ndarray:
        g = canonical_centroid(self.rings, self.segments)
        return g + self.scale * (np.asarray(v) - g) + np.asarray(self.translation)

    def inside_depth(self, x: np.ndarray) -> np.ndarray:
        """Depth below the scalp sphere surface (positive inside the solid)."""
        return self.radius - np.linalg.norm(np.asarray(x) - self.center, axis=-1)

    def inside(self, x: np.ndarray) -> np.ndarray:
        return self.inside_depth(x) > 0

    def to_config(self, prefix: str = "extract.scalp_") -> dict:
        return {prefix + "translation": " ".join(repr(v) for v in self.translation),
                prefix + "scale": repr(self.scale), prefix + "rings": str(self.rings),
                prefix + "segments": str(self.segments)}


def _uv_sphere(rings: int, segments: int, full: bool):
    """Unit UV sphere (or its upper hemisphere) with outward winding.

    Vertex order: north pole, then rings from the pole downward, each ring
    counter-clockwise seen from above starting at +x.
    """
    n_rings = 2 * rings if full else rings
    phi = np.arange(segments) * 2 * np.pi / segments
    verts = [np.array([[0.0, 1.0, 0.0]])]
    for i in range(1, n_rings + (0 if full else 1)):
        th = 0.5 * np.pi * i / rings
        verts.append(np.stack([np.sin(th) * np.cos(phi), np.full(segments, np.cos(th)),
                               -np.sin(th) * np.sin(phi)], -1))
    faces = []
    s = np.arange(segments)
    nxt = (s + 1) % segments
    faces.append(np.stack([np.zeros(segments, dtype=np.int64), 1 + s, 1 + nxt], -1))
    last_ring = n_rings - 1 if full else rings
    for i in range(1, last_ring):
        a = 1 + (i - 1) * segments
        b = 1 + i * segments
        faces.append(np.stack([a + s, b + s, b + nxt], -1))
        faces.append(np.stack([a + s, b + nxt, a + nxt], -1))
    if full:
        verts.append(np.array([[0.0, -1.0, 0.0]]))
        south = 1 + (n_rings - 1) * segments
        a = 1 + (n_rings - 2) * segments
        faces.append(np.stack([a + s, np.full(segments, south), a + nxt], -1))
    return np.concatenate(verts), np.concatenate(faces).astype(np.int64)


def canonical_centroid(rings: int = 16, segments: int = 48) -> np.ndarray:
    return _uv_sphere(rings, segments, full=False)[0].mean(axis=0)


def universal_scalp(fit: ScalpFit) -> TriangleMesh:
    """The canonical scalp cap placed by ``fit``."""
    v, f = _uv_sphere(fit.rings, fit.segments, full=False)
    return TriangleMesh(fit.transform(v), f)


def head_proxy(fit: ScalpFit, pad: float = 0.0) -> TriangleMesh:
    """Closed sphere the scalp cap lies on, circumscribing the true sphere plus ``pad``."""
    v, f = _uv_sphere(fit.rings, fit.segments, full=True)
    # faces of an inscribed UV sphere sag inward by at most 1 - cos(half step)
    half = 0.5 * max(np.pi / fit.rings * 0.5, 2 * np.pi / fit.segments)
    r = (fit.radius + pad) / np.cos(half) ** 2
    return TriangleMesh(fit.center + r * v, f)


# ---------------------------------------------------------------- extrusion

def boundary_edges(mesh: TriangleMesh) -> np.ndarray:
    """Directed edges (a, b) used by exactly one face, in that face's winding."""
    directed = mesh.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    key = np.sort(directed, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    return directed[counts[inv.reshape(-1)] == 1]


def extrude_inward(surface: TriangleMesh, inside_depth, margin: float = 0.02,
                   max_distance: float = 1.5, step: float = 0.01, fallback=None):
    """Close ``surface`` into a shell whose inner copy lies inside a solid.

    ``inside_depth(x)`` is positive inside the solid. Each vertex is moved
    along its inward normal to the nearest point deeper than ``margin``.
    Vertices whose ray never gets there head for ``fallback`` (default: the
    origin) instead and stop at the first such point, or at ``fallback``
    itself. Returns (shell mesh, number of fallback vertices).
    """
    if surface.is_empty:
        return TriangleMesh.empty(), 0
    v = surface.vertices
    n = surface.vertex_normals()
    target = np.zeros(3) if fallback is None else np.asarray(fallback, dtype=np.float64)
    inner, found = _march(v, n, inside_depth, margin, max_distance, step)
    misses = int((~found).sum())
    if misses:
        log.warning("%d extrusion rays never entered the solid; rerouted to the scalp centroid", misses)
        vm = v[~found]
        span = np.linalg.norm(target - vm, axis=1)
        d = (target - vm) / np.maximum(span, 1e-12)[:, None]
        p, ok = _march(vm, -d, inside_depth, margin, float(span.max()) if len(span) else 0.0, step)
        p[~ok] = target
        inner[~found] = p
    nv = len(v)
    f = surface.faces
    walls = []
    for a, b in boundary_edges(surface):
        walls.append([b, a, a + nv])
        walls.append([b, a + nv, b + nv])
    walls = np.asarray(walls, dtype=np.int64).reshape(-1, 3)
    faces = np.concatenate([f, f[:, ::-1] + nv, walls])
    return TriangleMesh(np.concatenate([v, inner]), faces), misses


def _march(v, n, inside_depth, margin, max_distance, step):
    """First point along -n deeper than ``margin``, refined by bisection."""
    nv = len(v)
    ts = np.arange(0.0, max_distance + step, step)
    hit_t = np.full(nv, np.nan)
    for t in ts:
        open_ = np.isnan(hit_t)
        if not open_.any():
            break
        ok = inside_depth(v[open_] - t * n[open_]) > margin
        hit_t[np.nonzero(open_)[0][ok]] = t
    found = ~np.isnan(hit_t)
    lo = np.where(found, np.maximum(hit_t - step, 0.0), 0.0)
    hi = np.where(found, hit_t, 0.0)
    for _ in range(30):
        mid = 0.5 * (lo + hi)
        ok = inside_depth(v - mid[:, None] * n) > margin
        hi = np.where(ok, mid, hi)
        lo = np.where(ok, lo, mid)
    return v - hi[:, None] * n, found


# ---------------------------------------------------------------- voxels

@dataclass
class VoxelMask:
    """One occupancy bit per grid node (nodes act as cell centres)."""

    spec: GridSpec
    occupancy: np.ndarray

    def __post_init__(self):
        self.occupancy = np.asarray(self.occupancy, dtype=bool)
        if self.occupancy.shape != self.spec.shape:
            raise ValueError(f"occupancy shape {self.occupancy.shape} does not match {self.spec.shape}")

    @classmethod
    def empty(cls, spec: GridSpec) -> "VoxelMask":
        return cls(spec, np.zeros(spec.shape, dtype=bool))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spec.spacing))

    def count(self) -> int:
        return int(np.count_nonzero(self.occupancy))

    def volume(self) -> float:
        return self.count() * self.cell_volume

    def dilate(self, cells: int = 1) -> "VoxelMask":
        """Dilation with the 26-neighbourhood, ``cells`` times."""
        if cells <= 0:
            return VoxelMask(self.spec, self.occupancy.copy())
        s = np.ones((3, 3, 3), dtype=bool)
        return VoxelMask(self.spec, ndimage.binary_dilation(self.occupancy, s, iterations=cells))

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Occupancy of the cell nearest each point; False outside the grid."""
        idx, ok = self.spec.nearest_index(np.atleast_2d(points))
        return ok & self.occupancy[idx[:, 0], idx[:, 1], idx[:, 2]]

    def signed_distance(self) -> np.ndarray:
        """Positive-inside Euclidean distance (world units) at every node."""
        h = tuple(self.spec.spacing)
        occ = self.occupancy
        if not occ.any():
            return -np.full(self.spec.shape, np.inf)
        inside = ndimage.distance_transform_edt(occ, sampling=h)
        outside = ndimage.distance_transform_edt(~occ, sampling=h)
        return inside - outside

    def save(self, path) -> None:
        save_voxels(self, path)

    @classmethod
    def load(cls, path) -> "VoxelMask":
        return load_voxels(path)


def _axis_parity(tris: np.ndarray, spec: GridSpec, axis: int) -> np.ndarray:
    """Odd-crossing parity for rays cast along ``axis`` through every node."""
    R = spec.resolution
    u, v = [a for a in range(3) if a != axis]
    q = spec.to_index(tris.reshape(-1, 3)).reshape(-1, 3, 3)
    pu = q[:, :, u] - _RAY_JITTER[0]
    pv = q[:, :, v] - _RAY_JITTER[1]
    pw = q[:, :, axis]
    area = (pu[:, 1] - pu[:, 0]) * (pv[:, 2] - pv[:, 0]) - (pv[:, 1] - pv[:, 0]) * (pu[:, 2] - pu[:, 0])
    j0 = np.maximum(np.ceil(pu.min(1)), 0).astype(np.int64)
    j1 = np.minimum(np.floor(pu.max(1)), R - 1).astype(np.int64)
    k0 = np.maximum(np.ceil(pv.min(1)), 0).astype(np.int64)
    k1 = np.minimum(np.floor(pv.max(1)), R - 1).astype(np.int64)
    size = np.maximum(j1 - j0, k1 - k0) + 1
    live = (area != 0) & (j1 >= j0) & (k1 >= k0)
    counts = np.zeros(R ** 3, dtype=np.int64)
    for s in np.unique(size[live]):
        sel = np.nonzero(live & (size == s))[0]
        chunk = max(1, 2_000_000 // int(s * s))
        for a in range(0, len(sel), chunk):
            t = sel[a:a + chunk]
            off = np.arange(s)
            jj = j0[t, None, None] + off[None, :, None]
            kk = k0[t, None, None] + off[None, None, :]
            ok = (jj <= j1[t, None, None]) & (kk <= k1[t, None, None])
            ti = np.broadcast_to(t[:, None, None], ok.shape)[ok]
            jj = np.broadcast_to(jj, ok.shape)[ok]
            kk = np.broadcast_to(kk, ok.shape)[ok]
            au, av = pu[ti], pv[ti]
            # edge functions of the node against each triangle edge
            e0 = (au[:, 1] - au[:, 0]) * (kk - av[:, 0]) - (av[:, 1] - av[:, 0]) * (jj - au[:, 0])
            e1 = (au[:, 2] - au[:, 1]) * (kk - av[:, 1]) - (av[:, 2] - av[:, 1]) * (jj - au[:, 1])
            e2 = (au[:, 0] - au[:, 2]) * (kk - av[:, 2]) - (av[:, 0] - av[:, 2]) * (jj - au[:, 2])
            hit = ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))
            if not hit.any():
                continue
            ar = area[ti][hit]
            w = (e1[hit] * pw[ti[hit], 0] + e2[hit] * pw[ti[hit], 1] + e0[hit] * pw[ti[hit], 2]) / ar
            cell = np.ceil(w).astype(np.int64)
            keep = cell <= R - 1
            cell = np.maximum(cell[keep], 0)
            idx = [None] * 3
            idx[axis], idx[u], idx[v] = cell, jj[hit][keep], kk[hit][keep]
            counts += np.bincount(np.ravel_multi_index(idx, spec.shape), minlength=R ** 3)
    odd = (counts & 1).astype(np.uint8).reshape(spec.shape)
    return np.bitwise_xor.accumulate(odd, axis=axis).astype(bool)


def voxelize(mesh: TriangleMesh, spec: GridSpec) -> VoxelMask:
    """Inside test by ray parity along x, y and z with a 2-of-3 majority vote."""
    if mesh.is_empty:
        return VoxelMask.empty(spec)
    tris = mesh.vertices[mesh.faces]
    votes = np.zeros(spec.shape, dtype=np.uint8)
    for axis in range(3):
        votes += _axis_parity(tris, spec, axis)
    return VoxelMask(spec, votes >= 2)


def boolean_subtract(a: VoxelMask, b: VoxelMask) -> VoxelMask:
    if a.spec != b.spec:
        raise ValueError(f"grid specs differ: {a.spec} vs {b.spec}")
    return VoxelMask(a.spec, a.occupancy & ~b.occupancy)


def drop_small_components(mask: VoxelMask, min_cells: int) -> VoxelMask:
    """Clear face-connected islands with fewer than ``min_cells`` cells.

    Face connectivity matches the iso-surface, which separates cells that
    touch only along an edge or a corner.
    """
    if min_cells <= 1 or not mask.occupancy.any():
        return mask
    labels, n = ndimage.label(mask.occupancy)
    sizes = np.bincount(labels.reshape(-1), minlength=n + 1)
    keep = sizes >= min_cells
    keep[0] = False
    occ = keep[labels]
    # small enclosed voids are filled the same way
    holes, n = ndimage.label(~occ)
    sizes = np.bincount(holes.reshape(-1), minlength=n + 1)
    fill = sizes < min_cells
    fill[0] = False
    return VoxelMask(mask.spec, occ | fill[holes])


def mask_surface(mask: VoxelMask) -> TriangleMesh:
    """Closed iso-surface at 0.5 of the occupancy, padded so it never touches the border."""
    if not mask.occupancy.any():
        return TriangleMesh.empty()
    occ = np.pad(mask.occupancy.astype(np.float64), 1)
    h = mask.spec.spacing
    padded = GridSpec(mask.spec.resolution + 2, tuple(np.asarray(mask.spec.bounds_min) - h),
                      tuple(np.asarray(mask.spec.bounds_max) + h))
    return marching_cubes(occ, padded, 0.5, inside_sign=1)


# ---------------------------------------------------------------- pipeline

@dataclass(frozen=True)
class ExtractConfig:
    sdf_resolution: int = 256
    voxel_resolution: int = 256
    grid_stride: int = 4
    margin: float = 0.02
    hair_threshold: float = 0.5
    min_cells: int = 64
    scalp_radius: float = 0.40
    scalp_center: tuple = (0.0, 0.0, 0.0)
    scalp_rings: int = 16
    scalp_segments: int = 48

    def __post_init__(self):
        object.__setattr__(self, "scalp_center", tuple(float(v) for v in self.scalp_center))
        if self.sdf_resolution < 2 or self.voxel_resolution < 2:
            raise ValueError("grid resolutions must be >= 2")
        if self.margin < 0 or not 0 <= self.hair_threshold <= 1:
            raise ValueError("margin must be >= 0 and hair_threshold in [0, 1]")
        if len(self.scalp_center) != 3:
            raise ValueError("scalp_center needs three coordinates")

    def fit(self) -> ScalpFit:
        return ScalpFit.default(self.scalp_radius, self.scalp_center, self.scalp_rings, self.scalp_segments)

    @property
    def sdf_spec(self) -> GridSpec:
        return GridSpec(self.sdf_resolution)

    @property
    def voxel_spec(self) -> GridSpec:
        return GridSpec(self.voxel_resolution)


@dataclass
class HairVolume:
    mesh: TriangleMesh
    mask: VoxelMask
    hair: TriangleMesh
    head: TriangleMesh
    kept_fraction: float = 0.0
    timings: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def is_empty(self) -> bool:
        return self.mesh.is_empty


class _Clock:
    def __init__(self, timings: dict):
        self.timings = timings
        self.t = time.monotonic()

    def lap(self, stage: str) -> None:
        now = time.monotonic()
        self.timings[stage] = self.timings.get(stage, 0.0) + max(now - self.t, 0.0)
        self.t = now


def extract_head(params: st.PsiParams, w, spec: GridSpec, keep_largest: bool = True,
                 timings: dict | None = None, stride: int = 4) -> TriangleMesh:
    """Full head mesh with per-vertex attributes."""
    timings = {} if timings is None else timings
    clock = _Clock(timings)
    values = student_sdf_grid(params, w, spec, stride)
    clock.lap("grid_eval")
    mesh = marching_cubes(values, spec)
    if keep_largest:
        mesh = largest_component(mesh)
    clock.lap("marching_cubes")
    mesh = vertex_attributes(mesh, params, w)
    clock.lap("attributes")
    return mesh


def hair_volume_from_config(params: st.PsiParams, w, config: ExtractConfig = ExtractConfig()) -> HairVolume:
    return hair_volume(params, w, config.fit(), config.sdf_spec, config.voxel_spec, config.margin,
                       config.hair_threshold, config.min_cells, config.grid_stride)


def hair_volume(params: st.PsiParams, w, fit: ScalpFit, sdf_spec: GridSpec = GridSpec(256),
                voxel_spec: GridSpec = GridSpec(256), margin: float = 0.02,
                threshold: float = 0.5, min_cells: int = 64, stride: int = 4) -> HairVolume:
    """Closed hair volume between the student's hair surface and the scalp proxy."""
    timings: dict = {}
    start = time.monotonic()
    head = extract_head(params, w, sdf_spec, timings=timings, stride=stride)
    clock = _Clock(timings)
    hair, kept = hair_surface(head, threshold)
    clock.lap("hair_surface")
    out = HairVolume(TriangleMesh.empty(), VoxelMask.empty(voxel_spec), hair, head, kept, timings)
    if hair.is_empty:
        out.warnings.append("empty hair surface: no hair volume")
        log.warning(out.warnings[-1])
        timings["total"] = time.monotonic() - start
        return out
    shell, misses = extrude_inward(hair, fit.inside_depth, margin, fallback=fit.centroid)
    if misses:
        out.warnings.append(f"{misses} extrusion vertices rerouted to the scalp centroid")
    clock.lap("extrude")
    hair_mask = voxelize(shell, voxel_spec)
    # surface vertices sit half a cell from occupied centres, so a half-cell
    # pad keeps the volume's surface outside the scalp solid
    guard = 0.5 * float(np.linalg.norm(voxel_spec.spacing)) / np.sqrt(3.0) + 1e-9
    head_mask = voxelize(head_proxy(fit, guard), voxel_spec)
    clock.lap("voxelize")
    out.mask = drop_small_components(boolean_subtract(hair_mask, head_mask), min_cells)
    clock.lap("boolean")
    out.mesh = mask_surface(out.mask)
    clock.lap("volume_mesh")
    timings["total"] = time.monotonic() - start
    return out


# ---------------------------------------------------------------- serialization

def save_obj(mesh: TriangleMesh, path) -> None:
    lines = ["v %.9g %.9g %.9g" % tuple(p) for p in mesh.vertices]
    lines += ["f %d %d %d" % tuple(f + 1) for f in mesh.faces]
    if mesh.semantic is not None:
        lines.append("# sem")
        lines += ["# %.9g" % m for m in mesh.semantic]
    if mesh.orientation is not None:
        lines.append("# orient")
        lines += ["# %.9g %.9g %.9g" % tuple(o) for o in mesh.orientation]
    try:
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write mesh to {path}: {exc}") from exc


def load_obj(path) -> TriangleMesh:
    verts, faces, blocks, current = [], [], {"sem": [], "orient": []}, None
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
            elif parts[0] == "#":
                if len(parts) == 2 and parts[1] in blocks:
                    current = parts[1]
                elif current is not None:
                    blocks[current].append([float(x) for x in parts[1:]])
    sem = np.asarray(blocks["sem"]).reshape(-1) if blocks["sem"] else None
    orient = np.asarray(blocks["orient"]).reshape(-1, 3) if blocks["orient"] else None
    return TriangleMesh(np.asarray(verts).reshape(-1, 3), np.asarray(faces).reshape(-1, 3), sem, orient)


def save_voxels(mask: VoxelMask, path) -> None:
    s = mask.spec
    header = VOXEL_MAGIC + struct.pack("<Q6d", s.resolution, *s.bounds_min, *s.bounds_max)
    bits = np.packbits(mask.occupancy.reshape(-1), bitorder="little")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(bits.tobytes())


def load_voxels(path) -> VoxelMask:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != VOXEL_MAGIC:
        raise ValueError(f"{path}: not a voxel file")
    res, *b = struct.unpack_from("<Q6d", data, 4)
    spec = GridSpec(res, tuple(b[:3]), tuple(b[3:]))
    bits = np.frombuffer(data, dtype=np.uint8, offset=4 + struct.calcsize("<Q6d"))
    n = res ** 3
    if len(bits) * 8 < n:
        raise ValueError(f"{path}: truncated voxel data")
    occ = np.unpackbits(bits, count=n, bitorder="little").astype(bool)
    return VoxelMask(spec, occ.reshape(spec.shape))
