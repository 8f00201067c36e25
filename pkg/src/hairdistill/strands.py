"""Strand growth: scalp roots, orientation-field tracing and alignment optimization."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .extract import TriangleMesh, VoxelMask
from .geomcore import normalize

log = logging.getLogger(__name__)

NEIGHBORS = 4
HAIR_MAGIC = "HAIR1"


class StrandError(ValueError):
    """Invalid strand data or a non-finite optimization energy."""


@dataclass
class Strand:
    vertices: np.ndarray
    root_index: int = -1

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float32).reshape(-1, 3)
        if len(self.vertices) < 2:
            raise StrandError("a strand needs at least two vertices")

    def __len__(self) -> int:
        return len(self.vertices)

    def segments(self) -> np.ndarray:
        return np.diff(self.vertices.astype(np.float64), axis=0)


@dataclass
class OrientationField:
    """Line directions (sign-free) at sample sites with a k-d tree over the sites."""

    sites: np.ndarray
    directions: np.ndarray
    tree: cKDTree = field(init=False, repr=False)

    def __post_init__(self):
        self.sites = np.asarray(self.sites, dtype=np.float64).reshape(-1, 3)
        self.directions = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        if len(self.sites) == 0:
            raise ValueError("orientation field needs at least one site")
        if self.sites.shape != self.directions.shape:
            raise ValueError("sites and directions differ in length")
        norm = np.linalg.norm(self.directions, axis=1)
        if np.any(np.abs(norm - 1.0) > 1e-6):
            raise ValueError("field directions must be unit vectors")
        self.directions = self.directions / norm[:, None]
        self.tree = cKDTree(self.sites)

    @classmethod
    def from_mesh(cls, mesh: TriangleMesh) -> "OrientationField":
        """Sites at the non-degenerate oriented vertices of a hair surface."""
        if mesh.orientation is None:
            raise ValueError("mesh has no orientation attribute")
        ok = np.linalg.norm(mesh.orientation, axis=1) > 0.5
        if mesh.degenerate is not None:
            ok &= ~mesh.degenerate
        return cls(mesh.vertices[ok], mesh.orientation[ok])

    @property
    def k(self) -> int:
        return min(NEIGHBORS, len(self.sites))

    def neighbors(self, x: np.ndarray):
        d, i = self.tree.query(np.atleast_2d(x), k=self.k)
        return np.asarray(d).reshape(len(np.atleast_2d(x)), -1), np.asarray(i).reshape(len(np.atleast_2d(x)), -1)


def blend(field: OrientationField, dist: np.ndarray, idx: np.ndarray, prev=None) -> np.ndarray:
    """Inverse-distance blend of neighbour lines, each flipped toward ``prev``."""
    dirs = field.directions[idx]
    ref = dirs[:, 0] if prev is None else np.broadcast_to(np.asarray(prev, dtype=np.float64), dirs[:, 0].shape)
    sign = np.where(np.einsum("nkc,nc->nk", dirs, ref) >= 0, 1.0, -1.0)
    exact = dist <= 1e-12
    w = np.where(exact.any(axis=1, keepdims=True), exact.astype(np.float64), 1.0 / np.maximum(dist, 1e-12))
    avg = np.einsum("nk,nkc->nc", w * sign, dirs)
    norm = np.linalg.norm(avg, axis=1)
    bad = norm < 1e-8 * w.sum(axis=1)
    out = avg / np.where(bad, 1.0, norm)[:, None]
    if bad.any():
        out[bad] = ref[bad]
    return out


def field_query(x, field: OrientationField, prev_dir=None) -> np.ndarray:
    """Unit line direction at each point (N, 3), sign-matched to ``prev_dir``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d, i = field.neighbors(x)
    out = blend(field, d, i, prev_dir)
    return out


class NeighborCache:
    """Exact k-nearest sites for slowly moving points.

    Each row keeps its k+1 nearest sites from the last tree query. The k-set
    cannot change while the point stays within half the gap between its
    k-th and (k+1)-th neighbour distances, so only rows whose point moved
    farther are queried again.
    """

    def __init__(self, field: OrientationField, rows: int):
        self.field = field
        self.anchor = np.full((rows, 3), np.inf)
        self.idx = np.zeros((rows, field.k), dtype=np.int64)
        self.slack = np.zeros(rows)

    def _requery(self, points: np.ndarray, rows: np.ndarray) -> None:
        k = self.field.k
        kk = min(k + 1, len(self.field.sites))
        d, i = self.field.tree.query(points, k=kk)
        d = np.asarray(d).reshape(len(rows), -1)
        i = np.asarray(i).reshape(len(rows), -1)
        self.anchor[rows] = points
        self.idx[rows] = i[:, :k]
        self.slack[rows] = 0.5 * (d[:, k] - d[:, k - 1]) if kk > k else np.inf

    def lookup(self, x: np.ndarray, rows: np.ndarray):
        """Distances and indices of the k nearest sites of points ``x`` held in ``rows``."""
        moved = np.linalg.norm(x - self.anchor[rows], axis=1)
        stale = ~(moved < self.slack[rows])
        if stale.any():
            self._requery(x[stale], rows[stale])
        idx = self.idx[rows]
        dist = np.linalg.norm(self.field.sites[idx] - x[:, None, :], axis=2)
        return dist, idx


# ---------------------------------------------------------------- roots and growth

@dataclass
class Roots:
    points: np.ndarray
    faces: np.ndarray
    barycentric: np.ndarray
    vertex_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.points)


def eligible_faces(scalp: TriangleMesh, volume: VoxelMask, dilation: int = 2) -> np.ndarray:
    cent = scalp.vertices[scalp.faces].mean(axis=1)
    return volume.dilate(dilation).contains(cent)


def sample_roots(scalp: TriangleMesh, volume: VoxelMask, count: int, rng: np.random.Generator,
                 dilation: int = 2) -> Roots:
    """Area-uniform points on scalp faces whose centroids lie near the hair volume."""
    empty = Roots(np.zeros((0, 3)), np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
    if count < 0:
        raise ValueError("root count must be non-negative")
    if count == 0 or scalp.is_empty:
        return empty
    ok = eligible_faces(scalp, volume, dilation)
    if not ok.any():
        log.warning("no scalp face lies inside the hair volume; no roots sampled")
        return empty
    cand = np.nonzero(ok)[0]
    tri = scalp.vertices[scalp.faces[cand]]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    faces = cand[rng.choice(len(cand), size=count, p=area / area.sum())]
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    v = scalp.vertices[scalp.faces[faces]]
    pts = np.einsum("nk,nkc->nc", bary, v)
    vid = scalp.faces[faces, np.argmax(bary, axis=1)]
    return Roots(pts, faces, bary, vid)


def scalp_normals(scalp: TriangleMesh, roots: Roots) -> np.ndarray:
    """Outward unit normal of the scalp face under each root."""
    return scalp.face_normals()[roots.faces]


def _stored(x: np.ndarray) -> np.ndarray:
    """Round to the float32 values strands are stored with, so every check sees stored positions."""
    return x.astype(np.float32).astype(np.float64)


def grow_strands(roots: np.ndarray, field: OrientationField, inside, step: float = 0.01,
                 max_vertices: int = 100, initial_dir=(0.0, -1.0, 0.0)) -> list:
    """Trace every root through the field; returns one vertex array per root.

    ``inside(points) -> bool`` is the growth volume. A root outside it gives
    a single-vertex array (rejected). Tracing stops before the first vertex
    that would leave the volume. ``initial_dir`` (one vector or one per root)
    only picks the sign of the first line direction.
    """
    roots = _stored(np.atleast_2d(np.asarray(roots, dtype=np.float64)))
    n = len(roots)
    if max_vertices < 1:
        raise ValueError("max_vertices must be at least 1")
    paths = np.zeros((n, max_vertices, 3))
    paths[:, 0] = roots
    length = np.ones(n, dtype=np.int64)
    active = inside(roots) if n else np.zeros(0, dtype=bool)
    prev = np.broadcast_to(normalize(np.asarray(initial_dir, dtype=np.float64)), (n, 3)).copy()
    if n and not np.all(np.isfinite(prev)):
        raise ValueError("initial direction must be finite and non-zero")
    for i in range(1, max_vertices):
        rows = np.nonzero(active)[0]
        if len(rows) == 0:
            break
        x = paths[rows, i - 1]
        d = field_query(x, field, prev[rows])
        nxt = _stored(x + step * d)
        ok = inside(nxt)
        grow = rows[ok]
        paths[grow, i] = nxt[ok]
        prev[grow] = d[ok]
        length[grow] += 1
        active[rows[~ok]] = False
    return [paths[j, :length[j]] for j in range(n)]


def grow_strand(root, field: OrientationField, inside, step: float = 0.01, max_vertices: int = 100,
                initial_dir=(0.0, -1.0, 0.0)) -> Strand | None:
    """Single-root tracing; None when the root is outside or no step fits."""
    path = grow_strands(root, field, inside, step, max_vertices, initial_dir)[0]
    return Strand(path) if len(path) >= 2 else None


# ---------------------------------------------------------------- optimization

@dataclass(frozen=True)
class StrandWeights:
    align: float = 1.0
    curvature: float = 0.1
    volume: float = 10.0


class SignedDistance:
    """Trilinear positive-inside distance of a voxel mask, cropped to its bounding box."""

    def __init__(self, mask: VoxelMask, pad: int = 4):
        occ = mask.occupancy
        self.spec = mask.spec
        if not occ.any():
            raise ValueError("signed distance of an empty mask")
        lo = np.maximum(np.min(np.nonzero(occ), axis=1) - pad, 0)
        hi = np.minimum(np.max(np.nonzero(occ), axis=1) + pad + 1, self.spec.resolution)
        crop = occ[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        h = tuple(self.spec.spacing)
        self.values = (ndimage.distance_transform_edt(crop, sampling=h)
                       - ndimage.distance_transform_edt(~crop, sampling=h)).astype(np.float32)
        self.offset = lo
        self.outside = -float(np.linalg.norm(self.spec.spacing)) * pad

    def __call__(self, x: np.ndarray) -> np.ndarray:
        q = (self.spec.to_index(np.atleast_2d(x)) - self.offset).T
        return ndimage.map_coordinates(self.values, q, order=1, mode="nearest")

    def gradient(self, x: np.ndarray) -> np.ndarray:
        h = float(self.spec.spacing.min())
        g = np.empty((len(x), 3))
        for k in range(3):
            e = np.zeros(3)
            e[k] = 0.5 * h
            g[:, k] = (self(x + e) - self(x - e)) / h
        return g


@dataclass
class _Pack:
    x: np.ndarray        # (S, L, 3)
    n: np.ndarray        # vertex counts
    vmask: np.ndarray    # (S, L)
    smask: np.ndarray    # (S, L-1)
    cmask: np.ndarray    # (S, L-2) curvature terms


def _pack(strands: list) -> _Pack:
    n = np.array([len(s) for s in strands], dtype=np.int64)
    L = int(n.max())
    x = np.zeros((len(strands), L, 3))
    for j, s in enumerate(strands):
        x[j, :n[j]] = s.vertices
        x[j, n[j]:] = s.vertices[-1]
    ar = np.arange(L)
    vmask = ar[None, :] < n[:, None]
    return _Pack(x, n, vmask, ar[None, :-1] < (n - 1)[:, None], ar[None, :-2] < (n - 2)[:, None])


@dataclass
class OptimizeResult:
    strands: list
    energy: float
    alignment: list
    energies: list


class _Energy:
    """Per-strand energy terms and gradients with the field frozen at the midpoints."""

    def __init__(self, field, cache, sd, inside, weights, step):
        self.field, self.cache, self.sd, self.inside = field, cache, sd, inside
        self.w, self.h = weights, step

    def terms(self, x, p: _Pack, rows):
        seg = np.diff(x, axis=1)
        slen = np.linalg.norm(seg, axis=2)
        u = seg / np.maximum(slen, 1e-300)[..., None]
        mid = 0.5 * (x[:, 1:] + x[:, :-1])
        sm = p.smask[rows]
        flat_rows = np.repeat(rows, seg.shape[1])[sm.reshape(-1)]
        cache_rows = flat_rows * (p.x.shape[1] - 1) + np.tile(np.arange(seg.shape[1]), len(rows))[sm.reshape(-1)]
        f = np.zeros_like(seg)
        if sm.any():
            d, i = self.cache.lookup(mid[sm], cache_rows)
            f[sm] = blend(self.field, d, i, u[sm])
        cos = np.abs(np.sum(u * f, axis=2)) * sm
        align = cos.sum(axis=1)
        e_align = np.sum((1.0 - cos) * sm, axis=1)
        curv = x[:, :-2] - 2 * x[:, 1:-1] + x[:, 2:]
        e_curv = np.sum(np.sum(curv ** 2, axis=2) * p.cmask[rows], axis=1)
        vm = p.vmask[rows]
        sdv = np.zeros(vm.shape)
        if self.w.volume:
            sdv[vm] = self.sd(x[vm])
        pen = np.maximum(0.0, -sdv) * vm
        e_vol = np.sum(pen ** 2, axis=1)
        energy = self.w.align * e_align + self.w.curvature * e_curv + self.w.volume * e_vol
        return dict(energy=energy, align=align, u=u, f=f, slen=slen, curv=curv, pen=pen, cos=cos)

    def gradient(self, x, p: _Pack, rows, t) -> np.ndarray:
        g = np.zeros_like(x)
        sm = p.smask[rows][..., None]
        c = np.sum(t["u"] * t["f"], axis=2, keepdims=True)
        # d(1 - |u.f|)/d seg = -sign(u.f) (f - (u.f) u) / |seg|
        gs = -np.sign(c) * (t["f"] - c * t["u"]) / np.maximum(t["slen"], 1e-300)[..., None] * sm
        gs *= self.w.align
        g[:, 1:] += gs
        g[:, :-1] -= gs
        r = t["curv"] * p.cmask[rows][..., None] * (2.0 * self.w.curvature)
        g[:, :-2] += r
        g[:, 1:-1] -= 2 * r
        g[:, 2:] += r
        out = t["pen"] > 0
        if out.any() and self.w.volume:
            g[out] += (-2.0 * self.w.volume * t["pen"][out])[:, None] * self.sd.gradient(x[out])
        g[:, 0] = 0.0
        g *= p.vmask[rows][..., None]
        return g


def optimize_strands(strands: list, field: OrientationField, inside, sd, weights: StrandWeights = StrandWeights(),
                     iterations: int = 200, step: float = 0.01, max_move: float = 0.1,
                     min_rate: float = 1e-6) -> OptimizeResult:
    """Descend E per strand with step halving; roots stay fixed.

    A step is kept only when the strand's energy does not increase, its
    alignment sum does not decrease, every vertex stays inside the growth
    volume and every segment length stays within [h/4, 4h]. Otherwise the
    strand's step size is halved. ``max_move`` caps the first move of any
    vertex at that fraction of ``step``.
    """
    if not strands:
        return OptimizeResult([], 0.0, [], [])
    p = _pack(strands)
    S, L, _ = p.x.shape
    cache = NeighborCache(field, S * max(L - 1, 0))
    energy = _Energy(field, cache, sd, inside, weights, step)
    allr = np.arange(S)
    t = energy.terms(p.x, p, allr)
    E, A = t["energy"], t["align"]
    nseg = max(int(p.smask.sum()), 1)
    energies, alignment = [float(E.sum())], [float(A.sum()) / nseg]
    if not np.all(np.isfinite(E)):
        raise StrandError("non-finite strand energy")
    rate = np.full(S, np.nan)
    live = np.ones(S, dtype=bool)
    if weights.align == 0 and weights.curvature == 0 and weights.volume == 0:
        live[:] = False
    grads = np.zeros_like(p.x)
    fresh = np.ones(S, dtype=bool)
    for _ in range(iterations):
        rows = np.nonzero(live)[0]
        if len(rows) == 0:
            break
        need = rows[fresh[rows]]
        if len(need):
            tn = energy.terms(p.x[need], p, need)
            grads[need] = energy.gradient(p.x[need], p, need, tn)
            fresh[need] = False
            gmax = np.abs(grads[need]).max(axis=(1, 2))
            first = np.isnan(rate[need])
            rate[need[first]] = max_move * step / np.maximum(gmax[first], 1e-300)
            still = gmax < 1e-12
            live[need[still]] = False
            rows = np.nonzero(live)[0]
            if len(rows) == 0:
                break
        cand = _stored(p.x[rows] - rate[rows, None, None] * grads[rows])
        tc = energy.terms(cand, p, rows)
        seg_ok = np.all(((tc["slen"] >= 0.25 * step) & (tc["slen"] <= 4.0 * step)) | ~p.smask[rows], axis=1)
        vm = p.vmask[rows]
        ins = np.ones(vm.shape, dtype=bool)
        ins[vm] = inside(cand[vm])
        ok = (tc["energy"] <= E[rows]) & (tc["align"] >= A[rows]) & seg_ok & np.all(ins, axis=1)
        acc, rej = rows[ok], rows[~ok]
        p.x[acc] = cand[ok]
        E[acc], A[acc] = tc["energy"][ok], tc["align"][ok]
        fresh[acc] = True
        rate[rej] *= 0.5
        live[rej[rate[rej] * np.abs(grads[rej]).max(axis=(1, 2)) < min_rate * step]] = False
        if not np.all(np.isfinite(E)):
            raise StrandError("non-finite strand energy")
        energies.append(float(E.sum()))
        alignment.append(float(A.sum()) / nseg)
    out = [Strand(p.x[j, :p.n[j]], s.root_index) for j, s in enumerate(strands)]
    return OptimizeResult(out, energies[-1], alignment, energies)


def mean_alignment(strands: list, field: OrientationField) -> float:
    """Mean |cos| between segments and the field at their midpoints."""
    if not strands:
        return float("nan")
    seg = np.concatenate([s.segments() for s in strands])
    mid = np.concatenate([0.5 * (s.vertices[1:].astype(np.float64) + s.vertices[:-1]) for s in strands])
    u = normalize(seg)
    f = field_query(mid, field, u)
    return float(np.mean(np.abs(np.sum(u * f, axis=1))))


# ---------------------------------------------------------------- driver

@dataclass(frozen=True)
class GrowthConfig:
    count: int = 10000
    step: float = 0.01
    max_vertices: int = 100
    iterations: int = 200
    w_align: float = 1.0
    w_curvature: float = 0.1
    w_volume: float = 10.0
    dilation: int = 1
    initial_dir: tuple | None = None
    max_rounds: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.count < 0 or self.step <= 0 or self.max_vertices < 2 or self.iterations < 0:
            raise ValueError("need count >= 0, step > 0, max_vertices >= 2 and iterations >= 0")
        if min(self.w_align, self.w_curvature, self.w_volume) < 0:
            raise ValueError("strand energy weights must be non-negative")
        if self.initial_dir is not None:
            object.__setattr__(self, "initial_dir", tuple(float(v) for v in self.initial_dir))

    @property
    def weights(self) -> StrandWeights:
        return StrandWeights(self.w_align, self.w_curvature, self.w_volume)


@dataclass
class HairResult:
    strands: list
    roots: Roots
    energy: float
    alignment: list
    rejected: int


def grow_hair(scalp: TriangleMesh, volume: VoxelMask, field: OrientationField,
              config: GrowthConfig = GrowthConfig(), rng: np.random.Generator | None = None,
              optimize: bool = True) -> HairResult:
    """Sample roots, grow and optimize ``config.count`` strands.

    Strands leave the scalp along the field line sign that points away from
    it unless ``config.initial_dir`` fixes one direction for all roots.

    Roots whose strand cannot take a single step inside the volume are
    rejected and redrawn, up to ``max_rounds`` rounds.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    grow_mask = volume.dilate(config.dilation)
    inside = grow_mask.contains
    kept, parts, rejected = [], [], 0
    need = config.count
    for _ in range(config.max_rounds):
        if need <= 0:
            break
        roots = sample_roots(scalp, volume, need, rng)
        if len(roots) == 0:
            break
        start = scalp_normals(scalp, roots) if config.initial_dir is None else config.initial_dir
        paths = grow_strands(roots.points, field, inside, config.step, config.max_vertices, start)
        good = np.array([len(q) >= 2 for q in paths], dtype=bool)
        rejected += int((~good).sum())
        for j in np.nonzero(good)[0]:
            kept.append(Strand(paths[j], int(roots.vertex_ids[j])))
        parts.append((roots, good))
        need = config.count - len(kept)
    if need > 0 and config.count > 0:
        log.warning("only %d of %d strands could be grown", len(kept), config.count)
    roots = Roots(*(np.concatenate([getattr(r, k)[g] for r, g in parts]) if parts else np.zeros((0, 3))
                    for k in ("points", "faces", "barycentric", "vertex_ids")))
    if not kept:
        return HairResult([], roots, 0.0, [], rejected)
    if optimize and config.iterations > 0:
        res = optimize_strands(kept, field, inside, SignedDistance(volume), config.weights,
                               config.iterations, config.step)
        return HairResult(res.strands, roots, res.energy, res.alignment, rejected)
    return HairResult(kept, roots, 0.0, [mean_alignment(kept, field)], rejected)


# ---------------------------------------------------------------- file format

def format_strands(strands: list) -> str:
    lines = [f"{HAIR_MAGIC} {len(strands)}"]
    for s in strands:
        v = np.asarray(s.vertices, dtype=np.float32)
        lines.append(str(len(v)))
        lines += ["%.9g %.9g %.9g" % (float(a), float(b), float(c)) for a, b, c in v]
    return "\n".join(lines) + "\n"


def export_strands(strands: list, path) -> None:
    try:
        with open(path, "w") as fh:
            fh.write(format_strands(strands))
    except OSError as exc:
        raise OSError(f"cannot write strands to {path}: {exc}") from exc


def import_strands(path) -> list:
    with open(path) as fh:
        tokens = fh.read().split("\n")
    head = tokens[0].split()
    if len(head) != 2 or head[0] != HAIR_MAGIC:
        raise StrandError(f"{path}: missing {HAIR_MAGIC} header")
    count = int(head[1])
    out, pos = [], 1
    for _ in range(count):
        n = int(tokens[pos])
        rows = [line.split() for line in tokens[pos + 1:pos + 1 + n]]
        if len(rows) != n or any(len(r) != 3 for r in rows):
            raise StrandError(f"{path}: truncated strand record")
        out.append(Strand(np.array(rows, dtype=np.float64).astype(np.float32)))
        pos += 1 + n
    return out
