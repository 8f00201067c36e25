"""Distillation of analytic teacher heads into the student field.

Each iteration draws a latent, a first view and up to ``views_per_step - 1``
overlapping views from a fixed per-latent bank, renders a random subset of
the first view's rays through the student and combines the five losses.
Orientation supervision reprojects the first view's surface points into all
chosen views and compares against their Gabor orientation maps.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from .. import render
from .. import student as st
from ..geomcore import AngleMap, CameraPose, ImageBuffer, camera_rays, overlap_fraction
from ..teacher import (BETA_TEACHER, TeacherLatent, latent_features, teacher_normal,
                       teacher_render, teacher_sdf)
from .gabor import GaborBank, gabor_orient
from .losses import (LossTerms, LossWeights, angle_distance, loss_density, loss_image,
                     loss_projection, loss_semantic, loss_tangential, total_loss)

log = logging.getLogger(__name__)

ELEVATIONS = (-0.1, 0.1, 0.3, 0.5, 0.7)
DEPTH_TOLERANCE = 0.05


class TrainingAborted(RuntimeError):
    """Raised when the loss becomes non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    lr: float = 1e-3
    image_size: int = 64
    samples_per_ray: int = 64
    views_per_step: int = 3
    overlap_threshold: float = 0.7
    seed: int = 0
    rays_per_step: int = 256
    orient_rays: int = 128
    width: int = 64
    depth: int = 4
    frequency_bands: int = 6
    num_views: int = 40
    holdout_every: int = 8
    background: float = 0.5
    camera_radius: float = 2.0
    fov_deg: float = 40.0
    confidence_cutoff: float = 0.2
    sphere_fit_steps: int = 300
    lambda1: float = 1e-4
    lambda2: float = 1.0
    lambda3: float = 10.0
    lambda4: float = 10.0
    lambda5: float = 10.0
    decay_start: int = -1  # -1: 80% of iterations (20K of 25K scaled)
    decay_end: int = -1  # -1: the last iteration

    def __post_init__(self):
        if self.views_per_step < 1:
            raise ValueError("views_per_step must be >= 1")
        if not 0 < self.overlap_threshold <= 1:
            raise ValueError("overlap_threshold must lie in (0, 1]")
        if self.iterations < 0 or self.samples_per_ray < 2 or self.image_size < 1:
            raise ValueError("invalid iterations, samples_per_ray or image_size")
        if self.rays_per_step < 1 or self.num_views < 2 or self.holdout_every < 2:
            raise ValueError("invalid ray or view counts")

    def weights(self) -> LossWeights:
        ds = self.decay_start if self.decay_start >= 0 else int(round(0.8 * self.iterations))
        de = self.decay_end if self.decay_end >= 0 else max(self.iterations, ds)
        return LossWeights(self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5, ds, de)

    def encoding(self) -> st.EncodingSpec:
        return st.EncodingSpec(self.frequency_bands, True, TeacherLatent.VECTOR_DIM)

    def pose(self, azimuth: float, elevation: float) -> CameraPose:
        return CameraPose(azimuth, elevation, self.camera_radius, np.deg2rad(self.fov_deg),
                          self.image_size, self.image_size)

    def to_config(self, prefix: str = "train.") -> dict:
        return {prefix + k: repr(v) for k, v in asdict(self).items()}

    @classmethod
    def from_config(cls, items: dict, prefix: str = "train.") -> "TrainConfig":
        kinds = {f.name: type(getattr(cls(), f.name)) for f in fields(cls)}
        kwargs = {}
        for key, raw in items.items():
            if key.startswith(prefix):
                name = key[len(prefix):]
                kwargs[name] = kinds[name](float(raw)) if kinds[name] is int else kinds[name](raw)
        return cls(**kwargs)


# view bank ------------------------------------------------------------------

@dataclass
class TeacherView:
    pose: CameraPose
    image: np.ndarray  # (P, 3)
    mask: np.ndarray  # (P,)
    angle: np.ndarray  # (P,) Gabor angle
    confidence: np.ndarray  # (P,)
    hit: np.ndarray
    depth: np.ndarray
    positions: np.ndarray

    def angle_map(self, restrict_to_hair: bool = True) -> AngleMap:
        h = w = int(round(np.sqrt(len(self.mask))))
        conf = self.confidence * (self.mask > 0.5) if restrict_to_hair else self.confidence
        return AngleMap(self.angle.reshape(h, w), conf.reshape(h, w))


def view_poses(config: TrainConfig) -> list:
    step = 2.0 * np.pi / config.num_views
    return [config.pose(i * step, ELEVATIONS[i % len(ELEVATIONS)]) for i in range(config.num_views)]


def holdout_indices(config: TrainConfig) -> list:
    off = config.holdout_every // 2
    return [i for i in range(config.num_views) if i % config.holdout_every == off]


@dataclass
class ViewBank:
    latent: TeacherLatent
    views: list
    train_ids: list
    holdout_ids: list
    overlap: np.ndarray  # (len(train_ids), len(train_ids))

    @classmethod
    def build(cls, latent: TeacherLatent, config: TrainConfig, bank: GaborBank = GaborBank()) -> "ViewBank":
        views = []
        for pose in view_poses(config):
            tr = teacher_render(pose, latent, config.samples_per_ray, background=config.background)
            orient = gabor_orient(tr.image, bank)
            views.append(TeacherView(pose, tr.image.values.reshape(-1, 3), tr.hair_mask.values.reshape(-1),
                                     orient.angle.reshape(-1), orient.confidence.reshape(-1),
                                     tr.hits.hit, tr.hits.depth, tr.hits.positions))
        held = holdout_indices(config)
        train_ids = [i for i in range(config.num_views) if i not in held]
        ov = np.zeros((len(train_ids), len(train_ids)))
        for a, ia in enumerate(train_ids):
            va = views[ia]
            pts = va.positions[va.hit]
            nrm = teacher_normal(pts, latent)
            for b, ib in enumerate(train_ids):
                ov[a, b] = overlap_fraction(pts, nrm, views[ib].pose)
        return cls(latent, views, train_ids, held, ov)

    def companions(self, first: int, k: int, threshold: float, rng: np.random.Generator) -> list:
        """``first`` plus k-1 distinct train views overlapping it by >= threshold."""
        if k <= 1:
            return [self.train_ids[first]]
        cand = [b for b in range(len(self.train_ids)) if b != first and self.overlap[first, b] >= threshold]
        chosen = rng.choice(len(cand), size=min(k - 1, len(cand)), replace=False) if cand else []
        return [self.train_ids[first]] + [self.train_ids[cand[c]] for c in chosen]


# student evaluation helpers ----------------------------------------------------

def _dt(params: st.PsiParams):
    return params.dtype


def surface_eval(params: st.PsiParams, w, points: np.ndarray):
    """Attributes (m, o) on the tape plus the detached unit normal at surface points."""
    dt = _dt(params)
    feat = st.encode(points, w, params.spec, dt)
    m_logit, m, o, _ = st.attribute_forward(feat, params)
    with ad.pause():
        grad = st.geometry_forward(feat, params, st.encode_tangents(points, params.spec, dt))[2].data
    normal = grad / np.maximum(np.linalg.norm(grad, axis=1, keepdims=True), 1e-20)
    return m, o, normal


def _projected_angles(o, points: np.ndarray, pose: CameraPose):
    vx, vy = render.image_line(o, points, pose)
    return ad.atan2(vy, vx)


@dataclass
class StudentView:
    """Student predictions for one full camera view."""

    mask: ImageBuffer
    orientation: AngleMap
    points: render.SurfacePoints
    image: ImageBuffer | None = None
    grad: np.ndarray | None = None


def render_student(params: st.PsiParams, w, pose: CameraPose, K: int = 64,
                   background: float = 0.5, with_image: bool = False) -> StudentView:
    """Hard first-surface semantic/orientation projection (and optionally the image)."""
    rays = camera_rays(pose)
    samples = render.sample_rays(rays, K)
    pts = samples.positions.reshape(-1, 3)
    image = None
    if with_image:
        ev = st.evaluate(pts, w, params)
        sdf = ev["s"]
        sigma = render.sdf2dens_np(sdf.astype(np.float64), params.beta_value()).reshape(samples.depths.shape)
        comp = render.composite(sigma, samples.deltas, ev["c"].reshape(samples.depths.shape + (3,)), background)
        image = ImageBuffer(np.clip(comp.color.data, 0, 1).reshape(pose.height, pose.width, 3))
    else:
        sdf = st.sdf_values(pts, w, params)
    sp = render.first_crossing(sdf.reshape(samples.depths.shape), samples)
    grad = np.zeros((0, 3))
    if len(sp):
        ev = st.evaluate(sp.positions, w, params, with_grad=True)
        sp.semantic = ev["m"].astype(np.float64)
        sp.orientation = ev["o"].astype(np.float64)
        grad = ev["grad"].astype(np.float64)
    else:
        sp.semantic = np.zeros(0)
        sp.orientation = np.zeros((0, 3))
    mask = render.project_semantic(sp, pose)
    orient = render.project_orientation(sp, pose)
    return StudentView(mask, orient, sp, image, grad)


def hair_angle_map(sv: StudentView, threshold: float = 0.5) -> AngleMap:
    """Student orientation map with confidence zeroed outside predicted hair."""
    conf = sv.orientation.confidence * (sv.mask.values[..., 0] >= threshold)
    return AngleMap(sv.orientation.angle, conf)


# training ------------------------------------------------------------------------

@dataclass
class StepRecord:
    iteration: int
    terms: list
    total: float

    def line(self) -> str:
        return "\t".join([str(self.iteration)] + ["%.9g" % v for v in self.terms] + ["%.9g" % self.total])


@dataclass
class TrainResult:
    params: st.PsiParams
    log: list = field(default_factory=list)
    banks: list = field(default_factory=list)
    seconds: float = 0.0

    def log_lines(self) -> list:
        return [r.line() for r in self.log]


LOG_HEADER = "iter\tdensity\timage\tsemantic\ttangential\tprojection\ttotal"


def new_student(config: TrainConfig) -> st.PsiParams:
    params = st.init_params(config.encoding(), config.width, config.depth, seed=config.seed)
    if config.sphere_fit_steps > 0:
        st.fit_sphere(params, config.sphere_fit_steps, seed=config.seed)
    return params


@dataclass
class Batch:
    """Everything one step needs, drawn from the rng before any evaluation."""

    latent_index: int
    view_ids: list
    image_pixels: np.ndarray
    orient_pixels: np.ndarray
    jitter: np.ndarray


def draw_batch(banks: list, config: TrainConfig, rng: np.random.Generator) -> Batch:
    li = int(rng.integers(len(banks)))
    bank = banks[li]
    first = int(rng.integers(len(bank.train_ids)))
    ids = bank.companions(first, config.views_per_step, config.overlap_threshold, rng)
    v0 = bank.views[ids[0]]
    npx = len(v0.mask)
    image_pixels = np.sort(rng.choice(npx, size=min(config.rays_per_step, npx), replace=False))
    hair = np.nonzero((v0.mask > 0.5) & (v0.confidence > config.confidence_cutoff))[0]
    if config.orient_rays > 0 and len(hair):
        orient_pixels = np.sort(rng.choice(hair, size=min(config.orient_rays, len(hair)), replace=False))
    else:
        orient_pixels = np.zeros(0, dtype=np.int64)
    jitter = rng.random((len(image_pixels), config.samples_per_ray))
    return Batch(li, ids, image_pixels, orient_pixels, jitter)


class _Jitter:
    """Adapter so sample_rays consumes pre-drawn uniforms."""

    def __init__(self, u):
        self.u = u

    def random(self, shape):
        return self.u.reshape(shape)


def batch_loss(params: st.PsiParams, banks: list, batch: Batch, t: int, config: TrainConfig,
               weights: LossWeights) -> tuple:
    """Record all loss terms for a batch on the active tape. Returns (total, terms, info)."""
    bank = banks[batch.latent_index]
    latent = bank.latent
    w = latent_features(latent)
    dt = _dt(params)
    views = [bank.views[i] for i in batch.view_ids]
    v0 = views[0]
    rays = camera_rays(v0.pose)
    K = config.samples_per_ray

    # volume rendering on the image rays
    rays_i = rays.subset(batch.image_pixels)
    samples = render.sample_rays(rays_i, K, _Jitter(batch.jitter))
    pts = samples.positions.reshape(-1, 3)
    s_val, c_val, _ = st.geometry_forward(st.encode(pts, w, params.spec, dt), params)
    beta = params.beta()
    sigma = ad.reshape(render.sdf2dens(s_val, beta), samples.depths.shape)
    colors = ad.reshape(c_val, samples.depths.shape + (3,))
    comp = render.composite(sigma, samples.deltas.astype(dt), colors, config.background)
    terms = LossTerms()
    terms.image = loss_image(v0.image[batch.image_pixels].astype(dt), comp.color, weights)
    if weights.lambda1 * weights.delta(t) > 0:
        d_teacher = render.sdf2dens_np(teacher_sdf(pts, latent), BETA_TEACHER).reshape(samples.depths.shape)
        terms.density = loss_density(d_teacher.astype(dt), sigma, t, weights)

    # surface points: image rays first, then the extra orientation rays
    s_img = s_val.data.reshape(samples.depths.shape)
    sp = render.first_crossing(s_img, samples)
    pix = [batch.image_pixels[sp.ray_index]]
    xs = [sp.positions]
    if len(batch.orient_pixels):
        rays_o = rays.subset(batch.orient_pixels)
        samp_o = render.sample_rays(rays_o, K)
        s_o = st.sdf_values(samp_o.positions.reshape(-1, 3), w, params).reshape(samp_o.depths.shape)
        sp_o = render.first_crossing(s_o, samp_o)
        pix.append(batch.orient_pixels[sp_o.ray_index])
        xs.append(sp_o.positions)
    x_s = np.concatenate(xs).astype(np.float64)
    pix_s = np.concatenate(pix)
    n_img = len(sp)
    info = {"surface_points": len(x_s), "valid_pairs": 0}

    # semantic loss over all image rays; rays without a surface predict 0
    y = v0.mask[batch.image_pixels].astype(dt)
    if len(x_s):
        m_s, o_s, n_det = surface_eval(params, w, x_s)
        m_all = ad.concat([m_s[:n_img], np.zeros(1, dtype=dt)], axis=0)
        gather = np.full(len(batch.image_pixels), n_img)
        gather[sp.ray_index] = np.arange(n_img)
        terms.semantic = loss_semantic(y, m_all[gather], weights)
        if weights.lambda4 > 0:
            terms.tangential = loss_tangential(o_s, n_det.astype(dt), weights)

        # multi-view projection loss
        n_det = n_det.astype(np.float64)
        preds, gts, valid = [], [], []
        for view in views:
            ri, ci, inside = view.pose.pixel_index(x_s)
            flat = np.where(inside, ri * view.pose.width + ci, 0)
            facing = np.sum(n_det * (view.pose.position - x_s), axis=1) > 0
            dist = np.linalg.norm(x_s - view.pose.position, axis=1)
            same = view.hit[flat] & (np.abs(view.depth[flat] - dist) < DEPTH_TOLERANCE)
            ok = inside & facing & same & (view.mask[flat] > 0.5) & (view.confidence[flat] > config.confidence_cutoff)
            preds.append(_projected_angles(o_s, x_s, view.pose))
            gts.append(view.angle[flat])
            valid.append(ok)
        valid = np.concatenate(valid)
        info["valid_pairs"] = int(valid.sum())
        if weights.lambda5 > 0:
            terms.projection = loss_projection(ad.concat(preds, axis=0), np.concatenate(gts).astype(dt),
                                               valid, weights)
    else:
        terms.semantic = loss_semantic(y, np.full(len(y), 0.0, dtype=dt), weights)
    return total_loss(terms), terms, info


def train(latents, config: TrainConfig = TrainConfig(), params: st.PsiParams | None = None,
          banks: list | None = None, log_path=None, dump_dir=None, progress=None) -> TrainResult:
    """Distil one or more teacher latents into the student field."""
    if isinstance(latents, TeacherLatent):
        latents = [latents]
    started = time.monotonic()
    if banks is None:
        banks = [ViewBank.build(lat, config) for lat in latents]
    params = new_student(config) if params is None else params
    weights = config.weights()
    opt = st.Adam(params.tensors(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    result = TrainResult(params, banks=banks)
    fh = open(log_path, "w") if log_path else None
    if fh:
        fh.write(LOG_HEADER + "\n")
    try:
        for it in range(config.iterations):
            batch = draw_batch(banks, config, rng)
            with ad.GradientTape() as tape:
                total, terms, info = batch_loss(params, banks, batch, it, config, weights)
            value = float(total.data)
            if not np.isfinite(value):
                _dump(dump_dir, it, batch, terms, params)
                raise TrainingAborted(f"non-finite loss at iteration {it}: terms {terms.values()}")
            grads = tape.gradient(total, opt.tensors)
            opt.step(grads)
            rec = StepRecord(it, terms.values(), value)
            result.log.append(rec)
            if fh:
                fh.write(rec.line() + "\n")
            if progress is not None:
                progress(it, rec, info)
    finally:
        if fh:
            fh.close()
    result.seconds = time.monotonic() - started
    return result


def _dump(dump_dir, it, batch, terms, params) -> None:
    if dump_dir is None:
        return
    path = Path(dump_dir) / f"nan_batch_{it}.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, view_ids=np.array(batch.view_ids), image_pixels=batch.image_pixels,
             orient_pixels=batch.orient_pixels, jitter=batch.jitter, terms=np.array(terms.values()),
             *params.arrays())
    log.error("non-finite loss; batch written to %s", path)


# held-out evaluation -----------------------------------------------------------

@dataclass
class ViewScores:
    iou: float
    orient_error: float
    projection: float
    tangency: float


def score_view(params: st.PsiParams, bank: ViewBank, view_id: int, config: TrainConfig) -> ViewScores:
    """IoU against the analytic mask, orientation error against the Gabor map,
    single-view projection loss and mean |o . n| on hair surface points."""
    from ..metrics import metric_iou, metric_orient

    view = bank.views[view_id]
    w = latent_features(bank.latent)
    sv = render_student(params, w, view.pose, config.samples_per_ray, config.background)
    h = view.pose.height
    gt_mask = ImageBuffer(view.mask.reshape(h, -1))
    iou = metric_iou(sv.mask, gt_mask)
    err = metric_orient(hair_angle_map(sv), view.angle_map(), config.confidence_cutoff)
    sp = sv.points
    proj = tang = float("nan")
    if len(sp):
        hair = sp.semantic >= 0.5
        n = sv.grad / np.maximum(np.linalg.norm(sv.grad, axis=1, keepdims=True), 1e-20)
        if hair.any():
            tang = float(np.mean(np.abs(np.sum(sp.orientation[hair] * n[hair], axis=1))))
        ang, _ = render.line_angles(sp.orientation, sp.positions, view.pose)
        pix = sp.ray_index
        ok = (view.mask[pix] > 0.5) & (view.confidence[pix] > config.confidence_cutoff)
        if ok.any():
            proj = float(np.mean(angle_distance(ang[ok], view.angle[pix][ok]).data))
    return ViewScores(iou, err, proj, tang)


def evaluate_holdout(params: st.PsiParams, banks: list, config: TrainConfig) -> list:
    """Per latent, the list of ViewScores over its held-out views."""
    return [[score_view(params, b, i, config) for i in b.holdout_ids] for b in banks]
