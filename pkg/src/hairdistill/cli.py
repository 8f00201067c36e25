"""Command-line entry point: ``hairdistill <command> [options]``.

Exit codes: 0 success, 1 validation error (bad flag, key or input), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import extract as ex
from . import render
from . import strands as sd
from . import student as st
from .config import Config, ConfigError
from .geomcore import AngleMap, ImageBuffer
from .metrics import MetricsReport, metric_iou, metric_orient
from .supervise import train as tr
from .supervise.gabor import gabor_orient
from .supervise.invert import invert
from .teacher import TeacherLatent, latent_features, teacher_render

log = logging.getLogger("hairdistill")

COMMANDS = ("train", "invert", "extract", "hairvolume", "grow", "eval", "interpolate", "teacher-render")


class UsageError(ValueError):
    """Bad command line."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------------ helpers

def save_latent(path, w) -> None:
    with open(path, "w") as fh:
        fh.write("".join("%.17g\n" % float(v) for v in np.asarray(w, dtype=np.float64).ravel()))


def load_latent(path) -> np.ndarray:
    """A latent vector: one number per line, or a config file whose teacher.* keys define it."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read latent {path}: {exc}") from None
    if "=" in text:
        return latent_features(Config.parse(text).teacher())
    try:
        w = np.array([float(t) for t in text.split()])
    except ValueError:
        raise ConfigError(f"{path}: latent file must hold numbers") from None
    if w.shape != (TeacherLatent.VECTOR_DIM,):
        raise st.DimensionError(f"{path}: latent has {w.size} entries, expected {TeacherLatent.VECTOR_DIM}")
    return w


class Context:
    """Parsed flags plus the resolved configuration and output directory."""

    def __init__(self, args):
        self.args = args
        self.config = Config.load(args.config) if args.config else Config()
        for item in args.set or []:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            key, value = item.split("=", 1)
            self.config.set(key, value)
        if args.seed is not None:
            self.config.with_seed(args.seed)
        self.config.validate()
        render.set_sdf_sign(self.config.sdf_sign())
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.report = MetricsReport()

    def checkpoint(self) -> st.PsiParams:
        if not self.args.checkpoint:
            raise ConfigError("this command needs --checkpoint PATH")
        path = Path(self.args.checkpoint)
        if not path.is_file():
            raise ConfigError(f"checkpoint not found: {path}")
        return st.load_checkpoint(path)

    def latent(self, flag: str = "latent") -> np.ndarray:
        path = getattr(self.args, flag, None)
        return load_latent(path) if path else latent_features(self.config.teacher())

    def view_ids(self, default: list) -> list:
        i = self.config.get_int("eval.view_index")
        n = self.config.train().num_views
        if i < 0:
            return default
        if i >= n:
            raise ConfigError(f"eval.view_index {i} out of range for {n} views")
        return [i]

    def finish(self) -> None:
        self.report.write(self.out / "metrics.txt")
        sys.stdout.write(self.report.text())


def _angle_map_of(view: tr.TeacherView) -> AngleMap:
    return view.angle_map()


def _grow(ctx: Context, hv: ex.HairVolume, config: ex.ExtractConfig, folder: Path) -> sd.HairResult:
    scalp = ex.universal_scalp(config.fit())
    field = sd.OrientationField.from_mesh(hv.hair)
    res = sd.grow_hair(scalp, hv.mask, field, ctx.config.strands())
    sd.export_strands(res.strands, folder / "strands.hair")
    return res


def _volume_outputs(hv: ex.HairVolume, folder: Path) -> None:
    ex.save_obj(hv.mesh, folder / "hair_volume.obj")
    ex.save_obj(hv.hair, folder / "hair_surface.obj")
    ex.save_voxels(hv.mask, folder / "hair_volume.vxm")


def _strand_metrics(report: MetricsReport, res: sd.HairResult, hv: ex.HairVolume, dilation: int) -> None:
    report.extra["strands"] = len(res.strands)
    report.extra["rejected_roots"] = res.rejected
    if res.alignment:
        report.extra["alignment_initial"] = float(res.alignment[0])
        report.extra["alignment_final"] = float(res.alignment[-1])
    if res.strands:
        pts = np.concatenate([s.vertices for s in res.strands]).astype(np.float64)
        report.extra["inside_fraction"] = float(hv.mask.dilate(dilation).contains(pts).mean())


# ----------------------------------------------------------------- commands

def cmd_teacher_render(ctx: Context) -> None:
    cfg = ctx.config.train()
    latent = ctx.config.teacher()
    poses = tr.view_poses(cfg)
    ids = ctx.view_ids(list(range(len(poses))))
    hair = []
    with ctx.report.timed("teacher_render"):
        for i in ids:
            rend = teacher_render(poses[i], latent, cfg.samples_per_ray, background=cfg.background)
            orient = gabor_orient(rend.image)
            conf = orient.confidence * (rend.hair_mask.values[..., 0] > 0.5)
            rend.image.save(ctx.out / f"teacher_{i:02d}.ppm")
            rend.hair_mask.save(ctx.out / f"teacher_mask_{i:02d}.pgm")
            AngleMap(orient.angle, conf).save(ctx.out / f"teacher_orient_{i:02d}")
            hair.append(float(np.mean(rend.hair_mask.values >= 0.5)))
    ctx.report.extra["views"] = len(ids)
    ctx.report.extra["hair_pixel_fraction"] = float(np.mean(hair)) if hair else 0.0


def cmd_train(ctx: Context) -> None:
    cfg = ctx.config.train()
    latents = ctx.config.latents()
    for i, lat in enumerate(latents):
        save_latent(ctx.out / f"latent_{i}.txt", latent_features(lat))
    with ctx.report.timed("views"):
        banks = [tr.ViewBank.build(lat, cfg) for lat in latents]
    with ctx.report.timed("train"):
        result = tr.train(latents, cfg, banks=banks, log_path=ctx.out / "train_log.tsv", dump_dir=ctx.out)
    path = Path(ctx.args.checkpoint) if ctx.args.checkpoint else ctx.out / "student.psi"
    result.params.save(path)
    with ctx.report.timed("evaluate"):
        scores = [s for per in tr.evaluate_holdout(result.params, banks, cfg) for s in per]
    _summarise(ctx.report, scores)
    ctx.report.extra["checkpoint"] = str(path)


def _summarise(report: MetricsReport, scores: list) -> None:
    def mean(vals):
        vals = [v for v in vals if np.isfinite(v)]
        return float(np.mean(vals)) if vals else float("nan")

    report.iou = mean([s.iou for s in scores])
    report.orient_error = mean([s.orient_error for s in scores])
    report.extra["projection_loss"] = mean([s.projection for s in scores])
    report.extra["tangency"] = mean([s.tangency for s in scores])
    report.extra["views"] = len(scores)


def cmd_eval(ctx: Context) -> None:
    a = ctx.args
    if a.pred or a.gt:
        if not (a.pred and a.gt):
            raise UsageError("--pred and --gt must be given together")
        ctx.report.iou = metric_iou(ImageBuffer.load(a.pred), ImageBuffer.load(a.gt))
        if a.pred_orient or a.gt_orient:
            if not (a.pred_orient and a.gt_orient):
                raise UsageError("--pred-orient and --gt-orient must be given together")
            ctx.report.orient_error = metric_orient(AngleMap.load(a.pred_orient), AngleMap.load(a.gt_orient),
                                                    ctx.config.train().confidence_cutoff)
        return
    params = ctx.checkpoint()
    cfg = ctx.config.train()
    with ctx.report.timed("views"):
        bank = tr.ViewBank.build(ctx.config.teacher(), cfg)
    ids = ctx.view_ids(bank.holdout_ids)
    w = latent_features(bank.latent)
    scores = []
    with ctx.report.timed("evaluate"):
        for i in ids:
            scores.append(tr.score_view(params, bank, i, cfg))
            sv = tr.render_student(params, w, bank.views[i].pose, cfg.samples_per_ray, cfg.background)
            sv.mask.save(ctx.out / f"student_mask_{i:02d}.pgm")
            tr.hair_angle_map(sv).save(ctx.out / f"student_orient_{i:02d}")
    _summarise(ctx.report, scores)


def cmd_invert(ctx: Context) -> None:
    params = ctx.checkpoint()
    cfg = ctx.config.train()
    icfg = ctx.config.invert()
    ids = ctx.view_ids([0])
    pose = tr.view_poses(cfg)[ids[0]]
    if ctx.args.target:
        target = ImageBuffer.load(ctx.args.target)
        mask = None
    else:
        rend = teacher_render(pose, ctx.config.teacher(), cfg.samples_per_ray, background=icfg.background)
        target, mask = rend.image, rend.hair_mask
        target.save(ctx.out / "target.ppm")
    with ctx.report.timed("invert"):
        res = invert(params, target, pose, icfg, target_mask=mask)
    save_latent(ctx.out / "latent.txt", res.latent)
    sv = tr.render_student(params, res.latent, pose, icfg.samples_per_ray, icfg.background, with_image=True)
    sv.image.save(ctx.out / "inverted.ppm")
    ctx.report.extra["initial_mse"] = res.initial_mse
    ctx.report.extra["best_mse"] = res.best_mse
    ctx.report.extra["mse_reduction"] = res.reduction


def cmd_extract(ctx: Context) -> None:
    params = ctx.checkpoint()
    config = ctx.config.extract()
    w = ctx.latent()
    timings = {}
    head = ex.extract_head(params, w, config.sdf_spec, timings=timings, stride=config.grid_stride)
    hair, kept = ex.hair_surface(head, config.hair_threshold)
    ex.save_obj(head, ctx.out / "head.obj")
    ex.save_obj(hair, ctx.out / "hair_surface.obj")
    ex.save_obj(ex.universal_scalp(config.fit()), ctx.out / "scalp.obj")
    ctx.report.timings.update(timings)
    ctx.report.extra["head_vertices"] = len(head.vertices)
    ctx.report.extra["hair_faces"] = len(hair.faces)
    ctx.report.extra["hair_fraction"] = float(kept)


def _hairvolume(ctx: Context, params, w, folder: Path) -> ex.HairVolume:
    config = ctx.config.extract()
    start = time.monotonic()
    hv = ex.hair_volume_from_config(params, w, config)
    _volume_outputs(hv, folder)
    ctx.report.timings["hair_volume"] = time.monotonic() - start
    for msg in hv.warnings:
        log.warning(msg)
    return hv


def cmd_hairvolume(ctx: Context) -> None:
    params = ctx.checkpoint()
    hv = _hairvolume(ctx, params, ctx.latent(), ctx.out)
    ctx.report.timings.update({f"hv_{k}": v for k, v in hv.timings.items()})
    ctx.report.extra["watertight"] = int(hv.mesh.is_watertight())
    ctx.report.extra["empty"] = int(hv.is_empty)
    ctx.report.extra["volume"] = float(hv.mask.volume())


def cmd_grow(ctx: Context) -> None:
    params = ctx.checkpoint()
    hv = _hairvolume(ctx, params, ctx.latent(), ctx.out)
    if hv.is_empty:
        raise RuntimeError("hair volume is empty: no strands to grow")
    with ctx.report.timed("strands"):
        res = _grow(ctx, hv, ctx.config.extract(), ctx.out)
    _strand_metrics(ctx.report, res, hv, ctx.config.strands().dilation)


def cmd_interpolate(ctx: Context) -> None:
    params = ctx.checkpoint()
    if not ctx.args.latent_b:
        raise UsageError("interpolate needs --latent-b FILE")
    steps = ctx.args.steps
    if steps < 1:
        raise UsageError("--steps must be >= 1")
    za, zb = ctx.latent("latent_a"), ctx.latent("latent_b")
    cfg = ctx.config.train()
    pose = tr.view_poses(cfg)[ctx.view_ids([0])[0]]
    failed = []
    for i in range(steps):
        t = i / (steps - 1) if steps > 1 else 0.0
        w = (1.0 - t) * za + t * zb
        d = ctx.out / f"step_{i:03d}"
        d.mkdir(exist_ok=True)
        try:
            save_latent(d / "latent.txt", w)
            sv = tr.render_student(params, w, pose, cfg.samples_per_ray, cfg.background, with_image=True)
            sv.image.save(d / "render.ppm")
            sv.mask.save(d / "mask.pgm")
            ctx.report.extra[f"step_{i:03d}_hair_pixels"] = int(np.count_nonzero(sv.mask.values >= 0.5))
            if ctx.args.skip_strands:
                continue
            hv = _hairvolume(ctx, params, w, d)
            if hv.is_empty:
                sd.export_strands([], d / "strands.hair")
                continue
            res = _grow(ctx, hv, ctx.config.extract(), d)
            ctx.report.extra[f"step_{i:03d}_strands"] = len(res.strands)
        except Exception as exc:  # one failed step must not stop the others
            log.error("step %d failed: %s", i, exc)
            failed.append(i)
    ctx.report.extra["failed_steps"] = len(failed)
    if failed:
        ctx.finish()
        raise RuntimeError(f"interpolation steps failed: {failed}")


HANDLERS = {
    "train": cmd_train,
    "invert": cmd_invert,
    "extract": cmd_extract,
    "hairvolume": cmd_hairvolume,
    "grow": cmd_grow,
    "eval": cmd_eval,
    "interpolate": cmd_interpolate,
    "teacher-render": cmd_teacher_render,
}


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="seed for every stochastic stage")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--checkpoint", help="student checkpoint (written by train, read by the rest)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="hairdistill", description="Implicit head distillation, hair volumes and strands.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    sub.add_parser("train", parents=[common], help="distil teacher latents into a student")
    p = sub.add_parser("invert", parents=[common], help="fit a latent to a target image")
    p.add_argument("--target", help="target PPM (default: teacher render of the configured latent)")
    for name, text in (("extract", "head and hair surface meshes"),
                       ("hairvolume", "closed hair volume"),
                       ("grow", "hair volume and strands")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--latent", help="latent file (default: configured teacher)")
    p = sub.add_parser("eval", parents=[common], help="IoU and orientation error")
    p.add_argument("--pred", help="predicted mask PGM")
    p.add_argument("--gt", help="reference mask PGM")
    p.add_argument("--pred-orient", help="predicted angle-map stem")
    p.add_argument("--gt-orient", help="reference angle-map stem")
    p = sub.add_parser("interpolate", parents=[common], help="linear latent interpolation")
    p.add_argument("--latent-a", help="start latent (default: configured teacher)")
    p.add_argument("--latent-b", help="end latent")
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--skip-strands", action="store_true", help="renders and masks only")
    sub.add_parser("teacher-render", parents=[common], help="teacher images, masks and orientation maps")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"hairdistill: error: {exc}\n")
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        ctx = Context(args)
        HANDLERS[args.command](ctx)
        ctx.finish()
    except (UsageError, ConfigError, st.DimensionError) as exc:
        sys.stderr.write(f"hairdistill: error: {exc}\n")
        return 1
    except Exception as exc:
        sys.stderr.write(f"hairdistill: failed: {type(exc).__name__}: {exc}\n")
        return 2
    return 0


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
