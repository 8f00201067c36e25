"""Evaluation metrics: hair-mask IoU, orientation error and a timing report."""

from __future__ import annotations

import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .geomcore import AngleMap, ImageBuffer


def _plane(img) -> np.ndarray:
    v = img.values if isinstance(img, ImageBuffer) else np.asarray(img, dtype=np.float64)
    return v[..., 0] if v.ndim == 3 else v


def metric_iou(pred, gt, threshold: float = 0.5) -> float:
    """|pred & gt| / |pred | gt| of thresholded masks; 1 when both are empty."""
    a, b = _plane(pred), _plane(gt)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a, b = a >= threshold, b >= threshold
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def metric_orient(pred: AngleMap, gt: AngleMap, cutoff: float = 0.2) -> float:
    """Mean line-angle distance where both confidences exceed ``cutoff``.

    Returns NaN (undefined) when no pixel qualifies.
    """
    if pred.angle.shape != gt.angle.shape:
        raise ValueError(f"angle map shapes differ: {pred.angle.shape} vs {gt.angle.shape}")
    ok = (pred.confidence > cutoff) & (gt.confidence > cutoff)
    if not ok.any():
        return math.nan
    d = np.mod(pred.angle[ok] - gt.angle[ok], np.pi)
    return float(np.mean(np.minimum(d, np.pi - d)))


@dataclass
class MetricsReport:
    """Plain-text report with a fixed field order."""

    iou: float = math.nan
    orient_error: float = math.nan
    timings: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not math.isnan(self.iou) and not 0.0 <= self.iou <= 1.0:
            raise ValueError("IoU must lie in [0, 1]")

    @contextmanager
    def timed(self, stage: str):
        start = time.monotonic()
        try:
            yield
        finally:
            self.timings[stage] = self.timings.get(stage, 0.0) + max(time.monotonic() - start, 0.0)

    def lines(self) -> list:
        out = [f"hair_iou\t{_fmt(self.iou)}", f"orient_error_rad\t{_fmt(self.orient_error)}"]
        out += [f"{k}\t{_fmt(v)}" for k, v in self.extra.items()]
        out += [f"time_{k}_s\t{v:.3f}" for k, v in self.timings.items()]
        return out

    def text(self, with_timings: bool = True) -> str:
        lines = self.lines() if with_timings else [l for l in self.lines() if not l.startswith("time_")]
        return "\n".join(lines) + "\n"

    def write(self, path, with_timings: bool = True) -> None:
        with open(path, "w") as fh:
            fh.write(self.text(with_timings))


def _fmt(v) -> str:
    if isinstance(v, float) and math.isnan(v):
        return "undefined"
    return "%.6f" % v if isinstance(v, float) else str(v)
