"""Distillation losses: density, image, semantic and the two orientation terms.

Every function accepts numpy arrays or autodiff tensors and returns a
tensor, so the same code is used for evaluation and for training.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, fields

import numpy as np

from .. import autodiff as ad

BCE_EPS = 1e-7

# incremented whenever a projection batch has no valid (point, view) pair
warnings = Counter()


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1e-4
    lambda2: float = 1.0
    lambda3: float = 10.0
    lambda4: float = 10.0
    lambda5: float = 10.0
    decay_start: int = 20000
    decay_end: int = 25000

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")
        if self.decay_start > self.decay_end:
            raise ValueError("decay_start must not exceed decay_end")

    def delta(self, t: float) -> float:
        """Density-loss schedule: 1 before decay_start, linear to 0 at decay_end."""
        if t < self.decay_start:
            return 1.0
        if t >= self.decay_end:
            return 0.0
        return 1.0 - (t - self.decay_start) / (self.decay_end - self.decay_start)

    def scaled(self, iterations: int, reference: int = 25000) -> "LossWeights":
        """Shrink the schedule proportionally for a shorter run."""
        f = iterations / reference
        return LossWeights(self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5,
                           int(round(self.decay_start * f)), int(round(self.decay_end * f)))


def _check_shapes(a, b, what: str) -> None:
    if np.shape(ad.tensor(a).data) != np.shape(ad.tensor(b).data):
        raise ValueError(f"{what}: shape mismatch {np.shape(ad.tensor(a).data)} vs {np.shape(ad.tensor(b).data)}")


def _mean(x):
    x = ad.tensor(x)
    if x.data.size == 0:
        return ad.Tensor(np.zeros((), dtype=x.dtype))
    return ad.mean(x)


def loss_density(d_teacher, d_student, t: float, weights: LossWeights):
    """lambda1 * delta(t) * mean |D - D_hat|."""
    _check_shapes(d_teacher, d_student, "density")
    scale = weights.lambda1 * weights.delta(t)
    return _mean(ad.absolute(ad.sub(d_student, d_teacher))) * scale


def loss_image(target, pred, weights: LossWeights):
    _check_shapes(target, pred, "image")
    diff = ad.sub(pred, target)
    return _mean(diff * diff) * weights.lambda2


def loss_semantic(target, pred, weights: LossWeights):
    """lambda3 * mean binary cross-entropy of predicted hair probabilities."""
    _check_shapes(target, pred, "semantic")
    y = np.asarray(ad.tensor(target).data)
    p = ad.clip(ad.tensor(pred), BCE_EPS, 1.0 - BCE_EPS)
    bce = -(ad.log(p) * y + ad.log(1.0 - p) * (1.0 - y))
    return _mean(bce) * weights.lambda3


def loss_tangential(o, n, weights: LossWeights):
    """lambda4 * mean |o . n| over surface points."""
    _check_shapes(o, n, "tangential")
    return _mean(ad.absolute(ad.tsum(ad.mul(o, n), axis=-1))) * weights.lambda4


def angle_distance(pred, gt):
    """Line-angle distance min(|d|, |d - pi|, |d + pi|) after reducing d modulo pi.

    For angles already in [0, pi) this is exactly the three-way minimum.
    """
    diff = ad.sub(pred, gt)
    wrap = np.pi * np.round(ad.tensor(diff).data / np.pi)
    return ad.absolute(diff - wrap)


def loss_projection(pred, gt, valid, weights: LossWeights):
    """lambda5 * mean angle distance over valid (point, view) pairs."""
    _check_shapes(pred, gt, "projection")
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        warnings["projection_empty"] += 1
        return ad.Tensor(np.zeros((), dtype=ad.tensor(pred).dtype))
    idx = np.nonzero(valid.reshape(-1))[0]
    d = angle_distance(ad.reshape(ad.tensor(pred), (-1,))[idx], np.asarray(ad.tensor(gt).data).reshape(-1)[idx])
    return ad.mean(d) * weights.lambda5


@dataclass
class LossTerms:
    """Weighted components of one batch; ``total`` is their sum."""

    density: object = 0.0
    image: object = 0.0
    semantic: object = 0.0
    tangential: object = 0.0
    projection: object = 0.0

    NAMES = ("density", "image", "semantic", "tangential", "projection")

    def values(self) -> list:
        return [float(ad.tensor(getattr(self, k)).data) for k in self.NAMES]


def total_loss(terms: LossTerms):
    """Sum of the five weighted terms (orientation = tangential + projection)."""
    out = ad.tensor(terms.density)
    for name in LossTerms.NAMES[1:]:
        out = ad.add(out, getattr(terms, name))
    return out
