"""Oriented Gabor filter bank for 2D line-orientation maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..geomcore import AngleMap, ImageBuffer


@dataclass(frozen=True)
class GaborBank:
    num_orientations: int = 18
    wavelength: float = 6.0
    envelope_sigma: float = 2.5
    aspect: float = 0.5
    kernel_radius: int = 7

    def __post_init__(self):
        if self.num_orientations < 2:
            raise ValueError("need at least two orientations")
        if self.wavelength <= 0 or self.envelope_sigma <= 0 or self.kernel_radius < 1:
            raise ValueError("wavelength, envelope_sigma and kernel_radius must be positive")

    @property
    def angles(self) -> np.ndarray:
        return np.arange(self.num_orientations) * np.pi / self.num_orientations

    def kernels(self):
        """Zero-mean even and odd kernels, one pair per orientation.

        Kernel arrays are indexed [row, col] with rows growing downward while
        angles are measured with y up, so a kernel at angle pi/2 responds to
        vertical lines.
        """
        r = self.kernel_radius
        c = np.arange(-r, r + 1, dtype=np.float64)
        y, x = -c[:, None], c[None, :]
        even, odd = [], []
        for th in self.angles:
            along = x * np.cos(th) + y * np.sin(th)
            across = -x * np.sin(th) + y * np.cos(th)
            env = np.exp(-(across ** 2 + (self.aspect * along) ** 2) / (2 * self.envelope_sigma ** 2))
            ke = env * np.cos(2 * np.pi * across / self.wavelength)
            ke -= env * ke.sum() / env.sum()
            ko = env * np.sin(2 * np.pi * across / self.wavelength)
            ko -= ko.mean()
            norm = np.sqrt((ke ** 2).sum() + (ko ** 2).sum())
            even.append(ke / norm)
            odd.append(ko / norm)
        return np.stack(even), np.stack(odd)


def filter_responses(gray: np.ndarray, bank: GaborBank) -> np.ndarray:
    """Quadrature response magnitude per orientation, shape (num_orientations, H, W)."""
    even, odd = bank.kernels()
    out = np.empty((bank.num_orientations,) + gray.shape)
    for i in range(bank.num_orientations):
        re = ndimage.correlate(gray, even[i], mode="reflect")
        im = ndimage.correlate(gray, odd[i], mode="reflect")
        out[i] = np.hypot(re, im)
    return out


def gabor_orient(image: ImageBuffer, bank: GaborBank = GaborBank()) -> AngleMap:
    """Dominant line angle per pixel with max-response confidence.

    The angle of the strongest filter is refined by a parabola through the
    neighbouring orientations (circular in pi). Confidence is the strongest
    response divided by its image-wide maximum. Pixels whose filter support
    leaves the image get zero confidence: truncated filters bias the angle.
    """
    gray = image.gray()
    resp = filter_responses(gray, bank)
    n = bank.num_orientations
    best = np.argmax(resp, axis=0)
    rows, cols = np.indices(best.shape)
    r0 = resp[best, rows, cols]
    rm = resp[(best - 1) % n, rows, cols]
    rp = resp[(best + 1) % n, rows, cols]
    denom = rm - 2.0 * r0 + rp
    offset = np.where(denom < -1e-12, 0.5 * (rm - rp) / np.where(denom < -1e-12, denom, -1.0), 0.0)
    angle = (best + np.clip(offset, -0.5, 0.5)) * (np.pi / n)
    peak = float((r0 * full_support(gray.shape, bank)).max())
    if peak <= 1e-9 * max(1.0, float(np.abs(gray).max())):
        conf = np.zeros_like(r0)
    else:
        conf = r0 / peak * full_support(gray.shape, bank)
    return AngleMap(angle, conf)


def full_support(shape, bank: GaborBank) -> np.ndarray:
    """1 where the whole filter lies inside the image, else 0."""
    r = bank.kernel_radius
    out = np.zeros(shape)
    out[r:shape[0] - r, r:shape[1] - r] = 1.0
    return out
