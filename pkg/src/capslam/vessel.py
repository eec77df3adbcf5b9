"""Multiscale Hessian vesselness and the frame enhancement used before tracking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy import ndimage

LUMA = np.array([0.299, 0.587, 0.114])
# kernel support in sigmas; 4 loses ~0.6% of the second moment at sigma=4
TRUNCATE = 6.0
# eigenvalues (on the 0..255 scale) below this are rounding noise
EIG_FLOOR = 1e-9


@dataclass(frozen=True)
class VesselnessParams:
    scales: tuple[float, ...] = (1.0, 2.0, 3.0, 4.0)
    beta: float = 0.5
    c: float = 15.0
    # "dark": vessels darker than the background (lambda2 > 0 required)
    polarity: Literal["dark", "bright"] = "dark"
    # S is computed on intensities rescaled to [0, 255]
    intensity_range: float = 255.0
    gain: float = 0.3

    def __post_init__(self):
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError("scales must be non-empty and strictly positive")
        if self.beta <= 0 or self.c <= 0:
            raise ValueError("beta and c must be positive")
        if self.polarity not in ("dark", "bright"):
            raise ValueError(f"unknown polarity {self.polarity!r}")


@dataclass
class HessianField:
    xx: np.ndarray
    xy: np.ndarray
    yy: np.ndarray

    @property
    def yx(self) -> np.ndarray:
        return self.xy


def _gaussian_kernels(sigma: float):
    """Sampled Gaussian and derivative kernels in correlation form.

    Moments are corrected so the derivative kernels are exact on polynomials
    up to degree two: ``sum(k1 * i) == 1`` and ``sum(k2) == 0``,
    ``sum(k2 * i**2) == 2``.
    """
    r = int(np.ceil(TRUNCATE * sigma))
    i = np.arange(-r, r + 1, dtype=float)
    g = np.exp(-0.5 * (i / sigma) ** 2)
    g /= g.sum()
    k1 = i * g
    k1 /= np.sum(k1 * i)
    # k2 = a i^2 g + b g with sum(k2) = 0 and sum(k2 i^2) = 2
    m2, m4 = np.sum(i**2 * g), np.sum(i**4 * g)
    a = 2.0 / (m4 - m2 * m2)
    k2 = a * (i**2 - m2) * g
    return g, k1, k2


def hessian_at_scale(img: np.ndarray, sigma: float) -> HessianField:
    """Scale-normalized (sigma^2) Gaussian second derivatives, reflective borders.

    Array axis 1 is x (columns), axis 0 is y (rows).
    """
    if sigma < 0.5:
        raise ValueError(f"sigma must be >= 0.5 pixels, got {sigma}")
    img = np.asarray(img, dtype=float)
    g, k1, k2 = _gaussian_kernels(sigma)
    s2 = sigma * sigma

    def sep(ky, kx):
        tmp = ndimage.correlate1d(img, ky, axis=0, mode="reflect")
        return ndimage.correlate1d(tmp, kx, axis=1, mode="reflect") * s2

    return HessianField(sep(g, k2), sep(k1, k1), sep(k2, g))


def eigen2x2(h: HessianField):
    """Per-pixel eigenpairs with ``|l1| <= |l2|``.

    Returns ``(l1, l2, u1, u2)``; eigenvectors have shape (..., 2) as (x, y).
    On exact ties in magnitude the smaller signed value is ``l1``.
    """
    a, b, c = h.xx, h.xy, h.yy
    mean = 0.5 * (a + c)
    rad = np.hypot(0.5 * (a - c), b)
    lp, lm = mean + rad, mean - rad
    theta = 0.5 * np.arctan2(2.0 * b, a - c)
    vp = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    vm = np.stack([-np.sin(theta), np.cos(theta)], axis=-1)
    swap = np.abs(lp) < np.abs(lm)
    l1 = np.where(swap, lp, lm)
    l2 = np.where(swap, lm, lp)
    u1 = np.where(swap[..., None], vp, vm)
    u2 = np.where(swap[..., None], vm, vp)
    return l1, l2, u1, u2


def vesselness_at_scale(img: np.ndarray, sigma: float, params: VesselnessParams) -> np.ndarray:
    h = hessian_at_scale(img, sigma)
    l1, l2, _, _ = eigen2x2(h)
    l1 = l1 * params.intensity_range
    l2 = l2 * params.intensity_range
    with np.errstate(divide="ignore", invalid="ignore"):
        rb = np.where(l2 != 0, l1 / l2, 0.0)
    s2 = l1 * l1 + l2 * l2
    v = np.exp(-rb * rb / (2 * params.beta**2)) * (1.0 - np.exp(-s2 / (2 * params.c**2)))
    # curvature below the noise floor counts as flat
    wrong = l2 <= EIG_FLOOR if params.polarity == "dark" else l2 >= -EIG_FLOOR
    return np.where(wrong, 0.0, v)


def vesselness_stack(img: np.ndarray, params: VesselnessParams) -> np.ndarray:
    """Responses per scale, shape (n_scales, H, W)."""
    return np.stack([vesselness_at_scale(img, s, params) for s in params.scales])


def vesselness(
    img: np.ndarray, params: VesselnessParams = VesselnessParams(), normalize: bool = True
) -> np.ndarray:
    """Maximum response over scales, divided by its image maximum (if positive).

    The raw response already lies in [0, 1]; ``normalize=False`` skips the
    per-image rescale so that consecutive frames stay photometrically comparable.
    """
    v = vesselness_stack(img, params).max(axis=0)
    if not normalize:
        return v
    peak = v.max(initial=0.0)
    return v / peak if peak > 0 else v


def to_gray(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=float)
    if rgb.ndim == 2:
        return rgb
    return rgb[..., :3] @ LUMA


def enhance_frame(rgb: np.ndarray, params: VesselnessParams = VesselnessParams()) -> np.ndarray:
    """Luminance plus a polarity-signed vesselness blend, clamped to [0, 1].

    Dark vessels are darkened and bright ones brightened, so the blend always
    adds contrast along detected structures.
    """
    gray = to_gray(rgb)
    if params.gain == 0:
        return np.clip(gray, 0.0, 1.0)
    sign = -1.0 if params.polarity == "dark" else 1.0
    return np.clip(gray + sign * params.gain * vesselness(gray, params, normalize=False), 0.0, 1.0)
