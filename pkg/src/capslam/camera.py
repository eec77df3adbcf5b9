"""Pinhole camera model, back-projection and normal maps."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def default(cls, width: int = 160, height: int = 120, fov_deg: float = 70.0) -> "CameraIntrinsics":
        f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2.0)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def rays(self) -> np.ndarray:
        """(H, W, 3) rays ``K^-1 (u, v, 1)`` with unit z."""
        u = np.arange(self.width, dtype=float)
        v = np.arange(self.height, dtype=float)
        uu, vv = np.meshgrid(u, v)
        return np.stack([(uu - self.cx) / self.fx, (vv - self.cy) / self.fy, np.ones_like(uu)], axis=-1)

    def project(self, points: np.ndarray) -> np.ndarray:
        """Pixel coordinates (..., 2) of camera-frame points (..., 3)."""
        z = points[..., 2]
        return np.stack([self.fx * points[..., 0] / z + self.cx, self.fy * points[..., 1] / z + self.cy], axis=-1)

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics after block-averaging by ``1/factor`` (factor 0.5 halves)."""
        s = factor
        w = int(round(self.width * s))
        h = int(round(self.height * s))
        return CameraIntrinsics(
            self.fx * s, self.fy * s, (self.cx + 0.5) * s - 0.5, (self.cy + 0.5) * s - 0.5, w, h
        )

    def halved(self) -> "CameraIntrinsics":
        return CameraIntrinsics(
            self.fx / 2, self.fy / 2, (self.cx - 0.5) / 2, (self.cy - 0.5) / 2, self.width // 2, self.height // 2
        )


def backproject(depth: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Vertex map ``depth(u) K^-1 (u, 1)``; NaN where depth is invalid."""
    d = np.where(np.isfinite(depth) & (depth > 0), depth, np.nan)
    return d[..., None] * K.rays()


def compute_normals(vertices: np.ndarray) -> np.ndarray:
    """Unit normals from central-difference tangents, oriented toward the camera.

    Border pixels and pixels with a missing neighbor get NaN.
    """
    H, W, _ = vertices.shape
    n = np.full_like(vertices, np.nan)
    dx = vertices[1:-1, 2:] - vertices[1:-1, :-2]
    dy = vertices[2:, 1:-1] - vertices[:-2, 1:-1]
    c = np.cross(dy, dx)
    norm = np.linalg.norm(c, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        c = c / norm
    center = vertices[1:-1, 1:-1]
    flip = np.sum(c * center, axis=-1, keepdims=True) > 0
    c = np.where(flip, -c, c)
    bad = ~np.isfinite(c).all(axis=-1) | (norm[..., 0] <= 0) | ~np.isfinite(center).all(axis=-1)
    c[bad] = np.nan
    n[1:-1, 1:-1] = c
    return n


def valid_mask(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 3:
        return np.isfinite(arr).all(axis=-1)
    return np.isfinite(arr) & (arr > 0)


def downsample_mean(img: np.ndarray) -> np.ndarray:
    """2x2 block mean ignoring NaN; NaN where the whole block is invalid."""
    H, W = img.shape[:2]
    h, w = H // 2, W // 2
    blk = img[: 2 * h, : 2 * w].reshape((h, 2, w, 2) + img.shape[2:])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN blocks
        return np.nanmean(blk, axis=(1, 3))


def downsample_depth(depth: np.ndarray) -> np.ndarray:
    """2x2 block mean of depth; invalid if any of the four is invalid."""
    H, W = depth.shape
    h, w = H // 2, W // 2
    d = np.where(np.isfinite(depth) & (depth > 0), depth, np.nan)
    blk = d[: 2 * h, : 2 * w].reshape(h, 2, w, 2)
    return blk.mean(axis=(1, 3))


def smooth_depth(depth: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian smoothing normalized over valid pixels; invalid pixels stay invalid (0)."""
    d = np.asarray(depth, float)
    ok = np.isfinite(d) & (d > 0)
    if sigma <= 0:
        return np.where(ok, d, 0.0)
    num = gaussian_filter(np.where(ok, d, 0.0), sigma, mode="constant")
    den = gaussian_filter(ok.astype(float), sigma, mode="constant")
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(ok & (den > 1e-6), num / den, 0.0)


@dataclass
class DepthImage:
    """Depth along the optical axis (cm) with an explicit validity mask."""

    values: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        finite = np.isfinite(self.values) & (self.values > 0)
        self.valid = finite if self.valid is None else (np.asarray(self.valid, bool) & finite)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def masked(self) -> np.ndarray:
        """Depth array with NaN outside the valid mask."""
        return np.where(self.valid, self.values, np.nan)
