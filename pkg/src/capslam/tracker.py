"""Frame-to-model tracking: point-to-plane ICP plus a photometric term.

Convention: ``T`` maps points of the current frame into the camera of the
model view.  Each Gauss-Newton step left-multiplies, ``T <- exp(xi) T``, and
both energies are linearized in ``xi`` around the current ``T``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import NamedTuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .camera import CameraIntrinsics, DepthImage, backproject, compute_normals, downsample_depth, downsample_mean
from .geometry import Pose, exp_se3

log = logging.getLogger(__name__)


@dataclass
class Frame:
    timestamp: float
    color: np.ndarray | None
    intensity: np.ndarray
    depth: DepthImage
    vertices: np.ndarray
    normals: np.ndarray

    @classmethod
    def from_depth(cls, depth, intensity, K: CameraIntrinsics, timestamp: float = 0.0, color=None) -> "Frame":
        depth = depth if isinstance(depth, DepthImage) else DepthImage(depth)
        verts = backproject(depth.masked(), K)
        return cls(timestamp, color, np.asarray(intensity, float), depth, verts, compute_normals(verts))

    @cached_property
    def icp_src(self) -> np.ndarray:
        """Flat indices with a finite vertex and normal."""
        return np.flatnonzero(np.isfinite(self.vertices).all(axis=-1).ravel()
                              & np.isfinite(self.normals).all(axis=-1).ravel())

    @cached_property
    def rgb_src(self) -> np.ndarray:
        """Flat indices with a finite vertex and intensity."""
        return np.flatnonzero(np.isfinite(self.vertices).all(axis=-1).ravel() & np.isfinite(self.intensity).ravel())

    def downsample(self, K: CameraIntrinsics) -> "Frame":
        d = downsample_depth(self.depth.masked())
        return Frame.from_depth(np.nan_to_num(d, nan=0.0), downsample_mean(self.intensity), K.halved(), self.timestamp)


@dataclass
class ModelView:
    """Depth, intensity, vertex and normal maps predicted from the model."""

    depth: DepthImage
    intensity: np.ndarray
    vertices: np.ndarray
    normals: np.ndarray

    @classmethod
    def from_depth(cls, depth, intensity, K: CameraIntrinsics) -> "ModelView":
        f = Frame.from_depth(depth, intensity, K)
        return cls(f.depth, np.where(f.depth.valid, f.intensity, np.nan), f.vertices, f.normals)

    @classmethod
    def from_frame(cls, frame: Frame) -> "ModelView":
        return cls(frame.depth, np.where(frame.depth.valid, frame.intensity, np.nan), frame.vertices, frame.normals)

    def downsample(self, K: CameraIntrinsics) -> "ModelView":
        d = downsample_depth(self.depth.masked())
        return ModelView.from_depth(np.nan_to_num(d, nan=0.0), downsample_mean(self.intensity), K.halved())


@dataclass
class TrackingConfig:
    w_rgb: float = 0.13
    max_dz: float = 5.0            # cm
    max_normal_deg: float = 30.0
    huber_icp: float = 0.3         # cm
    huber_rgb: float = 0.05
    levels: int = 3
    max_iter: int = 10
    eps: float = 1e-6
    rel_tol: float = 1e-5          # stop when the relative energy decrease falls below this
    min_correspondences: int = 50
    max_condition: float = 1e8
    max_halvings: int = 6
    highpass_sigma: float = 4.0    # px; removes smooth shading before the photometric term, 0 disables
    rgb_levels: int = 2            # finest pyramid levels with the photometric term; coarser ones are geometric only

    def __post_init__(self):
        if self.w_rgb < 0:
            raise ValueError("w_rgb must be non-negative")


@dataclass
class TrackingResult:
    pose: Pose
    e_icp: float
    e_rgb: float
    iterations: int
    inlier_fraction: float
    degenerate: bool
    condition: float = np.inf
    energies: list[float] = field(default_factory=list)


class IcpPairs(NamedTuple):
    src: np.ndarray        # flat frame indices
    dst: np.ndarray        # flat view indices


class RgbPairs(NamedTuple):
    src: np.ndarray        # flat frame indices
    cell: np.ndarray       # (n, 2) integer (x0, y0) of the bilinear cell


def _huber_weights(r: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(r)
    return np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))


def huber_cost(r: np.ndarray, delta: float) -> float:
    """Sum of Huber penalties scaled to equal ``r**2`` in the quadratic zone."""
    a = np.abs(r)
    return float(np.sum(np.where(a <= delta, a**2, 2 * delta * a - delta**2)))


# ------------------------------------------------------------------ ICP term
def associate_icp(frame: Frame, view: ModelView, T: Pose, K: CameraIntrinsics,
                  cfg: TrackingConfig = TrackingConfig()) -> IcpPairs:
    """Projective association with depth and normal compatibility gates."""
    v = frame.vertices.reshape(-1, 3)
    n = frame.normals.reshape(-1, 3)
    src = frame.icp_src
    q = T.apply(v[src])
    front = q[:, 2] > 1e-6
    src, q = src[front], q[front]
    uv = np.rint(K.project(q)).astype(np.int64)
    inside = (uv[:, 0] >= 0) & (uv[:, 0] < K.width) & (uv[:, 1] >= 0) & (uv[:, 1] < K.height)
    src, q, uv = src[inside], q[inside], uv[inside]
    dst = uv[:, 1] * K.width + uv[:, 0]
    vv = view.vertices.reshape(-1, 3)[dst]
    vn = view.normals.reshape(-1, 3)[dst]
    good = np.isfinite(vv).all(axis=1) & np.isfinite(vn).all(axis=1)
    good &= np.abs(vv[:, 2] - q[:, 2]) < cfg.max_dz
    cos = np.sum(T.rotate(n[src]) * vn, axis=1)
    good &= cos > np.cos(np.deg2rad(cfg.max_normal_deg))
    return IcpPairs(src[good], dst[good])


def icp_energy(frame: Frame, view: ModelView, T: Pose, K: CameraIntrinsics,
               cfg: TrackingConfig = TrackingConfig(), pairs: IcpPairs | None = None):
    """``(E_icp, residuals, Jacobian)``; pass ``pairs`` to freeze the association."""
    if pairs is None:
        pairs = associate_icp(frame, view, T, K, cfg)
    q = T.apply(frame.vertices.reshape(-1, 3)[pairs.src])
    vv = view.vertices.reshape(-1, 3)[pairs.dst]
    vn = view.normals.reshape(-1, 3)[pairs.dst]
    r = np.sum((vv - q) * vn, axis=1)
    J = -np.concatenate([np.cross(q, vn), vn], axis=1)
    return float(r @ r), r, J


# ---------------------------------------------------------- photometric term
def _bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray, x0: np.ndarray, y0: np.ndarray):
    """Value and exact gradient of the bilinear interpolant on cell (x0, y0)."""
    fx, fy = x - x0, y - y0
    i00, i10 = img[y0, x0], img[y0, x0 + 1]
    i01, i11 = img[y0 + 1, x0], img[y0 + 1, x0 + 1]
    val = (1 - fy) * ((1 - fx) * i00 + fx * i10) + fy * ((1 - fx) * i01 + fx * i11)
    gx = (1 - fy) * (i10 - i00) + fy * (i11 - i01)
    gy = (1 - fx) * (i01 - i00) + fx * (i11 - i10)
    return val, gx, gy


def _warp(frame: Frame, T: Pose, K: CameraIntrinsics, src: np.ndarray):
    q = T.apply(frame.vertices.reshape(-1, 3)[src])
    return q, K.project(q)


def associate_rgb(frame: Frame, view: ModelView, T: Pose, K: CameraIntrinsics) -> RgbPairs:
    src = frame.rgb_src
    q, uv = _warp(frame, T, K, src)
    ok = q[:, 2] > 1e-6
    ok &= (uv[:, 0] >= 0) & (uv[:, 0] <= K.width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= K.height - 1)
    src, uv = src[ok], uv[ok]
    cell = np.minimum(np.floor(uv).astype(np.int64), [K.width - 2, K.height - 2])
    img = view.intensity
    x0, y0 = cell[:, 0], cell[:, 1]
    corners = np.stack([img[y0, x0], img[y0, x0 + 1], img[y0 + 1, x0], img[y0 + 1, x0 + 1]], axis=1)
    good = np.isfinite(corners).all(axis=1)
    return RgbPairs(src[good], cell[good])


def rgb_energy(frame: Frame, view: ModelView, T: Pose, K: CameraIntrinsics, pairs: RgbPairs | None = None):
    """``(E_rgb, residuals, Jacobian)`` of ``I_frame(u) - I_view(warp(u))``."""
    if pairs is None:
        pairs = associate_rgb(frame, view, T, K)
    q, uv = _warp(frame, T, K, pairs.src)
    val, gx, gy = _bilinear(view.intensity, uv[:, 0], uv[:, 1], pairs.cell[:, 0], pairs.cell[:, 1])
    r = frame.intensity.ravel()[pairs.src] - val
    z = q[:, 2]
    # image gradient pulled back through the projection, then through exp(xi) q
    a = np.column_stack([K.fx * gx / z, K.fy * gy / z, -(K.fx * gx * q[:, 0] + K.fy * gy * q[:, 1]) / z**2])
    J = -np.concatenate([np.cross(q, a), a], axis=1)
    return float(r @ r), r, J


# ----------------------------------------------------------------- tracking
def highpass(img: np.ndarray, sigma: float) -> np.ndarray:
    """Subtract a NaN-aware Gaussian local mean; NaN stays NaN."""
    m = np.isfinite(img)
    num = gaussian_filter(np.where(m, img, 0.0), sigma, mode="nearest")
    den = gaussian_filter(m.astype(float), sigma, mode="nearest")
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(m, img - num / den, np.nan)


def _objective(frame, view, T, K, cfg):
    pi = associate_icp(frame, view, T, K, cfg)
    _, ri, Ji = icp_energy(frame, view, T, K, cfg, pi)
    if cfg.w_rgb > 0:
        pr = associate_rgb(frame, view, T, K)
        _, rr, Jr = rgb_energy(frame, view, T, K, pr)
    else:
        rr, Jr = np.zeros(0), np.zeros((0, 6))
    E = huber_cost(ri, cfg.huber_icp) + cfg.w_rgb * huber_cost(rr, cfg.huber_rgb)
    return E, (ri, Ji, rr, Jr, len(pi.src))


def _normal_equations(terms, cfg):
    ri, Ji, rr, Jr, _ = terms
    wi = _huber_weights(ri, cfg.huber_icp)
    wr = cfg.w_rgb * _huber_weights(rr, cfg.huber_rgb)
    A = (Ji * wi[:, None]).T @ Ji + (Jr * wr[:, None]).T @ Jr
    g = (Ji * wi[:, None]).T @ ri + (Jr * wr[:, None]).T @ rr
    return A, g


def track(frame: Frame, view: ModelView, T_init: Pose, K: CameraIntrinsics,
          cfg: TrackingConfig = TrackingConfig(), w_rgb: float | None = None) -> TrackingResult:
    """Minimize ``E_icp + w_rgb * E_rgb`` coarse-to-fine by Gauss-Newton."""
    if w_rgb is not None:
        cfg = TrackingConfig(**{**cfg.__dict__, "w_rgb": w_rgb})
    if cfg.highpass_sigma > 0 and cfg.w_rgb > 0:
        frame = Frame(frame.timestamp, frame.color, highpass(frame.intensity, cfg.highpass_sigma),
                      frame.depth, frame.vertices, frame.normals)
        view = ModelView(view.depth, highpass(view.intensity, cfg.highpass_sigma), view.vertices, view.normals)
    frames, views, Ks = [frame], [view], [K]
    for _ in range(cfg.levels - 1):
        if min(Ks[-1].width, Ks[-1].height) < 20:
            break
        frames.append(frames[-1].downsample(Ks[-1]))
        views.append(views[-1].downsample(Ks[-1]))
        Ks.append(Ks[-1].halved())

    T = T_init
    iterations = 0
    energies: list[float] = []
    cond = np.inf
    for lvl in reversed(range(len(Ks))):
        f, v, k = frames[lvl], views[lvl], Ks[lvl]
        lcfg = cfg if lvl < cfg.rgb_levels else replace(cfg, w_rgb=0.0)
        E, terms = _objective(f, v, T, k, lcfg)
        energies.append(E)
        for _ in range(cfg.max_iter):
            if terms[4] < 6:
                break
            A, g = _normal_equations(terms, lcfg)
            try:
                xi = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                break
            iterations += 1
            alpha, accepted = 1.0, False
            for _ in range(cfg.max_halvings + 1):
                T_new = exp_se3(alpha * xi) @ T
                E_new, terms_new = _objective(f, v, T_new, k, lcfg)
                if E_new <= E:
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                break
            rel = (E - E_new) / max(E, 1e-300)
            T, E, terms = T_new, E_new, terms_new
            energies.append(E)
            if np.linalg.norm(alpha * xi) < cfg.eps or rel < cfg.rel_tol:
                break

    # final diagnostics at full resolution
    E, terms = _objective(frame, view, T, K, cfg)
    A, _ = _normal_equations(terms, cfg)
    s = np.linalg.svd(A, compute_uv=False)
    cond = float(s[0] / s[-1]) if s[-1] > 0 else np.inf
    n_corr = terms[4]
    n_valid = int(np.count_nonzero(np.isfinite(frame.normals).all(axis=-1)))
    degenerate = n_corr < cfg.min_correspondences or not cond <= cfg.max_condition
    if degenerate:
        log.debug("degenerate tracking: %d correspondences, cond %.3g", n_corr, cond)
    ri, rr = terms[0], terms[2]
    return TrackingResult(
        pose=T,
        e_icp=float(ri @ ri),
        e_rgb=float(rr @ rr),
        iterations=iterations,
        inlier_fraction=n_corr / n_valid if n_valid else 0.0,
        degenerate=degenerate,
        condition=cond,
        energies=energies,
    )
