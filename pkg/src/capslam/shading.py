"""Perspective shape from shading with a light at the camera center.

The forward model is Lambertian with inverse-square falloff::

    I(u) = albedo * max(0, n(u) . l(u)) / |P(u)|^2

where ``P(u)`` is the back-projected point, ``l = -P/|P|`` and ``n`` comes from
central-difference tangents (the same stencil as :func:`camera.compute_normals`).
The inverse problem is solved by Gauss-Newton on log-depth.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.ndimage import zoom
from scipy.sparse.linalg import splu

from .camera import CameraIntrinsics, DepthImage

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ShadingModel:
    albedo: float = 1.0
    falloff: float = 2.0

    def __post_init__(self):
        if self.albedo <= 0:
            raise ValueError("albedo must be positive")
        if self.falloff != 2.0:
            raise ValueError("only inverse-square falloff is modelled")


@dataclass
class ShadingSolution:
    depth: DepthImage
    energies: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


class ShadingConvergenceError(RuntimeError):
    def __init__(self, message: str, best: ShadingSolution):
        super().__init__(message)
        self.best = best


def shade_points(points: np.ndarray, normals: np.ndarray, albedo: float) -> np.ndarray:
    """Camera-light Lambertian irradiance for camera-frame points and normals."""
    r = np.linalg.norm(points, axis=-1)
    cos = -np.sum(normals * points, axis=-1) / r
    return albedo * np.maximum(cos, 0.0) / r**2


def _tangent_cross(P: np.ndarray):
    dx = P[1:-1, 2:] - P[1:-1, :-2]
    dy = P[2:, 1:-1] - P[:-2, 1:-1]
    return dx, dy, np.cross(dy, dx)


def render_shading(depth, K: CameraIntrinsics, m: ShadingModel) -> np.ndarray:
    """Irradiance image; border pixels (no central difference) are 0."""
    d = depth.values if isinstance(depth, DepthImage) else np.asarray(depth, float)
    P = d[..., None] * K.rays()
    _, _, c = _tangent_cross(P)
    n = c / np.linalg.norm(c, axis=-1, keepdims=True)
    out = np.zeros(d.shape)
    out[1:-1, 1:-1] = shade_points(P[1:-1, 1:-1], n, m.albedo)
    return np.nan_to_num(out)


def _residuals_and_jacobian(log_depth: np.ndarray, img: np.ndarray, rays: np.ndarray, albedo: float,
                            with_jacobian: bool = True):
    H, W = log_depth.shape
    P = np.exp(log_depth)[..., None] * rays
    dx, dy, c = _tangent_cross(P)
    Pc = P[1:-1, 1:-1]
    cn = np.linalg.norm(c, axis=-1)
    pn = np.linalg.norm(Pc, axis=-1)
    cp = np.sum(c * Pc, axis=-1)
    f = -albedo * cp / (cn * pn**3)
    lit = f > 0
    rendered = np.where(lit, f, 0.0)
    r = (rendered - img[1:-1, 1:-1]).ravel()
    if not with_jacobian:
        return r, None, lit
    inv = 1.0 / (cn * pn**3)
    g_c = -albedo * (Pc * inv[..., None] - (cp * inv / cn**2)[..., None] * c)
    g_p = -albedo * (c * inv[..., None] - (3.0 * cp * inv / pn**2)[..., None] * Pc)
    g_dx = np.cross(g_c, dy)
    g_dy = np.cross(dx, g_c)
    mask = lit[..., None]
    g_c = g_c * mask
    g_p, g_dx, g_dy = g_p * mask, g_dx * mask, g_dy * mask

    idx = np.arange(H * W).reshape(H, W)
    rows = np.arange((H - 2) * (W - 2))
    entries = [
        (idx[1:-1, 1:-1], np.sum(g_p * Pc, axis=-1)),
        (idx[1:-1, 2:], np.sum(g_dx * P[1:-1, 2:], axis=-1)),
        (idx[1:-1, :-2], -np.sum(g_dx * P[1:-1, :-2], axis=-1)),
        (idx[2:, 1:-1], np.sum(g_dy * P[2:, 1:-1], axis=-1)),
        (idx[:-2, 1:-1], -np.sum(g_dy * P[:-2, 1:-1], axis=-1)),
    ]
    cols = np.concatenate([e[0].ravel() for e in entries])
    vals = np.concatenate([e[1].ravel() for e in entries])
    J = sp.csr_matrix((vals, (np.tile(rows, 5), cols)), shape=(rows.size, H * W))
    return r, J, lit


def shading_residuals(log_depth, img, K: CameraIntrinsics, m: ShadingModel):
    """Residual vector and sparse Jacobian w.r.t. log-depth (interior pixels)."""
    return _residuals_and_jacobian(np.asarray(log_depth, float), np.asarray(img, float), K.rays(), m.albedo)[:2]


def laplacian_operator(H: int, W: int) -> sp.csr_matrix:
    """5-point Laplacian with reflective (Neumann) borders."""
    def lap1d(n):
        main = -2.0 * np.ones(n)
        main[0] = main[-1] = -1.0
        return sp.diags([np.ones(n - 1), main, np.ones(n - 1)], [-1, 0, 1])
    return (sp.kron(sp.identity(H), lap1d(W)) + sp.kron(lap1d(H), sp.identity(W))).tocsr()


def flat_plane_depth(img: np.ndarray, K: CameraIntrinsics, m: ShadingModel) -> float:
    """Depth of the fronto-parallel plane that best explains ``img`` (median per-pixel inversion)."""
    rays = K.rays()
    ray_len3 = np.linalg.norm(rays, axis=-1) ** 3
    ok = img > 0
    return float(np.median(np.sqrt(m.albedo / (img[ok] * ray_len3[ok]))))


def _energy(r, Lz, reg):
    return float(r @ r + reg * (Lz @ Lz))


def solve_shading(
    img: np.ndarray,
    K: CameraIntrinsics,
    m: ShadingModel = ShadingModel(),
    reg: float = 1e-3,
    init=None,
    max_iter: int = 50,
    tol: float = 1e-6,
    max_halvings: int = 10,
    max_size: tuple[int, int] = (160, 120),
    levels: int = 3,
) -> ShadingSolution:
    """Gauss-Newton on log-depth for ``sum (render - img)^2 + reg * sum (lap log d)^2``.

    Images larger than ``max_size`` (width, height) are block-averaged down,
    solved, and the depth is upsampled back.  Each solve runs coarse-to-fine
    over ``levels`` 2x pyramid levels; ``max_iter`` and ``tol`` apply per level.
    """
    img = np.asarray(img, dtype=float)
    if img.min() < 0 or img.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    init = None if init is None else _init_array(init)
    factor = 1
    while img.shape[1] // factor > max_size[0] or img.shape[0] // factor > max_size[1]:
        factor *= 2
    if factor == 1:
        return _solve_pyramid(img, K, m, reg, init, max_iter, tol, max_halvings, levels)
    sol = _solve_pyramid(_block_mean(img, factor), _shrink(K, factor), m, reg,
                         None if init is None else _block_mean(init, factor),
                         max_iter, tol, max_halvings, levels)
    sol.depth = DepthImage(_upsample(sol.depth.values, factor, img.shape),
                           _upsample(sol.depth.valid.astype(float), factor, img.shape, order=0) > 0.5)
    return sol


def _upsample(a: np.ndarray, factor: int, shape, order: int = 1) -> np.ndarray:
    up = zoom(a, factor, order=order)[: shape[0], : shape[1]]
    return np.pad(up, [(0, shape[0] - up.shape[0]), (0, shape[1] - up.shape[1])], mode="edge")


def _solve_pyramid(img, K, m, reg, init, max_iter, tol, max_halvings, levels) -> ShadingSolution:
    imgs, Ks, inits = [img], [K], [init]
    for _ in range(levels - 1):
        if min(imgs[-1].shape) < 16:
            break
        imgs.append(_block_mean(imgs[-1], 2))
        Ks.append(_shrink(Ks[-1], 2))
        inits.append(None if init is None else _block_mean(inits[-1], 2))
    guess = inits[-1]
    for lvl in reversed(range(len(imgs))):
        sol = _solve_native(imgs[lvl], Ks[lvl], m, reg, guess, max_iter, tol, max_halvings)
        if lvl > 0:
            guess = np.exp(_upsample(np.log(sol.depth.values), 2, imgs[lvl - 1].shape))
    return sol


def _init_array(init) -> np.ndarray:
    return init.values if isinstance(init, DepthImage) else np.asarray(init, float)


def _block_mean(a: np.ndarray, f: int) -> np.ndarray:
    H, W = a.shape[0] // f, a.shape[1] // f
    return a[: H * f, : W * f].reshape(H, f, W, f).mean(axis=(1, 3))


def _shrink(K: CameraIntrinsics, f: int) -> CameraIntrinsics:
    return CameraIntrinsics(K.fx / f, K.fy / f, (K.cx + 0.5) / f - 0.5, (K.cy + 0.5) / f - 0.5,
                            K.width // f, K.height // f)


def _solve_native(img, K, m, reg, init, max_iter, tol, max_halvings) -> ShadingSolution:
    H, W = img.shape
    if (H, W) != K.shape:
        raise ValueError(f"image shape {img.shape} does not match intrinsics {K.shape}")
    rays = K.rays()
    if init is None:
        init = np.full((H, W), flat_plane_depth(img, K, m))
    if np.any(~np.isfinite(init)) or np.any(init <= 0):
        raise ValueError("initial depth must be positive and finite")
    z = np.log(init).ravel().copy()
    L = laplacian_operator(H, W)
    LtL = (L.T @ L).tocsr()

    r, J, lit = _residuals_and_jacobian(z.reshape(H, W), img, rays, m.albedo)
    Lz = L @ z
    E = _energy(r, Lz, reg)
    sol = ShadingSolution(DepthImage(np.exp(z).reshape(H, W)), [E])
    damping = 1e-9
    for it in range(1, max_iter + 1):
        A = (J.T @ J + reg * LtL).tocsc()
        A = A + sp.identity(H * W, format="csc") * (damping * max(A.diagonal().max(), 1e-30))
        g = J.T @ r + reg * (LtL @ z)
        # A is SPD: symmetric ordering without pivoting halves the factorization time
        step = splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                    options=dict(SymmetricMode=True)).solve(-g)
        alpha = 1.0
        for _ in range(max_halvings + 1):
            z_new = z + alpha * step
            r_new, _, _ = _residuals_and_jacobian(z_new.reshape(H, W), img, rays, m.albedo, with_jacobian=False)
            E_new = _energy(r_new, L @ z_new, reg)
            if np.isfinite(E_new) and E_new <= E:
                break
            alpha *= 0.5
        else:
            if E < 1e-24:
                sol.converged = True
                return sol
            raise ShadingConvergenceError(f"no energy decrease at iteration {it}", sol)
        rel = (E - E_new) / max(E, 1e-300)
        z, E = z_new, E_new
        r, J, lit = _residuals_and_jacobian(z.reshape(H, W), img, rays, m.albedo)
        valid = np.zeros((H, W), bool)
        valid[1:-1, 1:-1] = img[1:-1, 1:-1] > 0
        sol = ShadingSolution(DepthImage(np.exp(z).reshape(H, W), valid), sol.energies + [E], it)
        if rel < tol:
            sol.converged = True
            break
    return sol


def depth_from_shading(img, K: CameraIntrinsics, m: ShadingModel = ShadingModel(), reg: float = 1e-3,
                       init=None, **kw) -> DepthImage:
    return solve_shading(img, K, m, reg, init, **kw).depth
