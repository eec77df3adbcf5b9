"""Procedural stomach-like scene: a bumpy ellipsoid seen from the inside.

The surface is star-shaped about the origin, ``x = rho(d) d`` for unit
directions ``d``.  Vessel texture and albedo are functions of ``d`` only, so
texture is attached to the surface and consistent across views.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from ..camera import CameraIntrinsics
from ..geometry import Pose
from ..shading import shade_points


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5**0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=-1)


@dataclass(frozen=True, eq=False)
class SceneModel:
    semi_axes: np.ndarray          # ellipsoid semi-axes (cm)
    bump_dirs: np.ndarray          # (B, 3) unit centers of spherical bumps
    bump_amps: np.ndarray          # (B,) relative radius change
    bump_kappa: np.ndarray         # (B,) angular width (rad)
    wave_dirs: np.ndarray          # (V, 3) vessel field plane-wave directions
    wave_k: np.ndarray             # (V,) wave numbers
    wave_phase: np.ndarray         # (V,)
    vessel_width: float            # |F| scale of the vessel profile
    base_albedo: np.ndarray = np.array([0.92, 0.62, 0.55])
    vessel_darkening: np.ndarray = np.array([0.35, 0.6, 0.6])
    light_power: float = 15.0

    # ---------------------------------------------------------- geometry
    def radius(self, d: np.ndarray) -> np.ndarray:
        ell = 1.0 / np.sqrt(np.sum((d / self.semi_axes) ** 2, axis=-1))
        cosang = d @ self.bump_dirs.T
        bumps = np.exp((cosang - 1.0) / self.bump_kappa**2) @ self.bump_amps
        return ell * (1.0 + bumps)

    def implicit(self, x: np.ndarray) -> np.ndarray:
        """Signed function: negative inside, zero on the surface (cm)."""
        r = np.linalg.norm(x, axis=-1)
        return r - self.radius(x / r[..., None])

    def surface_normal(self, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
        """Outward unit normal at surface points."""
        g = np.stack(
            [(self.implicit(x + h * e) - self.implicit(x - h * e)) / (2 * h) for e in np.eye(3)], axis=-1
        )
        return g / np.linalg.norm(g, axis=-1, keepdims=True)

    def surface_points(self, n: int) -> np.ndarray:
        d = fibonacci_sphere(n)
        return self.radius(d)[:, None] * d

    # ----------------------------------------------------------- texture
    def vessel_field(self, d: np.ndarray) -> np.ndarray:
        return np.cos((d @ self.wave_dirs.T) * self.wave_k + self.wave_phase).sum(axis=-1) / np.sqrt(len(self.wave_k))

    def vessel_profile(self, d: np.ndarray) -> np.ndarray:
        """1 on vessel centerlines, decaying to 0 off-vessel."""
        f = self.vessel_field(d)
        return np.exp(-0.5 * (f / self.vessel_width) ** 2)

    def albedo(self, d: np.ndarray) -> np.ndarray:
        v = self.vessel_profile(d)[..., None]
        return self.base_albedo * (1.0 - self.vessel_darkening * v)

    def vessel_coverage(self, n: int = 200_000) -> float:
        """Area fraction with vessel profile above one half."""
        d = fibonacci_sphere(n)
        r = self.radius(d)
        # area element of a star-shaped surface ~ r^2 / cos(angle between d and normal)
        x = r[:, None] * d
        cos = np.abs(np.sum(self.surface_normal(x) * d, axis=-1))
        w = r**2 / cos
        return float(np.sum(w * (self.vessel_profile(d) > 0.5)) / np.sum(w))

    def surface_area(self, n: int = 200_000) -> float:
        d = fibonacci_sphere(n)
        r = self.radius(d)
        cos = np.abs(np.sum(self.surface_normal(r[:, None] * d) * d, axis=-1))
        return float(4 * np.pi * np.mean(r**2 / cos))

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.semi_axes, self.bump_dirs, self.bump_amps, self.bump_kappa,
                  self.wave_dirs, self.wave_k, self.wave_phase, np.array([self.vessel_width])):
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()

    # --------------------------------------------------------- rendering
    def raycast(self, origins: np.ndarray, dirs: np.ndarray, iters: int = 20) -> np.ndarray:
        """Distance along unit ``dirs`` to the surface from interior ``origins``."""
        lo = np.zeros(dirs.shape[:-1])
        hi = np.full(dirs.shape[:-1], 3.0 * float(np.max(self.semi_axes)))
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            inside = self.implicit(origins + mid[..., None] * dirs) < 0
            lo = np.where(inside, mid, lo)
            hi = np.where(inside, hi, mid)
        s = 0.5 * (lo + hi)
        # secant polish
        for _ in range(3):
            f0 = self.implicit(origins + s[..., None] * dirs)
            f1 = self.implicit(origins + (s + 1e-6)[..., None] * dirs)
            slope = (f1 - f0) / 1e-6
            s = s - np.where(np.abs(slope) > 1e-12, f0 / slope, 0.0)
        return s

    def render(self, pose: Pose, K: CameraIntrinsics):
        """Render RGB, z-depth (cm) and camera-frame points for camera pose ``pose``.

        ``pose`` maps camera coordinates to world coordinates.
        """
        rays = K.rays()
        ray_len = np.linalg.norm(rays, axis=-1)
        dirs_cam = rays / ray_len[..., None]
        dirs = dirs_cam @ pose.rotation.T
        origins = np.broadcast_to(pose.translation, dirs.shape)
        s = self.raycast(origins, dirs)
        x = origins + s[..., None] * dirs
        depth = s / ray_len
        n_world = -self.surface_normal(x)
        pts_cam = depth[..., None] * rays
        n_cam = n_world @ pose.rotation
        shade = self.light_power * shade_points(pts_cam, n_cam, 1.0)
        d = x / np.linalg.norm(x, axis=-1, keepdims=True)
        rgb = np.clip(self.albedo(d) * shade[..., None], 0.0, 1.0)
        return rgb, depth, pts_cam


def generate_scene(seed: int, semi_axes=(7.0, 5.5, 4.5), n_bumps: int = 10, n_waves: int = 9,
                   vessel_fraction: float = 0.10) -> SceneModel:
    rng = np.random.default_rng(seed)

    def unit(n):
        v = rng.normal(size=(n, 3))
        return v / np.linalg.norm(v, axis=-1, keepdims=True)

    scene = SceneModel(
        semi_axes=np.asarray(semi_axes, float),
        bump_dirs=unit(n_bumps),
        bump_amps=rng.uniform(-0.08, 0.08, n_bumps),
        bump_kappa=rng.uniform(0.25, 0.45, n_bumps),
        wave_dirs=unit(n_waves),
        wave_k=rng.uniform(5.0, 10.0, n_waves),
        wave_phase=rng.uniform(0, 2 * np.pi, n_waves),
        vessel_width=1.0,
    )
    # calibrate the profile width so the area above one half hits the target
    f = np.abs(scene.vessel_field(fibonacci_sphere(100_000)))
    width = float(np.quantile(f, vessel_fraction)) / np.sqrt(2 * np.log(2))
    return SceneModel(**{**scene.__dict__, "vessel_width": width})
