"""Surfel map: frame fusion, splat rendering and active/inactive bookkeeping.

Time is counted in integrated frames.  A surfel is active while
``map.time - last_updated <= delta_t``; only active surfels take part in
fusion and in the predicted view used for tracking.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics, DepthImage
from .geometry import Pose
from .tracker import Frame, ModelView

log = logging.getLogger(__name__)

FIELDS = ("positions", "normals", "colors", "intensity", "weights", "radii", "t_init", "t_last")


@dataclass
class SurfelConfig:
    dist_gate: float = 1.0          # cm
    normal_gate_deg: float = 20.0
    delta_t: int = 100              # frames
    min_radius: float = 1e-3        # cm
    max_radius: float = 0.5         # cm
    max_splat_px: int = 2           # half width of the splat window
    min_view_pixels: int = 50


class SurfelMap:
    """Structure-of-arrays surfel store."""

    def __init__(self, cfg: SurfelConfig | None = None):
        self.cfg = cfg or SurfelConfig()
        self.positions = np.zeros((0, 3))
        self.normals = np.zeros((0, 3))
        self.colors = np.zeros((0, 3))
        self.intensity = np.zeros(0)
        self.weights = np.zeros(0)
        self.radii = np.zeros(0)
        self.t_init = np.zeros(0, dtype=np.int64)
        self.t_last = np.zeros(0, dtype=np.int64)
        self.time = 0

    def __len__(self) -> int:
        return len(self.weights)

    def copy(self) -> "SurfelMap":
        m = SurfelMap(self.cfg)
        for k in FIELDS:
            setattr(m, k, getattr(self, k).copy())
        m.time = self.time
        return m

    def active_mask(self) -> np.ndarray:
        return (self.time - self.t_last) <= self.cfg.delta_t

    def inactive_mask(self) -> np.ndarray:
        return ~self.active_mask()

    def append(self, positions, normals, colors, intensity, radii, weights=None) -> None:
        n = len(positions)
        self.positions = np.concatenate([self.positions, positions])
        self.normals = np.concatenate([self.normals, normals])
        self.colors = np.concatenate([self.colors, colors])
        self.intensity = np.concatenate([self.intensity, intensity])
        self.radii = np.concatenate([self.radii, radii])
        self.weights = np.concatenate([self.weights, np.ones(n) if weights is None else weights])
        self.t_init = np.concatenate([self.t_init, np.full(n, self.time, dtype=np.int64)])
        self.t_last = np.concatenate([self.t_last, np.full(n, self.time, dtype=np.int64)])

    def select(self, mask) -> "SurfelMap":
        m = SurfelMap(self.cfg)
        for k in FIELDS:
            setattr(m, k, getattr(self, k)[mask].copy())
        m.time = self.time
        return m

    def audit(self) -> None:
        """Raise if a structural invariant is broken."""
        if np.any(self.weights <= 0) or np.any(self.radii <= 0):
            raise AssertionError("non-positive weight or radius")
        if len(self) and np.max(np.abs(np.linalg.norm(self.normals, axis=1) - 1)) > 1e-9:
            raise AssertionError("non-unit normal")
        if np.any(self.t_last < self.t_init) or np.any(self.t_last > self.time):
            raise AssertionError("timestamps out of order")


def _frame_colors(frame: Frame) -> np.ndarray:
    if frame.color is not None:
        return np.asarray(frame.color, float).reshape(-1, 3)
    return np.repeat(frame.intensity.reshape(-1, 1), 3, axis=1)


def _covered(m: SurfelMap, act, uv, slot, free, P, N, K: CameraIntrinsics, cos_gate: float) -> np.ndarray:
    """Unmatched points already lying on the disk of an active surfel one pixel away.

    These are neither fused nor added, which keeps sub-pixel drift of the
    surfel centres from spawning a duplicate layer every frame.
    """
    out = np.zeros(len(free), bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            u, v = uv[:, 0] + dx, uv[:, 1] + dy
            inb = (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
            k = slot[v[inb] * K.width + u[inb]]
            s = act[inb]
            has = k >= 0
            k, s = k[has], s[has]
            has = free[k] & ~out[k]
            k, s = k[has], s[has]
            d = P[k] - m.positions[s]
            ok = ((np.linalg.norm(d, axis=1) <= m.radii[s])
                  & (np.abs(np.sum(d * m.normals[s], axis=1)) < m.cfg.dist_gate)
                  & (np.sum(N[k] * m.normals[s], axis=1) > cos_gate))
            out[k[ok]] = True
    return out


def integrate_frame(m: SurfelMap, frame: Frame, pose: Pose, K: CameraIntrinsics) -> SurfelMap:
    """Fuse ``frame`` (camera-to-world ``pose``) into ``m`` in place and return it."""
    cfg = m.cfg
    v = frame.vertices.reshape(-1, 3)
    nrm = frame.normals.reshape(-1, 3)
    ok = np.isfinite(v).all(axis=1) & np.isfinite(nrm).all(axis=1) & np.isfinite(frame.intensity.reshape(-1))
    pix = np.flatnonzero(ok)
    if len(pix) == 0:
        m.time += 1
        return m
    P = pose.apply(v[pix])
    N = pose.rotate(nrm[pix])
    C = _frame_colors(frame)[pix]
    I = frame.intensity.reshape(-1)[pix]
    R = np.clip(v[pix, 2] * np.sqrt(2.0) / K.fx, cfg.min_radius, cfg.max_radius)

    # projective association of active surfels
    slot = np.full(K.height * K.width, -1)
    slot[pix] = np.arange(len(pix))
    act = np.flatnonzero(m.active_mask())
    matched_pt = np.zeros(0, int)
    matched_sf = np.zeros(0, int)
    cos_gate = np.cos(np.deg2rad(cfg.normal_gate_deg))
    uv = np.zeros((0, 2), int)
    if len(act):
        q = pose.inverse().apply(m.positions[act])
        front = q[:, 2] > 1e-6
        act, q = act[front], q[front]
        uv = np.rint(K.project(q)).astype(int)
        inside = (uv[:, 0] >= 0) & (uv[:, 0] < K.width) & (uv[:, 1] >= 0) & (uv[:, 1] < K.height)
        act, uv = act[inside], uv[inside]
        seen_act, seen_uv = act, uv
        k = slot[uv[:, 1] * K.width + uv[:, 0]]
        has = k >= 0
        act, k = act[has], k[has]
        dist = np.linalg.norm(m.positions[act] - P[k], axis=1)
        cosang = np.sum(m.normals[act] * N[k], axis=1)
        good = (dist < cfg.dist_gate) & (cosang > cos_gate)
        act, k, dist = act[good], k[good], dist[good]
        # closest surfel wins each pixel
        order = np.lexsort((dist, k))
        k, act = k[order], act[order]
        first = np.r_[True, k[1:] != k[:-1]] if len(k) else np.zeros(0, bool)
        matched_pt, matched_sf = k[first], act[first]

    if len(matched_sf):
        w = m.weights[matched_sf][:, None]
        m.positions[matched_sf] = (w * m.positions[matched_sf] + P[matched_pt]) / (w + 1)
        n_new = w * m.normals[matched_sf] + N[matched_pt]
        m.normals[matched_sf] = n_new / np.linalg.norm(n_new, axis=1, keepdims=True)
        m.colors[matched_sf] = (w * m.colors[matched_sf] + C[matched_pt]) / (w + 1)
        m.intensity[matched_sf] = (w[:, 0] * m.intensity[matched_sf] + I[matched_pt]) / (w[:, 0] + 1)
        m.radii[matched_sf] = np.minimum(m.radii[matched_sf], R[matched_pt])
        m.weights[matched_sf] += 1.0
        m.t_last[matched_sf] = m.time

    new = np.ones(len(pix), bool)
    new[matched_pt] = False
    if len(uv) and new.any():
        new &= ~_covered(m, seen_act, seen_uv, slot, new, P, N, K, cos_gate)
    m.append(P[new], N[new], C[new], I[new], R[new])
    m.time += 1
    return m


@dataclass
class RenderedView:
    view: ModelView
    index: np.ndarray       # (H, W) surfel id, -1 where empty
    empty: bool

    @property
    def n_pixels(self) -> int:
        return int(np.count_nonzero(self.index >= 0))


def render_surfels(m: SurfelMap, ids: np.ndarray, pose: Pose, K: CameraIntrinsics) -> RenderedView:
    """Z-buffered disk splats of surfels ``ids`` seen from camera-to-world ``pose``."""
    cfg = m.cfg
    H, W = K.height, K.width
    depth = np.full(H * W, np.nan)
    index = np.full(H * W, -1)
    normals = np.full((H * W, 3), np.nan)
    inten = np.full(H * W, np.nan)
    rays = K.rays().reshape(-1, 3)
    inv = pose.inverse()
    q = inv.apply(m.positions[ids])
    n = inv.rotate(m.normals[ids])
    # front of the camera and facing it
    keep = (q[:, 2] > 1e-3) & (np.sum(n * q, axis=1) < 0)
    ids, q, n = ids[keep], q[keep], n[keep]
    if len(ids):
        r = m.radii[ids]
        uv = K.project(q)
        c = np.rint(uv).astype(int)
        # pixels farther than radius + 0.5 from the rounded center cannot be covered
        half = np.minimum(np.floor(r * K.fx / q[:, 2] + 0.5).astype(int), cfg.max_splat_px)
        nq = np.sum(n * q, axis=1)
        cand_pix, cand_z, cand_id = [], [], []
        hmax = int(half.max())
        for dy in range(-hmax, hmax + 1):
            for dx in range(-hmax, hmax + 1):
                sel = (np.abs(dx) <= half) & (np.abs(dy) <= half)
                u, v = c[sel, 0] + dx, c[sel, 1] + dy
                inb = (u >= 0) & (u < W) & (v >= 0) & (v < H)
                s = np.flatnonzero(sel)[inb]
                p = v[inb] * W + u[inb]
                ray = rays[p]
                denom = np.sum(n[s] * ray, axis=1)
                with np.errstate(divide="ignore", invalid="ignore"):
                    z = nq[s] / denom
                x = z[:, None] * ray
                hit = (denom < 0) & (z > 0) & (np.linalg.norm(x - q[s], axis=1) <= r[s])
                cand_pix.append(p[hit])
                cand_z.append(z[hit])
                cand_id.append(s[hit])
        p = np.concatenate(cand_pix)
        z = np.concatenate(cand_z)
        s = np.concatenate(cand_id)
        order = np.lexsort((z, p))
        p, z, s = p[order], z[order], s[order]
        first = np.r_[True, p[1:] != p[:-1]] if len(p) else np.zeros(0, bool)
        p, z, s = p[first], z[first], s[first]
        depth[p] = z
        index[p] = ids[s]
        normals[p] = n[s]
        inten[p] = m.intensity[ids[s]]
    depth = depth.reshape(H, W)
    verts = depth[..., None] * rays.reshape(H, W, 3)
    view = ModelView(DepthImage(np.nan_to_num(depth, nan=0.0)), inten.reshape(H, W), verts,
                     normals.reshape(H, W, 3))
    index = index.reshape(H, W)
    return RenderedView(view, index, int(np.count_nonzero(index >= 0)) < cfg.min_view_pixels)


def predict_view(m: SurfelMap, pose: Pose, K: CameraIntrinsics) -> RenderedView:
    """Rendered active model, the reference for frame-to-model tracking."""
    return render_surfels(m, np.flatnonzero(m.active_mask()), pose, K)


def predict_inactive_view(m: SurfelMap, pose: Pose, K: CameraIntrinsics) -> RenderedView:
    return render_surfels(m, np.flatnonzero(m.inactive_mask()), pose, K)


# ------------------------------------------------------------------ export
def write_map(path, m: SurfelMap) -> None:
    """ASCII PLY with per-vertex position, normal, 8-bit color, radius and weight."""
    rgb = np.round(np.clip(m.colors, 0, 1) * 255).astype(int)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\ncomment surfel map, lengths in cm\n")
        fh.write(f"element vertex {len(m)}\n")
        for name in ("x", "y", "z", "nx", "ny", "nz"):
            fh.write(f"property float {name}\n")
        for name in ("red", "green", "blue"):
            fh.write(f"property uchar {name}\n")
        fh.write("property float radius\nproperty float weight\nend_header\n")
        for p, n, c, r, w in zip(m.positions, m.normals, rgb, m.radii, m.weights):
            fh.write(" ".join([*(f"{x:.6f}" for x in p), *(f"{x:.6f}" for x in n), *map(str, c), f"{r:.6f}", f"{w:.3f}"]) + "\n")


def read_points(path) -> dict[str, np.ndarray]:
    """Read an ASCII PLY vertex element into named columns."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError("not a PLY file")
    names, n, start = [], 0, 0
    for i, line in enumerate(lines):
        tok = line.split()
        if tok[:2] == ["element", "vertex"]:
            n = int(tok[2])
        elif tok and tok[0] == "property":
            names.append(tok[-1])
        elif tok and tok[0] == "format" and tok[1] != "ascii":
            raise ValueError("only ascii PLY is supported")
        elif line.strip() == "end_header":
            start = i + 1
            break
    data = np.loadtxt(lines[start:start + n], ndmin=2) if n else np.zeros((0, len(names)))
    return {k: data[:, j] for j, k in enumerate(names)}


def read_map(path, cfg: SurfelConfig | None = None) -> SurfelMap:
    cols = read_points(path)
    m = SurfelMap(cfg)
    P = np.column_stack([cols["x"], cols["y"], cols["z"]])
    n = len(P)
    N = np.column_stack([cols[k] for k in ("nx", "ny", "nz")]) if "nx" in cols else np.tile([0.0, 0.0, 1.0], (n, 1))
    N = N / np.linalg.norm(N, axis=1, keepdims=True)
    C = np.column_stack([cols[k] for k in ("red", "green", "blue")]) / 255 if "red" in cols else np.full((n, 3), 0.5)
    R = cols.get("radius", np.full(n, 0.1))
    Wt = cols.get("weight", np.ones(n))
    m.append(P, N, C, C.mean(axis=1), R, Wt)
    return m


def write_points(path, points: np.ndarray, normals: np.ndarray | None = None) -> None:
    """Minimal ASCII PLY of a point set, e.g. a ground-truth surface sample."""
    has_n = normals is not None
    with open(path, "w") as fh:
        fh.write(f"ply\nformat ascii 1.0\ncomment lengths in cm\nelement vertex {len(points)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        if has_n:
            fh.write("property float nx\nproperty float ny\nproperty float nz\n")
        fh.write("end_header\n")
        rows = np.hstack([points, normals]) if has_n else points
        np.savetxt(fh, rows, fmt="%.6f")
