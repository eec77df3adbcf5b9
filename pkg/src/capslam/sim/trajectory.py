"""Ground-truth camera paths inside the scene and motion corpora.

Paths are cubic splines through keyframes of camera position and viewing
angles (yaw, pitch, roll).  The camera z axis is the viewing direction, so
the camera always looks at the stomach wall from the inside.

Archetypes:
  1  slow wandering over one region
  2  hub-and-spoke scan, returning to one hub viewpoint between excursions
  3  interleaved returns to three hubs with roll changes on the excursions
  4  fast, continuously turning motion
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from ..geometry import Pose, so3_exp, so3_log
from ..lstm import PoseSequence


@dataclass(frozen=True)
class TrajectorySpec:
    archetype: int = 1
    duration: float = 90.0      # s
    rate: float = 15.0          # Hz
    speed_scale: float = 1.0    # time warp applied to the keyframe schedule

    def __post_init__(self):
        if self.archetype not in (1, 2, 3, 4):
            raise ValueError(f"archetype must be 1..4, got {self.archetype}")
        if self.duration <= 0 or self.rate <= 0 or self.speed_scale <= 0:
            raise ValueError("duration, rate and speed_scale must be positive")

    @property
    def n_frames(self) -> int:
        return int(round(self.duration * self.rate))


def view_rotation(yaw, pitch, roll) -> np.ndarray:
    """Rotation whose third column is the viewing direction (yaw about z, pitch up from the xy plane)."""
    cy, sy, cp, sp = np.cos(yaw), np.sin(yaw), np.cos(pitch), np.sin(pitch)
    z = np.array([cp * cy, cp * sy, sp])
    x = np.array([-sy, cy, 0.0])
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=1)
    return R @ so3_exp([0.0, 0.0, roll])


@dataclass
class Keyframes:
    times: np.ndarray       # (K,) s
    positions: np.ndarray   # (K, 3) cm
    angles: np.ndarray      # (K, 3) yaw, pitch, roll (rad)

    def spline(self):
        bc = "not-a-knot" if len(self.times) > 3 else "natural"
        return CubicSpline(self.times, self.positions, bc_type=bc), CubicSpline(self.times, self.angles, bc_type=bc)


def _keyframes(archetype: int, duration: float, rng: np.random.Generator) -> Keyframes:
    yaw0 = rng.uniform(0, 2 * np.pi)
    pitch0 = rng.uniform(-0.4, 0.4)
    center = rng.uniform(-0.5, 0.5, 3)

    def times(dt):
        return np.arange(0.0, duration + 2 * dt, dt)

    if archetype == 1:
        t = times(10.0)
        ang = np.stack([yaw0 + rng.uniform(-0.25, 0.25, len(t)),
                        pitch0 + rng.uniform(-0.15, 0.15, len(t)),
                        rng.uniform(-0.1, 0.1, len(t))], axis=1)
        pos = center + rng.uniform(-0.5, 0.5, (len(t), 3))
    elif archetype == 2:
        t = times(3.5)
        ang = np.zeros((len(t), 3))
        pos = np.tile(center, (len(t), 1))
        k = 0
        for i in range(len(t)):
            if i % 2 == 0:
                ang[i] = (yaw0, pitch0, 0.0)
            else:
                phi = 2.4 * k  # golden-angle spokes around the hub
                k += 1
                ang[i] = (yaw0 + 0.5 * np.cos(phi), pitch0 + 0.35 * np.sin(phi), 0.0)
                pos[i] = center + rng.uniform(-0.8, 0.8, 3)
    elif archetype == 3:
        t = times(3.0)
        hubs = np.stack([(yaw0 + dy, pitch0 + dp, 0.0) for dy, dp in ((0, 0), (0.7, 0.2), (-0.5, -0.3))])
        hub_pos = center + rng.uniform(-0.8, 0.8, (3, 3))
        ang = np.zeros((len(t), 3))
        pos = np.zeros((len(t), 3))
        order = [0, 1, 0, 2, 1, 2]
        for i in range(len(t)):
            if i % 2 == 0:
                h = order[(i // 2) % len(order)]
                ang[i], pos[i] = hubs[h], hub_pos[h]
            else:
                a = hubs[order[(i // 2) % len(order)]]
                b = hubs[order[(i // 2 + 1) % len(order)]]
                mid = 0.5 * (a + b)
                ang[i] = mid + (rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(-0.6, 0.6))
                pos[i] = center + rng.uniform(-1.0, 1.0, 3)
    else:
        t = times(2.0)
        rate = rng.choice([-1.0, 1.0]) * 0.35  # rad/s, steady turning
        ang = np.stack([yaw0 + rate * t,
                        pitch0 + rng.uniform(-0.3, 0.3, len(t)),
                        rng.uniform(-0.4, 0.4, len(t))], axis=1)
        pos = center + rng.uniform(-1.2, 1.2, (len(t), 3))
    return Keyframes(t, pos, ang)


def generate_trajectory(spec: TrajectorySpec, scene=None, seed: int = 0) -> PoseSequence:
    """Camera-to-world poses sampled at the spec frame rate.

    ``scene`` is only used to verify that the camera stays inside the surface
    with at least 1.5 cm clearance.
    """
    rng = np.random.default_rng([seed, spec.archetype])
    kf = _keyframes(spec.archetype, spec.duration * spec.speed_scale, rng)
    ps, as_ = kf.spline()
    stamps = np.arange(spec.n_frames) / spec.rate
    tau = stamps * spec.speed_scale
    P, A = ps(tau), as_(tau)
    poses = [Pose(view_rotation(*a), p) for p, a in zip(P, A)]
    if scene is not None:
        clearance = -scene.implicit(P)
        if np.min(clearance) < 1.5:
            raise ValueError("trajectory leaves the interior of the scene")
    return PoseSequence(stamps, poses)


# ---------------------------------------------------------------- audits
def angular_speeds(seq: PoseSequence) -> np.ndarray:
    """Per-step rotation rate (rad/s)."""
    dt = np.diff(seq.stamps)
    ang = np.array([np.linalg.norm(so3_log(a.rotation.T @ b.rotation)) for a, b in zip(seq.poses[:-1], seq.poses[1:])])
    return ang / dt


def revisit_count(seq: PoseSequence, max_dist: float = 1.0, max_angle_deg: float = 10.0,
                  min_gap: float = 5.0) -> int:
    """Number of separate episodes in which the camera returns near a pose at least ``min_gap`` s older."""
    t = np.asarray(seq.stamps)
    P = np.array([p.translation for p in seq.poses])
    Z = np.array([p.rotation[:, 2] for p in seq.poses])
    Rs = np.array([p.rotation for p in seq.poses])
    cos_max = np.cos(np.deg2rad(max_angle_deg))
    hit = np.zeros(len(t), bool)
    for i in range(len(t)):
        old = t <= t[i] - min_gap
        if not old.any():
            continue
        close = (np.linalg.norm(P[old] - P[i], axis=1) < max_dist) & (Z[old] @ Z[i] > cos_max)
        if close.any():
            # full rotation check on the candidates
            tr = np.einsum("kij,ij->k", Rs[old][close], Rs[i])
            hit[i] = bool(np.any((tr - 1) / 2 > cos_max))
    return int(np.sum(hit[1:] & ~hit[:-1]) + hit[0])


# --------------------------------------------------------------- corpora
def sinusoidal_sequence(rng: np.random.Generator, n: int = 400, rate: float = 15.0) -> PoseSequence:
    """Independent sinusoids on each translation and rotation-vector axis."""
    A = rng.uniform(0.5, 2.0, 3)
    f = rng.uniform(0.1, 0.4, 3)
    ph = rng.uniform(0, 2 * np.pi, 3)
    B = rng.uniform(0.1, 0.4, 3)
    g = rng.uniform(0.1, 0.4, 3)
    ps = rng.uniform(0, 2 * np.pi, 3)
    t = np.arange(n) / rate
    poses = [Pose(so3_exp(B * np.sin(2 * np.pi * g * s + ps)), A * np.sin(2 * np.pi * f * s + ph)) for s in t]
    return PoseSequence(t, poses)


def constant_velocity_sequence(rng: np.random.Generator, n: int = 400, rate: float = 15.0,
                               noise: float = 0.0) -> PoseSequence:
    from ..geometry import exp_se3

    step = np.concatenate([rng.normal(size=3) * 0.01, rng.normal(size=3) * 0.05])
    poses = [Pose()]
    for _ in range(n - 1):
        poses.append(poses[-1] @ exp_se3(step + noise * rng.normal(size=6)))
    return PoseSequence(np.arange(n) / rate, poses)


def motion_corpus(kind: str, seed: int, n_sequences: int = 12, n: int = 400) -> list[PoseSequence]:
    rng = np.random.default_rng(seed)
    if kind == "sinusoidal":
        return [sinusoidal_sequence(rng, n) for _ in range(n_sequences)]
    if kind == "constant_velocity":
        return [constant_velocity_sequence(rng, n) for _ in range(n_sequences)]
    raise ValueError(f"unknown corpus {kind!r}")
