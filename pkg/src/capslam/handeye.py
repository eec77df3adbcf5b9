"""Magnet-to-camera calibration from paired motions, AX = XB by dual quaternions.

``A_i`` is a camera motion and ``B_i`` the magnet motion over the same
interval, so ``A_i = X B_i X^-1`` with ``X`` the magnet-to-camera transform.
The magnet pose is only 5-DoF; ``complete_5dof`` fills in roll by a fixed
convention before motions are formed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import DualQuaternion, Pose, dq_to_pose, hat, pose_to_dq, so3_exp, so3_log
from .magnetic import Pose5

log = logging.getLogger(__name__)

REFERENCE_SWITCH_DEG = 5.0


class HandEyeDegeneracyError(ValueError):
    def __init__(self, msg: str, score: float = 0.0):
        super().__init__(f"{msg} (motion sufficiency {score:.4g} deg)")
        self.score = score


def complete_5dof(p5: Pose5, assumed_roll: float = 0.0) -> Pose:
    """Full pose whose z axis is the heading, with roll measured from a reference vector.

    The reference is global x, or global y when the heading is within 5 deg
    of global x.  Roll 0 puts the body x axis in the plane of heading and
    reference.
    """
    h = p5.heading / np.linalg.norm(p5.heading)
    ref = np.array([1.0, 0.0, 0.0])
    if abs(h @ ref) > np.cos(np.deg2rad(REFERENCE_SWITCH_DEG)):
        ref = np.array([0.0, 1.0, 0.0])
    x = ref - (ref @ h) * h
    x /= np.linalg.norm(x)
    R = np.column_stack([x, np.cross(h, x), h])
    return Pose(R @ so3_exp([0.0, 0.0, assumed_roll]), p5.position)


@dataclass
class MotionPair:
    A: Pose     # camera motion
    B: Pose     # magnet motion over the same interval


@dataclass
class CalibrationResult:
    X: Pose
    residual: float          # mean Frobenius norm of A X - X B
    residual_rot: float      # mean rotation mismatch (rad)
    sufficiency: float       # largest angle between rotation axes (deg)
    n_used: int


def _axis(p: Pose) -> np.ndarray | None:
    w = so3_log(p.rotation)
    n = np.linalg.norm(w)
    return w / n if n > 1e-9 else None


def motion_sufficiency(pairs: list[MotionPair]) -> float:
    """Largest angle between any two rotation axes of ``B``, folded to [0, 90] deg."""
    axes = [a for a in (_axis(p.B) for p in pairs) if a is not None]
    best = 0.0
    for i in range(len(axes)):
        for j in range(i + 1, len(axes)):
            c = abs(float(axes[i] @ axes[j]))
            best = max(best, np.degrees(np.arctan2(np.linalg.norm(np.cross(axes[i], axes[j])), c)))
    return best


def screw_filter(pairs: list[MotionPair], sigma: float) -> list[MotionPair]:
    """Drop pairs whose rotation angles disagree by more than 3 sigma."""
    return [p for p in pairs if abs(p.A.angle() - p.B.angle()) <= 3 * sigma]


def _dq(p: Pose) -> DualQuaternion:
    return pose_to_dq(p)


def _block(a: DualQuaternion, b: DualQuaternion) -> np.ndarray:
    # pick the sign of b whose real part agrees with a (q and -q are the same rotation)
    if a.real @ b.real < 0:
        b = -b
    av, bv, adv, bdv = a.real[1:], b.real[1:], a.dual[1:], b.dual[1:]
    S = np.zeros((6, 8))
    S[:3, 0] = av - bv
    S[:3, 1:4] = hat(av + bv)
    S[3:, 0] = adv - bdv
    S[3:, 1:4] = hat(adv + bdv)
    S[3:, 4] = av - bv
    S[3:, 5:8] = hat(av + bv)
    return S


def solve_hand_eye(pairs: list[MotionPair], sigma: float | None = None,
                   min_sufficiency_deg: float = 1.0) -> CalibrationResult:
    """Simultaneous dual-quaternion solution of ``A_i X = X B_i``."""
    if sigma is not None:
        pairs = screw_filter(pairs, sigma)
    if len(pairs) < 2:
        raise HandEyeDegeneracyError("need at least two motion pairs", 0.0)
    score = motion_sufficiency(pairs)
    if score < min_sufficiency_deg:
        raise HandEyeDegeneracyError("rotation axes are (nearly) parallel", score)
    blocks = [_block(_dq(p.A), _dq(p.B)) for p in pairs]
    # canonical row order makes the result independent of the input order
    keys = [tuple(np.round(b.ravel(), 12)) for b in blocks]
    T = np.vstack([blocks[i] for i in sorted(range(len(blocks)), key=keys.__getitem__)])
    _, s, Vt = np.linalg.svd(T)
    v1, v2 = Vt[-2], Vt[-1]
    u1, w1, u2, w2 = v1[:4], v1[4:], v2[:4], v2[4:]
    # lambda1 v1 + lambda2 v2 must have a unit real part orthogonal to its dual part
    a, b, c = u1 @ w1, u1 @ w2 + u2 @ w1, u2 @ w2
    if abs(a) > 1e-12:
        disc = max(b * b - 4 * a * c, 0.0)
        roots = [(-b + np.sqrt(disc)) / (2 * a), (-b - np.sqrt(disc)) / (2 * a)]
    else:
        roots = [-c / b] if abs(b) > 1e-12 else [0.0]
    vals = [r * r * (u1 @ u1) + 2 * r * (u1 @ u2) + u2 @ u2 for r in roots]
    k = int(np.argmax(vals))
    l2 = 1.0 / np.sqrt(vals[k])
    l1 = roots[k] * l2
    q = l1 * v1 + l2 * v2
    X = dq_to_pose(DualQuaternion(q[:4], q[4:]), tol=1e-6)
    return _report(pairs, X, score)


def _report(pairs: list[MotionPair], X: Pose, score: float) -> CalibrationResult:
    fro, rot = [], []
    for p in pairs:
        L, R = p.A @ X, X @ p.B
        fro.append(np.linalg.norm(L.matrix() - R.matrix()))
        rot.append(np.linalg.norm(so3_log(L.rotation @ R.rotation.T)))
    return CalibrationResult(X, float(np.mean(fro)), float(np.mean(rot)), score, len(pairs))


def pairs_from_trajectories(camera: list[Pose], magnet: list[Pose], step: int = 1,
                            stride: int = 1) -> list[MotionPair]:
    """Relative motions over ``step`` samples, every ``stride`` samples."""
    if len(camera) != len(magnet):
        raise ValueError("trajectories must have equal length")
    out = []
    for i in range(0, len(camera) - step, stride):
        j = i + step
        out.append(MotionPair(camera[i].inverse() @ camera[j], magnet[i].inverse() @ magnet[j]))
    return out


# ------------------------------------------------------------------ I/O
def write_pose5_trajectory(path, stamps, poses: list[Pose5]) -> None:
    """``timestamp tx ty tz hx hy hz`` per line."""
    lines = [f"{t:.6f} " + " ".join(f"{x:.9f}" for x in (*p.position, *p.heading)) for t, p in zip(stamps, poses)]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_pose5_trajectory(path) -> tuple[np.ndarray, list[Pose5]]:
    stamps, poses = [], []
    for line in Path(path).read_text().splitlines():
        line = line.split("#")[0].strip()
        if not line:
            continue
        v = [float(x) for x in line.split()]
        if len(v) != 7:
            raise ValueError(f"expected 7 columns, got {len(v)}")
        h = np.array(v[4:7])
        stamps.append(v[0])
        poses.append(Pose5(np.array(v[1:4]), h / np.linalg.norm(h)))
    return np.array(stamps), poses
