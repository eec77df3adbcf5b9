"""SE(3)/SO(3) machinery, dual quaternions and the trajectory text format.

Rotations are kept as 3x3 matrices; quaternions only appear at the
serialization boundary and inside the dual-quaternion code.  Twists are
ordered ``(omega, nu)``: rotation first, translation second.  Lengths are in
centimeters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SMALL_ANGLE = 1e-8


class SingularRotationError(ValueError):
    """Rotation angle too close to pi for a unique logarithm."""


class NormalizationError(ValueError):
    """Dual quaternion whose real part is not a unit quaternion."""


def hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector (or a stack of them)."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula; accepts (3,) or (N, 3)."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)[..., None, None]
    K = hat(w)
    K2 = K @ K
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a * K + b * K2


def so3_log(R: np.ndarray, *, strict: bool = False) -> np.ndarray:
    """Rotation vector of ``R`` ((3,3) or (N,3,3)).

    With ``strict`` the angle must stay below ``pi - 1e-6``; otherwise angles
    near pi are handled through the symmetric part of ``R``.
    """
    R = np.asarray(R, dtype=float)
    tr = np.trace(R, axis1=-2, axis2=-1)
    cos_t = np.clip((tr - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    if strict and np.any(theta >= np.pi - 1e-6):
        raise SingularRotationError(f"rotation angle {float(np.max(theta)):.9f} too close to pi")
    vee = np.stack(
        [R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]],
        axis=-1,
    )
    small = theta < SMALL_ANGLE
    sin_t = np.sin(theta)
    near_pi = theta > np.pi - 1e-3
    safe_sin = np.where(small | near_pi, 1.0, sin_t)
    scale = np.where(small, 0.5 + theta**2 / 12.0, theta / (2.0 * safe_sin))
    w = scale[..., None] * vee
    if np.any(near_pi):
        # symmetric part: cos(t) I + (1 - cos(t)) a a^T
        Rs = R[near_pi] if R.ndim == 3 else R[None]
        th = theta[near_pi] if R.ndim == 3 else np.atleast_1d(theta)
        c = np.cos(th)[:, None, None]
        B = ((Rs + np.swapaxes(Rs, -1, -2)) / 2.0 - c * np.eye(3)) / (1.0 - c)
        diag = np.diagonal(B, axis1=-2, axis2=-1)
        idx = np.arange(len(th))
        k = np.argmax(diag, axis=-1)
        axis = B[idx, :, k] / np.sqrt(np.maximum(diag[idx, k], 1e-300))[:, None]
        axis /= np.linalg.norm(axis, axis=-1, keepdims=True)
        v = np.stack([Rs[:, 2, 1] - Rs[:, 1, 2], Rs[:, 0, 2] - Rs[:, 2, 0], Rs[:, 1, 0] - Rs[:, 0, 1]], axis=-1)
        sign = np.where(np.sum(axis * v, axis=-1) < 0, -1.0, 1.0)
        fixed = axis * (sign * th)[:, None]
        if R.ndim == 3:
            w[near_pi] = fixed
        else:
            w = fixed[0]
    return w


def _left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    K = hat(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    return (
        np.eye(3)
        + (1.0 - np.cos(theta)) / theta**2 * K
        + (theta - np.sin(theta)) / theta**3 * (K @ K)
    )


def _left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    K = hat(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + K @ K / 12.0
    half = theta / 2.0
    coef = (1.0 - half * np.cos(half) / np.sin(half)) / theta**2
    return np.eye(3) - 0.5 * K + coef * (K @ K)


@dataclass(frozen=True)
class Twist:
    omega: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=float).reshape(3))
        object.__setattr__(self, "nu", np.asarray(self.nu, dtype=float).reshape(3))

    @classmethod
    def from_vector(cls, xi) -> "Twist":
        xi = np.asarray(xi, dtype=float).reshape(6)
        return cls(xi[:3], xi[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.nu])


def _twist_vector(xi) -> np.ndarray:
    if isinstance(xi, Twist):
        return xi.as_vector()
    return np.asarray(xi, dtype=float).reshape(6)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> R x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, M) -> "Pose":
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def inverse(self) -> "Pose":
        return invert(self)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        return np.asarray(points) @ self.rotation.T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors) @ self.rotation.T

    def angle(self) -> float:
        return float(np.arccos(np.clip((np.trace(self.rotation) - 1.0) / 2.0, -1.0, 1.0)))

    def is_close(self, other: "Pose", tol: float = 1e-9) -> bool:
        return bool(
            np.max(np.abs(self.rotation - other.rotation)) <= tol
            and np.max(np.abs(self.translation - other.translation)) <= tol
        )

    def __repr__(self) -> str:
        w = so3_log(self.rotation)
        return f"Pose(rotvec={np.round(w, 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


def exp_se3(xi) -> Pose:
    """Exponential map of a twist ``(omega, nu)``."""
    xi = _twist_vector(xi)
    w, v = xi[:3], xi[3:]
    return Pose(so3_exp(w), _left_jacobian(w) @ v)


def exp_se3_batch(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized exponential of (N, 6) twists; returns (N,3,3) rotations and (N,3) translations."""
    xi = np.asarray(xi, dtype=float)
    w, v = xi[:, :3], xi[:, 3:]
    theta = np.linalg.norm(w, axis=-1)[:, None, None]
    K = hat(w)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    c = np.where(small, 1.0 / 6.0 - theta**2 / 120.0, (safe - np.sin(safe)) / safe**3)
    J = np.eye(3) + b * K + c * (K @ K)
    return so3_exp(w), np.einsum("nij,nj->ni", J, v)


def log_se3(p: Pose) -> np.ndarray:
    """Twist vector ``(omega, nu)`` with ``exp_se3(log_se3(p)) == p``."""
    w = so3_log(p.rotation, strict=True)
    return np.concatenate([w, _left_jacobian_inv(w) @ p.translation])


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(p: Pose) -> Pose:
    Rt = p.rotation.T
    return Pose(Rt, -Rt @ p.translation)


def project_to_so3(M: np.ndarray) -> np.ndarray:
    """Closest rotation (Frobenius) to ``M``."""
    U, _, Vt = np.linalg.svd(M)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


def random_pose(rng: np.random.Generator, max_angle: float = np.pi - 1e-3, max_trans: float = 10.0) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    return Pose(so3_exp(axis * angle), rng.uniform(-max_trans, max_trans, size=3))


# ---------------------------------------------------------------- quaternions
# Hamilton convention, stored (w, x, y, z).

def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_left(q: np.ndarray) -> np.ndarray:
    """Matrix L with ``quat_mul(q, p) == L @ p``."""
    w, x, y, z = q
    return np.array([[w, -x, -y, -z], [x, w, -z, y], [y, z, w, -x], [z, -y, x, w]])


def quat_right(q: np.ndarray) -> np.ndarray:
    """Matrix R with ``quat_mul(p, q) == R @ p``."""
    w, x, y, z = q
    return np.array([[w, -x, -y, -z], [x, w, z, -y], [y, -z, w, x], [z, y, -x, w]])


def rotation_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with non-negative w."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(max(1.0 + R[i, i] - R[j, j] - R[k, k], 0.0))
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


@dataclass(frozen=True, eq=False)
class DualQuaternion:
    real: np.ndarray
    dual: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "real", np.asarray(self.real, dtype=float).reshape(4))
        object.__setattr__(self, "dual", np.asarray(self.dual, dtype=float).reshape(4))

    def __neg__(self) -> "DualQuaternion":
        return DualQuaternion(-self.real, -self.dual)

    def __mul__(self, other: "DualQuaternion") -> "DualQuaternion":
        return DualQuaternion(
            quat_mul(self.real, other.real),
            quat_mul(self.real, other.dual) + quat_mul(self.dual, other.real),
        )

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.real, self.dual])


def pose_to_dq(p: Pose) -> DualQuaternion:
    qr = rotation_to_quat(p.rotation)
    t = np.concatenate([[0.0], p.translation])
    return DualQuaternion(qr, 0.5 * quat_mul(t, qr))


def dq_to_pose(q: DualQuaternion, tol: float = 1e-6) -> Pose:
    n = np.linalg.norm(q.real)
    if abs(n - 1.0) > tol:
        raise NormalizationError(f"real part has norm {n:.9g}, expected 1")
    t = 2.0 * quat_mul(q.dual, quat_conj(q.real))
    return Pose(quat_to_rotation(q.real), t[1:])


# ------------------------------------------------------------ trajectory I/O

def write_trajectory(path, stamps: Sequence[float], poses: Sequence[Pose]) -> None:
    """``timestamp tx ty tz qx qy qz qw`` per line."""
    lines = []
    for t, p in zip(stamps, poses):
        w, x, y, z = rotation_to_quat(p.rotation)
        tx, ty, tz = p.translation
        lines.append(f"{t:.6f} {tx:.9f} {ty:.9f} {tz:.9f} {x:.12f} {y:.12f} {z:.12f} {w:.12f}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def parse_trajectory(lines: Iterable[str]) -> tuple[np.ndarray, list[Pose]]:
    stamps, poses = [], []
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = [float(v) for v in line.split()]
        if len(vals) != 8:
            raise ValueError(f"expected 8 columns, got {len(vals)}: {line!r}")
        t, tx, ty, tz, qx, qy, qz, qw = vals
        stamps.append(t)
        poses.append(Pose(quat_to_rotation([qw, qx, qy, qz]), [tx, ty, tz]))
    return np.asarray(stamps), poses


def read_trajectory(path) -> tuple[np.ndarray, list[Pose]]:
    return parse_trajectory(Path(path).read_text().splitlines())
