"""Particle filter with per-sensor reliability switches.

Each particle carries a pose, a switch per sensor (0 = failure, 1 = nominal
for the default two-state case) and a probability vector ``alpha`` over the
switch states.  ``alpha`` follows a Dirichlet random walk whose concentration
is the memory hyper-parameter: large values keep ``alpha`` nearly fixed,
``inf`` freezes it.  The switch is summed out in the weight update, so the
reported switch posterior is the mixture-weighted average over particles.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .geometry import Pose, exp_se3_batch, log_se3, project_to_so3, rotation_to_quat, so3_exp, so3_log
from .magnetic import Pose5, Workspace

log = logging.getLogger(__name__)

VISUAL = "visual"
MAGNETIC = "magnetic"
LOG_2PI = np.log(2 * np.pi)
LOG_UNDERFLOW = np.log(np.finfo(float).tiny)


# ------------------------------------------------------------ motion models
class MotionModel(Protocol):
    window: int

    def predict_next(self, poses: Sequence[Pose]) -> Pose: ...


@dataclass
class StaticModel:
    """Zero-motion prior; process noise alone drives the particles."""

    window: int = 1

    def predict_next(self, poses):
        return poses[-1]


@dataclass
class ConstantVelocityModel:
    window: int = 2

    def predict_next(self, poses):
        if len(poses) < 2:
            return poses[-1]
        return poses[-1] @ (poses[-2].inverse() @ poses[-1])


# ------------------------------------------------------------ sensor models
@dataclass
class VisualSensorModel:
    sigma_rot: float = 0.02      # rad
    sigma_trans: float = 0.2     # cm

    def log_norm(self) -> float:
        return -3 * LOG_2PI - 3 * np.log(self.sigma_rot) - 3 * np.log(self.sigma_trans)

    def log_failure_density(self, ws: Workspace) -> float:
        # uniform over the workspace box times uniform (Haar) over SO(3)
        return -np.log(ws.volume * 8 * np.pi**2)

    def mahalanobis2(self, obs: Pose, R: np.ndarray, t: np.ndarray) -> np.ndarray:
        w = so3_log(obs.rotation @ np.swapaxes(R, -1, -2))
        dt = obs.translation - t
        return np.sum(w**2, axis=-1) / self.sigma_rot**2 + np.sum(dt**2, axis=-1) / self.sigma_trans**2


@dataclass
class MagneticSensorModel:
    sigma_pos: float = 0.2        # cm
    sigma_heading: float = 0.03   # rad
    axis_body: tuple = (0.0, 0.0, 1.0)
    # optional standoff-dependent inflation of sigma_pos: f(position) -> scale
    pos_scale: Callable[[np.ndarray], float] | None = None

    def log_norm(self, scale: float = 1.0) -> float:
        return -2.5 * LOG_2PI - 3 * np.log(self.sigma_pos * scale) - 2 * np.log(self.sigma_heading)

    def log_failure_density(self, ws: Workspace) -> float:
        return -np.log(ws.volume * 4 * np.pi)

    def mahalanobis2(self, obs: Pose5, R: np.ndarray, t: np.ndarray, scale: float = 1.0) -> np.ndarray:
        h = R @ np.asarray(self.axis_body, float)
        cos = np.clip(h @ obs.heading, -1.0, 1.0)
        ang = np.arccos(cos)
        dp = obs.position - t
        return np.sum(dp**2, axis=-1) / (self.sigma_pos * scale) ** 2 + ang**2 / self.sigma_heading**2


def crossover_mahalanobis(log_norm: float, log_failure: float) -> float:
    """Mahalanobis distance where the nominal Gaussian equals the failure density."""
    return float(np.sqrt(max(2.0 * (log_norm - log_failure), 0.0)))


# ---------------------------------------------------------------- containers
@dataclass
class SensorObservation:
    sensor: str
    value: Pose | Pose5
    valid: bool = True

    def __post_init__(self):
        v = self.value
        arrs = (v.rotation, v.translation) if isinstance(v, Pose) else (v.position, v.heading)
        if not all(np.isfinite(a).all() for a in arrs):
            raise ValueError("observation contains non-finite values")


@dataclass
class FusionState:
    pose: Pose
    velocity: list = field(default_factory=list)


@dataclass
class Particle:
    state: FusionState
    switches: dict
    alpha: dict
    weight: float


@dataclass
class FusionOutput:
    pose: Pose
    p_switch: dict            # sensor -> (d_k + 1,) posterior over switch states
    alpha: dict               # sensor -> (d_k + 1,) MMSE alpha
    ess: float
    reset: bool = False

    def p_nominal(self, sensor: str) -> float:
        return float(self.p_switch[sensor][-1])


@dataclass
class FusionConfig:
    n_particles: int = 1000
    sensors: tuple = (VISUAL, MAGNETIC)
    n_states: int = 2                           # d_k + 1
    alpha_memory: dict = field(default_factory=lambda: {VISUAL: 50.0, MAGNETIC: 50.0})
    alpha_floor: float = 0.05                   # pseudo-count keeping alpha off the simplex boundary
    alpha_init: tuple = (0.5, 0.5)
    process_rot: float = 0.01                   # rad per step (std)
    process_trans: float = 0.05                 # cm per step (std)
    resample_frac: float = 0.5
    init_rot: float = 0.01
    free_roll: float = 0.02                     # rad per step about the magnet axis while vision is failed
    roll_reset_frac: float = 0.1                # share of particles taking the visual roll while blind
    max_step_rot: float = 0.15                  # motion-model increments beyond these are discarded
    max_step_trans: float = 1.0                 # cm
    init_trans: float = 0.1
    workspace: Workspace = field(default_factory=Workspace)
    visual: VisualSensorModel = field(default_factory=VisualSensorModel)
    magnetic: MagneticSensorModel = field(default_factory=MagneticSensorModel)


# -------------------------------------------------------------------- filter
def chordal_mean(R: np.ndarray, w: np.ndarray) -> np.ndarray:
    return project_to_so3(np.einsum("n,nij->ij", w, R))


def systematic_resample(w: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(w)
    pos = (rng.random() + np.arange(n)) / n
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, pos)


def sample_dirichlet(conc: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    g = rng.gamma(conc)
    s = g.sum(axis=-1, keepdims=True)
    # all-zero draws only happen for tiny concentrations; fall back to the mean
    bad = s[..., 0] <= 0
    if np.any(bad):
        g[bad] = conc[bad]
        s[bad] = conc[bad].sum(axis=-1, keepdims=True)
    return g / s


class SwitchingParticleFilter:
    def __init__(self, init_pose: Pose, cfg: FusionConfig = FusionConfig(), motion: MotionModel | None = None,
                 rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.motion = motion if motion is not None else ConstantVelocityModel()
        n = cfg.n_particles
        noise = self._noise(n, cfg.init_rot, cfg.init_trans)
        self.R = init_pose.rotation @ so3_exp(noise[:, :3])
        self.t = init_pose.translation + noise[:, 3:]
        self.alpha = {k: np.tile(np.asarray(cfg.alpha_init, float), (n, 1)) for k in cfg.sensors}
        self.switches = {k: np.full(n, cfg.n_states - 1) for k in cfg.sensors}
        self.logw = np.full(n, -np.log(n))
        self.history: list[Pose] = [init_pose]
        self._blind = False

    # ---------------------------------------------------------------- helpers
    def _noise(self, n, s_rot, s_trans):
        return np.concatenate([self.rng.normal(size=(n, 3)) * s_rot, self.rng.normal(size=(n, 3)) * s_trans], axis=1)

    @property
    def weights(self) -> np.ndarray:
        w = np.exp(self.logw - self.logw.max())
        return w / w.sum()

    def ess(self) -> float:
        w = self.weights
        return float(1.0 / np.sum(w**2))

    def mmse_pose(self) -> Pose:
        w = self.weights
        return Pose(chordal_mean(self.R, w), w @ self.t)

    def estimate_alpha(self) -> dict:
        w = self.weights
        return {k: w @ a for k, a in self.alpha.items()}

    def particle(self, i: int) -> Particle:
        return Particle(FusionState(Pose(self.R[i], self.t[i])), {k: int(s[i]) for k, s in self.switches.items()},
                        {k: a[i].copy() for k, a in self.alpha.items()}, float(self.weights[i]))

    # ------------------------------------------------------------------ steps
    def predict(self, dt: float) -> None:
        if not dt > 0:
            raise ValueError("dt must be positive")
        cfg = self.cfg
        window = self.history[-max(self.motion.window, 1):]
        last = window[-1]
        inc = log_se3(last.inverse() @ self.motion.predict_next(window))
        # the pose history is unreliable while vision is out (roll unobserved), and a history
        # spanning a blind spell can imply absurd velocities; fall back to no motion
        if (self._blind or np.linalg.norm(inc[:3]) > cfg.max_step_rot
                or np.linalg.norm(inc[3:]) > cfg.max_step_trans):
            inc = np.zeros(6)
        n = len(self.t)
        xi = inc + self._noise(n, cfg.process_rot, cfg.process_trans)
        dR, step = exp_se3_batch(xi)
        # body-frame increment: pose <- pose exp(xi)
        self.t = self.t + np.einsum("nij,nj->ni", self.R, step)
        self.R = self.R @ dR
        # without vision, roll about the magnet axis is unobserved; let it spread
        if cfg.free_roll > 0 and VISUAL in cfg.sensors and MAGNETIC in cfg.sensors:
            blind = self.switches[VISUAL] < cfg.n_states - 1
            if np.any(blind):
                axis = np.asarray(cfg.magnetic.axis_body, float)
                xi = np.zeros((int(blind.sum()), 6))
                xi[:, :3] = self.rng.normal(size=(len(xi), 1)) * cfg.free_roll * axis
                self.R[blind] = self.R[blind] @ exp_se3_batch(xi)[0]
        for k in cfg.sensors:
            sigma = cfg.alpha_memory.get(k, np.inf)
            if np.isfinite(sigma):
                self.alpha[k] = sample_dirichlet(sigma * self.alpha[k] + cfg.alpha_floor, self.rng)
            u = self.rng.random(n)[:, None]
            self.switches[k] = np.minimum((u > np.cumsum(self.alpha[k], axis=1)).sum(axis=1), cfg.n_states - 1)

    def log_likelihoods(self, obs: SensorObservation) -> np.ndarray:
        """(n, n_states) log-likelihood per particle and switch state."""
        cfg = self.cfg
        n = len(self.t)
        out = np.empty((n, cfg.n_states))
        if obs.sensor == VISUAL:
            model = cfg.visual
            out[:, :-1] = model.log_failure_density(cfg.workspace)
            nominal = model.log_norm() - 0.5 * model.mahalanobis2(obs.value, self.R, self.t)
        elif obs.sensor == MAGNETIC:
            model = cfg.magnetic
            scale = model.pos_scale(obs.value.position) if model.pos_scale else 1.0
            out[:, :-1] = model.log_failure_density(cfg.workspace)
            nominal = model.log_norm(scale) - 0.5 * model.mahalanobis2(obs.value, self.R, self.t, scale)
        else:
            raise KeyError(obs.sensor)
        out[:, -1] = nominal if obs.valid else -np.inf
        return out

    def _reset_roll(self, obs: Pose) -> None:
        """Give a random subset of particles the roll of ``obs`` about their own magnet axis.

        Position and heading are kept, so a genuine visual observation finds
        particles that agree with it while a garbage one still does not.
        """
        n = len(self.t)
        k = int(round(self.cfg.roll_reset_frac * n))
        if k == 0:
            return
        idx = self.rng.choice(n, k, replace=False)
        a = np.asarray(self.cfg.magnetic.axis_body, float)
        a = a / np.linalg.norm(a)
        M = np.swapaxes(self.R[idx], -1, -2) @ obs.rotation
        # angle of the rotation about ``a`` closest to M
        vee = np.stack([M[:, 2, 1] - M[:, 1, 2], M[:, 0, 2] - M[:, 2, 0], M[:, 1, 0] - M[:, 0, 1]], axis=1)
        phi = np.arctan2(vee @ a, np.trace(M, axis1=1, axis2=2) - np.einsum("i,nij,j->n", a, M, a))
        xi = np.zeros((k, 6))
        xi[:, :3] = phi[:, None] * a
        self.R[idx] = self.R[idx] @ exp_se3_batch(xi)[0]

    def update(self, observations: Sequence[SensorObservation]) -> FusionOutput:
        if not observations:
            raise ValueError("at least one observation is required")
        if self._blind:
            for obs in observations:
                if obs.sensor == VISUAL and obs.valid:
                    self._reset_roll(obs.value)
        n = len(self.t)
        p_switch = {}
        post = {}
        step_ll = np.zeros(n)
        for obs in observations:
            ll = self.log_likelihoods(obs)
            with np.errstate(divide="ignore"):
                la = np.log(self.alpha[obs.sensor]) + ll
            m = la.max(axis=1, keepdims=True)
            with np.errstate(invalid="ignore"):
                lm = m[:, 0] + np.log(np.exp(la - m).sum(axis=1))
                post[obs.sensor] = np.nan_to_num(np.exp(la - lm[:, None]))
            step_ll += lm
        reset = False
        # all likelihoods numerically zero: keep the particles, forget the weights
        if not step_ll.max() > LOG_UNDERFLOW:
            log.warning("particle weights underflowed; resetting to uniform")
            self.logw = np.full(n, -np.log(n))
            reset = True
        else:
            self.logw = self.logw + step_ll
        self.logw -= self.logw.max()
        self.logw -= np.log(np.exp(self.logw).sum())
        w = self.weights
        for k in self.cfg.sensors:
            if k in post:
                p = np.clip(w @ post[k], 0.0, 1.0)
                p_switch[k] = p / p.sum() if p.sum() > 0 else w @ self.alpha[k]
                u = self.rng.random(n)[:, None]
                self.switches[k] = np.minimum((u > np.cumsum(post[k], axis=1)).sum(axis=1), self.cfg.n_states - 1)
            else:
                p_switch[k] = w @ self.alpha[k]
        out = FusionOutput(self.mmse_pose(), p_switch, self.estimate_alpha(), self.ess(), reset)
        self._blind = VISUAL in p_switch and MAGNETIC in self.cfg.sensors and out.p_nominal(VISUAL) < 0.5
        if out.ess < self.cfg.resample_frac * n:
            idx = systematic_resample(w, self.rng)
            self.R, self.t = self.R[idx], self.t[idx]
            self.alpha = {k: a[idx] for k, a in self.alpha.items()}
            self.switches = {k: s[idx] for k, s in self.switches.items()}
            self.logw = np.full(n, -np.log(n))
        self.history.append(out.pose)
        keep = max(getattr(self.motion, "window", 2), 2)
        if len(self.history) > keep:
            self.history = self.history[-keep:]
        return out

    def step(self, observations: Sequence[SensorObservation], dt: float) -> FusionOutput:
        self.predict(dt)
        return self.update(observations)


# --------------------------------------------------------------------- log
FUSION_LOG_HEADER = ["t", "tx", "ty", "tz", "qx", "qy", "qz", "qw",
                     "P_s_visual", "P_s_magnetic", "alpha_visual", "alpha_magnetic", "ess"]


def write_fusion_log(path, stamps, outputs: Sequence[FusionOutput]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FUSION_LOG_HEADER)
        for t, o in zip(stamps, outputs):
            q = rotation_to_quat(o.pose.rotation)
            row = [t, *o.pose.translation, q[1], q[2], q[3], q[0]]
            row += [o.p_switch.get(VISUAL, [np.nan])[-1], o.p_switch.get(MAGNETIC, [np.nan])[-1]]
            row += [o.alpha.get(VISUAL, [np.nan])[-1], o.alpha.get(MAGNETIC, [np.nan])[-1], o.ess]
            w.writerow([f"{float(x):.9g}" for x in row])


def read_fusion_log(path) -> dict:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return {name: data[:, i] for i, name in enumerate(FUSION_LOG_HEADER)}
