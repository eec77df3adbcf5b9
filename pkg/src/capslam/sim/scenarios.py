"""Small controlled scenarios used by tests, scripts and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..camera import CameraIntrinsics
from ..deformation import LoopClosureConfig, close_loop, sheet_gap
from ..fusion import (
    MAGNETIC,
    VISUAL,
    ConstantVelocityModel,
    FusionConfig,
    MagneticSensorModel,
    SensorObservation,
    SwitchingParticleFilter,
    VisualSensorModel,
)
from ..geometry import Pose, so3_exp
from ..magnetic import Pose5
from ..pipeline import magnetic_observation
from ..surfels import SurfelConfig, SurfelMap, integrate_frame
from ..tracker import Frame
from ..vessel import enhance_frame
from .dataset import FailureSchedule, SimConfig, simulate_readings
from .scene import generate_scene
from .trajectory import TrajectorySpec, generate_trajectory, view_rotation


@dataclass
class LoopDriftOutcome:
    gap_before: float      # cm, median distance from the re-observed sheet to the original
    gap_after: float
    applied: bool
    n_surfels: int

    @property
    def reduction(self) -> float:
        return 1.0 - self.gap_after / self.gap_before


def _frame(scene, pose, K):
    rgb, depth, _ = scene.render(pose, K)
    return Frame.from_depth(depth, enhance_frame(rgb), K, color=rgb)


def loop_drift_scenario(seed: int, drift: float = 1.0, K: CameraIntrinsics | None = None,
                        delta_t: int = 10, n_away: int = 12) -> LoopDriftOutcome:
    """Map a patch, look away until it goes inactive, then revisit it with a pose drift.

    The revisit frames are integrated at drifted poses, producing a second
    copy of the patch ``drift`` cm off the first.  One loop closure on the
    last revisit frame should pull the copy back onto the original.
    """
    K = K or CameraIntrinsics.default(80, 60)
    rng = np.random.default_rng(seed)
    scene = generate_scene(seed)
    yaw, pitch = rng.uniform(0, 2 * np.pi), rng.uniform(-0.3, 0.3)
    center = rng.uniform(-0.5, 0.5, 3)
    # one frame time step is one time_scale unit; keep delta_t frames several node spacings apart
    lc = LoopClosureConfig(time_scale=4.0 / delta_t)
    m = SurfelMap(SurfelConfig(delta_t=delta_t))

    def pose(dyaw, dpitch):
        return Pose(view_rotation(yaw + dyaw, pitch + dpitch, 0.0), center)

    for k in range(3):
        integrate_frame(m, _frame(scene, pose(0.03 * k, 0.0), K), pose(0.03 * k, 0.0), K)
    first = slice(0, len(m))
    for k in range(n_away):
        p = pose(2.0 + 0.03 * k, 0.0)
        integrate_frame(m, _frame(scene, p, K), p, K)
    d = rng.normal(size=3)
    D = Pose(so3_exp(np.zeros(3)), drift * d / np.linalg.norm(d))
    t_revisit = m.time
    for k in range(3):
        gt = pose(0.03 * k + 0.01, 0.02)
        f = _frame(scene, gt, K)
        integrate_frame(m, f, D @ gt, K)
    copy = m.t_init >= t_revisit
    before = sheet_gap(m.positions[copy], m.positions[first])
    res = close_loop(m, f, D @ gt, K, lc)
    after = sheet_gap(res.map.positions[copy], res.map.positions[first])
    return LoopDriftOutcome(before, after, res.applied, len(m))


# ------------------------------------------------------------ fusion streams
@dataclass
class FusionStreamOutcome:
    stamps: np.ndarray
    p_visual: np.ndarray
    p_magnetic: np.ndarray
    fused: np.ndarray          # (n, 3) positions
    visual: np.ndarray         # (n, 3), NaN where the sensor is off
    magnetic: np.ndarray       # (n, 3), NaN where unusable
    gt: np.ndarray

    def rmse(self, which: str = "fused", mask=None) -> float:
        e = getattr(self, which) - self.gt
        if mask is not None:
            e = e[mask]
        e = e[np.isfinite(e).all(axis=1)]
        return float(np.sqrt(np.mean(np.sum(e ** 2, axis=1))))


def stream_fusion_config(n_particles: int = 500) -> FusionConfig:
    """Sensor models matched to the stream noise below and to the localizer's measured spread."""
    return FusionConfig(n_particles=n_particles, process_rot=0.004, process_trans=0.015, alpha_floor=0.5,
                        visual=VisualSensorModel(sigma_rot=0.005, sigma_trans=0.03),
                        magnetic=MagneticSensorModel(sigma_pos=0.03, sigma_heading=0.006))


def fusion_stream_scenario(seed: int, schedule: FailureSchedule = FailureSchedule(), duration: float = 90.0,
                           rate: float = 15.0, archetype: int = 1, n_particles: int = 500,
                           visual_sigma=(0.005, 0.03), use_visual: bool = True,
                           use_magnetic: bool = True) -> FusionStreamOutcome:
    """Run the switching filter on sensor streams along a simulated trajectory.

    The magnetic stream is the real localizer applied to simulated readings.
    The visual stream is the true pose perturbed by Gaussian noise, replaced
    by an unrelated pose while a visual failure is scheduled.  No images are
    rendered, so long runs stay cheap.
    """
    cfg = SimConfig(scene_seed=seed, trajectory=TrajectorySpec(archetype, duration, rate), seed=seed)
    traj = generate_trajectory(cfg.trajectory, generate_scene(seed), seed)
    stamps = np.asarray(traj.stamps)
    readings = simulate_readings(stamps, traj.poses, cfg, schedule, seed)
    sensors = tuple(s for s, on in ((VISUAL, use_visual), (MAGNETIC, use_magnetic)) if on)
    fcfg = stream_fusion_config(n_particles)
    fcfg.sensors = sensors
    pf = SwitchingParticleFilter(traj.poses[0], fcfg, ConstantVelocityModel(), np.random.default_rng([seed, 5]))
    vrng = np.random.default_rng([seed, 6])
    n = len(stamps)
    out = {k: np.full((n, 3), np.nan) for k in ("fused", "visual", "magnetic")}
    pv, pm = np.ones(n), np.ones(n)
    pose = traj.poses[0]
    out["fused"][0] = pose.translation
    for i in range(1, n):
        gt = traj.poses[i]
        obs = []
        if use_visual:
            if schedule.mode_at(VISUAL, stamps[i]) is not None:
                v = Pose(so3_exp(vrng.normal(size=3) * np.pi / np.sqrt(3)), vrng.uniform(-5, 5, 3))
            else:
                v = Pose(gt.rotation @ so3_exp(vrng.normal(size=3) * visual_sigma[0]),
                         gt.translation + vrng.normal(size=3) * visual_sigma[1])
            out["visual"][i] = v.translation
            obs.append(SensorObservation(VISUAL, v))
        if use_magnetic:
            mobs = magnetic_observation(readings[i], cfg, pose)
            if mobs is None:
                obs.append(SensorObservation(MAGNETIC, Pose5(pose.translation, pose.rotation[:, 2]), valid=False))
            else:
                out["magnetic"][i] = mobs.position
                obs.append(SensorObservation(MAGNETIC, mobs))
        res = pf.step(obs, float(stamps[i] - stamps[i - 1]))
        pose = res.pose
        out["fused"][i] = pose.translation
        pv[i] = res.p_nominal(VISUAL) if VISUAL in res.p_switch else np.nan
        pm[i] = res.p_nominal(MAGNETIC) if MAGNETIC in res.p_switch else np.nan
    gt = np.array([p.translation for p in traj.poses])
    return FusionStreamOutcome(stamps, pv, pm, out["fused"], out["visual"], out["magnetic"], gt)


def detection_delays(p_nominal: np.ndarray, stamps: np.ndarray, start: float, end: float) -> tuple[int, int]:
    """Steps from failure onset until P(nominal) < 0.5, and from the first clean
    sample after the window until it is back above 0.5 (-1 if never)."""
    on = int(np.searchsorted(stamps, start))
    off = int(np.searchsorted(stamps, end, side="right"))
    below = np.flatnonzero(p_nominal[on:] < 0.5)
    above = np.flatnonzero(p_nominal[off:] > 0.5)
    return (int(below[0]) if len(below) else -1), (int(above[0]) if len(above) else -1)
