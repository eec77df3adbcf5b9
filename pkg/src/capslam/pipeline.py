"""Per-frame SLAM loop over a dataset: track against the map, localize the
magnet, fuse both, integrate into the surfel map and close loops."""

from __future__ import annotations

import configparser
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics, smooth_depth
from .deformation import LoopClosureConfig, close_loop
from .evaluation import SurfaceReport, TimingReport, ate_rmse, surface_rmse, write_csv
from .fusion import (
    MAGNETIC,
    VISUAL,
    ConstantVelocityModel,
    FusionConfig,
    FusionOutput,
    SensorObservation,
    SwitchingParticleFilter,
    write_fusion_log,
)
from .geometry import Pose, write_trajectory
from .lstm import LstmMotionModel, load_network
from .magnetic import DipoleSingularityError, Pose5, localize_5dof, subtract_actuator
from .shading import depth_from_shading
from .sim.dataset import Dataset, camera_from_magnet, magnet_pose
from .sim.scene import generate_scene
from .surfels import SurfelConfig, SurfelMap, integrate_frame, predict_view, write_map
from .tracker import Frame, TrackingConfig, track
from .vessel import enhance_frame, to_gray

log = logging.getLogger(__name__)

MODES = ("rgbd", "mono")


@dataclass
class PipelineConfig:
    mode: str = "rgbd"                     # depth from file, or from shading in "mono"
    depth_sigma: float = 1.5               # px, smoothing before vertex and normal maps
    use_visual: bool = True
    use_magnetic: bool = True
    loop_every: int = 15                   # frames between loop-closure attempts, 0 disables
    min_view_pixels: int = 200
    min_visual_nominal: float = 0.5        # integrate only while the camera is trusted
    motion_model: str = "cv"               # "cv" or a path to a saved LSTM network
    seed: int = 0
    # consecutive frames start near the optimum, so a loose stop is enough per frame
    tracking: TrackingConfig = field(default_factory=lambda: TrackingConfig(max_iter=5, rel_tol=1e-3))
    surfels: SurfelConfig = field(default_factory=SurfelConfig)
    fusion: FusionConfig = field(default_factory=lambda: FusionConfig(n_particles=300))
    loop: LoopClosureConfig = field(default_factory=LoopClosureConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not (self.use_visual or self.use_magnetic):
            raise ValueError("at least one sensor must be enabled")


def _coerce(default, text: str):
    if isinstance(default, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, tuple):
        return tuple(type(default[0])(x) for x in text.split(",")) if default else tuple(text.split(","))
    return type(default)(text)


def _apply_section(obj, cp: configparser.ConfigParser, section: str):
    if not cp.has_section(section):
        return obj
    names = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for key, val in cp.items(section):
        if key not in names:
            raise ValueError(f"unknown key {key!r} in [{section}]")
        changes[key] = _coerce(getattr(obj, key), val)
    return dataclasses.replace(obj, **changes)


def read_pipeline_config(path) -> PipelineConfig:
    """INI with optional sections [pipeline], [tracking], [surfels], [fusion], [loop].

    Keys are the dataclass field names; tuples are comma separated.  Other
    sections are ignored, so one file can also carry the simulator settings.
    """
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    cfg = PipelineConfig()
    sub = {"tracking": cfg.tracking, "surfels": cfg.surfels, "fusion": cfg.fusion, "loop": cfg.loop}
    sub = {k: _apply_section(v, cp, k) for k, v in sub.items()}
    cfg = _apply_section(dataclasses.replace(cfg, **sub), cp, "pipeline")
    return cfg


@dataclass
class FrameRecord:
    t: float
    pose: Pose
    visual: Pose | None
    magnetic: Pose5 | None
    p_visual: float
    p_magnetic: float
    track_iterations: int = 0
    inlier_fraction: float = 0.0
    degenerate: bool = True
    integrated: bool = False
    loop_closed: bool = False
    time_ms: float = 0.0


@dataclass
class PipelineResult:
    stamps: np.ndarray
    poses: list
    map: SurfelMap
    outputs: list                          # FusionOutput per frame (frame 0 excluded)
    records: list
    timing: TimingReport

    @property
    def n_loop_closures(self) -> int:
        return sum(r.loop_closed for r in self.records)


def _motion_model(cfg: PipelineConfig):
    if cfg.motion_model == "cv":
        return ConstantVelocityModel()
    net, _ = load_network(cfg.motion_model)
    return LstmMotionModel(net)


def _depth(ds: Dataset, i: int, rgb: np.ndarray, K: CameraIntrinsics, cfg: PipelineConfig) -> np.ndarray:
    if cfg.mode == "rgbd":
        return smooth_depth(ds.depths[i], cfg.depth_sigma)
    return np.nan_to_num(depth_from_shading(to_gray(rgb), K).masked(), nan=0.0)


def magnetic_observation(reading, cfg_sim, prior: Pose) -> Pose5 | None:
    """Camera position and viewing axis from one magnetic reading, or ``None`` if unusable.

    The localizer starts from the magnet pose implied by ``prior``.
    """
    setup = cfg_sim.magnetic
    fields = subtract_actuator(reading, setup.actuators, setup.array)
    init = magnet_pose(prior, cfg_sim.magnet_offset)
    try:
        res = localize_5dof(fields, setup.array, setup.magnet, init, max_iter=50)
    except DipoleSingularityError:
        return None
    p = res.pose
    if not (np.all(np.isfinite(p.position)) and setup.workspace.contains(p.position)):
        return None
    return camera_from_magnet(p, cfg_sim.magnet_offset)


def run_pipeline(ds: Dataset, cfg: PipelineConfig = PipelineConfig(), init_pose: Pose | None = None
                 ) -> PipelineResult:
    """Process every frame of ``ds`` in order.

    The world frame is the magnetic frame; the first camera pose is taken from
    ``init_pose`` (ground truth by default) to register the two.
    """
    K = ds.config.intrinsics
    pose = init_pose if init_pose is not None else ds.gt[0]
    m = SurfelMap(cfg.surfels)
    fcfg = cfg.fusion
    if not cfg.use_visual:
        fcfg = FusionConfig(**{**fcfg.__dict__, "sensors": (MAGNETIC,)})
    pf = SwitchingParticleFilter(pose, fcfg, _motion_model(cfg), np.random.default_rng(cfg.seed))
    poses, outputs, records, times = [], [], [], []
    prev_t = None
    for i, t in enumerate(ds.stamps):
        t0 = time.perf_counter()
        rgb = ds.color(i)
        frame = Frame.from_depth(_depth(ds, i, rgb, K, cfg), enhance_frame(rgb), K, float(t), color=rgb)
        rec = FrameRecord(float(t), pose, None, None, 1.0, 1.0)
        if prev_t is None:
            integrate_frame(m, frame, pose, K)
            rec.integrated = rec.degenerate = True
        else:
            obs = []
            if cfg.use_visual:
                view = predict_view(m, pose, K)
                if view.n_pixels >= cfg.min_view_pixels:
                    tr = track(frame, view.view, Pose.identity(), K, cfg.tracking)
                    rec.track_iterations, rec.inlier_fraction, rec.degenerate = (
                        tr.iterations, tr.inlier_fraction, tr.degenerate)
                    rec.visual = pose @ tr.pose
                    obs.append(SensorObservation(VISUAL, rec.visual, valid=not tr.degenerate))
                else:
                    obs.append(SensorObservation(VISUAL, pose, valid=False))
            if cfg.use_magnetic:
                rec.magnetic = magnetic_observation(ds.readings[i], ds.config, pose)
                if rec.magnetic is not None:
                    obs.append(SensorObservation(MAGNETIC, rec.magnetic))
                else:
                    obs.append(SensorObservation(MAGNETIC, Pose5(pose.translation, pose.rotation[:, 2]), valid=False))
            if cfg.use_magnetic:
                out: FusionOutput = pf.step(obs, float(t - prev_t))
                outputs.append(out)
                pose = out.pose
                rec.p_visual = out.p_nominal(VISUAL) if VISUAL in out.p_switch else 0.0
                rec.p_magnetic = out.p_nominal(MAGNETIC)
            else:
                # plain visual odometry: chain the tracker output
                pose = rec.visual if rec.visual is not None and not rec.degenerate else pose
                rec.p_visual, rec.p_magnetic = float(not rec.degenerate), 0.0
            rec.pose = pose
            trusted = cfg.use_visual and not rec.degenerate and rec.p_visual >= cfg.min_visual_nominal
            if trusted:
                integrate_frame(m, frame, pose, K)
                rec.integrated = True
                if cfg.loop_every and i % cfg.loop_every == 0 and np.any(m.inactive_mask()):
                    lc = close_loop(m, frame, pose, K, cfg.loop)
                    if lc.applied:
                        m, rec.loop_closed = lc.map, True
                        log.info("frame %d: loop closed with %d constraints", i, lc.n_constraints)
        prev_t = t
        rec.time_ms = 1e3 * (time.perf_counter() - t0)
        poses.append(pose)
        records.append(rec)
        times.append(max(rec.time_ms, 1e-6))
    return PipelineResult(np.asarray(ds.stamps), poses, m, outputs, records, TimingReport(np.array(times)))


# ------------------------------------------------------------------ outputs
def gt_surface_points(ds: Dataset, n: int = 200_000) -> np.ndarray:
    return generate_scene(ds.config.scene_seed).surface_points(n)


@dataclass
class PipelineReport:
    ate: float
    surface: SurfaceReport | None
    mean_ms: float
    n_loop_closures: int

    def to_text(self) -> str:
        s = f"ate_rmse_cm {self.ate:.6f}\nmean_frame_ms {self.mean_ms:.3f}\nloop_closures {self.n_loop_closures}\n"
        if self.surface is not None:
            s += self.surface.to_text()
        return s


def evaluate_result(ds: Dataset, res: PipelineResult, surface: bool = True) -> PipelineReport:
    rate = ds.config.trajectory.rate
    ate = ate_rmse(res.stamps, res.poses, ds.stamps, ds.gt, rate).rmse
    srf = None
    if surface and len(res.map):
        srf = surface_rmse(res.map.positions, gt_surface_points(ds))
    return PipelineReport(ate, srf, res.timing.mean, res.n_loop_closures)


def write_outputs(out_dir, ds: Dataset, res: PipelineResult, report: PipelineReport | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory(out / "trajectory.txt", res.stamps, res.poses)
    write_map(out / "map.ply", res.map)
    if res.outputs:
        write_fusion_log(out / "fusion_log.csv", res.stamps[1:], res.outputs)
    write_csv(out / "frames.csv",
              ["t", "p_visual", "p_magnetic", "track_iterations", "inlier_fraction", "degenerate",
               "integrated", "loop_closed", "time_ms"],
              [[f"{r.t:.6f}", f"{r.p_visual:.6f}", f"{r.p_magnetic:.6f}", r.track_iterations,
                f"{r.inlier_fraction:.4f}", int(r.degenerate), int(r.integrated), int(r.loop_closed),
                f"{r.time_ms:.3f}"] for r in res.records])
    (out / "timing.txt").write_text(res.timing.to_text())
    if report is not None:
        (out / "report.txt").write_text(report.to_text())
    return out
