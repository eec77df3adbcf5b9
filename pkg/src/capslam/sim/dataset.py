"""Synthetic RGB-D + magnetic datasets with scheduled sensor failures.

Directory layout::

    frames/NNNNN.ppm      8-bit RGB renders
    depth/NNNNN.pgm       16-bit depth (cm * scale, sidecar .txt holds the scale)
    mag.csv               magnetic sensor log
    gt_trajectory.txt     camera-to-world ground truth, ``t tx ty tz qx qy qz qw``
    schedule.txt          one failure window per line: ``sensor start end mode``
    config.txt            INI with every generator setting

The world frame is the magnetic frame.  The ring magnet sits on the optical
axis ``magnet_offset`` cm in front of the camera center with its dipole along
the camera z axis, so the 5-DoF magnet pose fixes camera position and
viewing direction but not roll.
"""

from __future__ import annotations

import configparser
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..camera import CameraIntrinsics
from ..geometry import Pose, read_trajectory, so3_exp, write_trajectory
from ..imageio import from_uint, read_depth, read_pnm, to_uint8, write_depth, write_pnm
from ..lstm import PoseSequence
from ..magnetic import (
    MagneticReading,
    MagneticSetup,
    Pose5,
    geometry_sections,
    read_geometry_config,
    read_sensor_log,
    simulate_reading,
    write_sensor_log,
)
from .scene import SceneModel, generate_scene
from .trajectory import TrajectorySpec, generate_trajectory

log = logging.getLogger(__name__)

SENSORS = ("visual", "magnetic")
MODES = ("dropout", "garbage", "bias")
DATASET_DEPTH_SCALE = 1000.0  # 1e-3 cm steps, 65 cm range


# --------------------------------------------------------------- schedule
@dataclass(frozen=True)
class FailureWindow:
    sensor: str
    start: float
    end: float
    mode: str = "garbage"

    def __post_init__(self):
        if self.sensor not in SENSORS:
            raise ValueError(f"unknown sensor {self.sensor!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown failure mode {self.mode!r}")
        if not self.end > self.start >= 0:
            raise ValueError("failure window must satisfy 0 <= start < end")

    def covers(self, t: float) -> bool:
        return self.start <= t <= self.end


@dataclass(frozen=True)
class FailureSchedule:
    windows: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "windows", tuple(self.windows))
        for s in SENSORS:
            w = sorted((x for x in self.windows if x.sensor == s), key=lambda x: x.start)
            for a, b in zip(w[:-1], w[1:]):
                if b.start <= a.end:
                    raise ValueError(f"overlapping {s} failure windows")

    @classmethod
    def reference(cls, visual_mode: str = "garbage", magnetic_mode: str = "garbage") -> "FailureSchedule":
        """Visual failure over 14-36 s and magnetic failure over 57-76 s of a 90 s run."""
        return cls((FailureWindow("visual", 14.0, 36.0, visual_mode),
                    FailureWindow("magnetic", 57.0, 76.0, magnetic_mode)))

    def validate(self, duration: float) -> None:
        for w in self.windows:
            if w.end > duration:
                raise ValueError(f"failure window {w} exceeds duration {duration}")

    def mode_at(self, sensor: str, t: float) -> str | None:
        for w in self.windows:
            if w.sensor == sensor and w.covers(t):
                return w.mode
        return None

    def mask(self, sensor: str, stamps) -> np.ndarray:
        return np.array([self.mode_at(sensor, t) is not None for t in stamps])

    def to_text(self) -> str:
        return "".join(f"{w.sensor} {w.start!r} {w.end!r} {w.mode}\n" for w in self.windows)

    @classmethod
    def from_text(cls, text: str) -> "FailureSchedule":
        out = []
        for line in text.splitlines():
            line = line.split("#")[0].strip()
            if not line:
                continue
            s, a, b, *m = line.split()
            out.append(FailureWindow(s, float(a), float(b), m[0] if m else "garbage"))
        return cls(tuple(out))


# ----------------------------------------------------------------- config
@dataclass
class SimConfig:
    scene_seed: int = 0
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    width: int = 160
    height: int = 120
    fov_deg: float = 70.0
    rgb_noise: float = 0.01          # std on [0, 1] intensities before quantization
    depth_noise: float = 0.02        # cm
    magnet_offset: float = 1.0       # cm along the optical axis
    current_amplitude: float = 1.0   # A, smooth coil currents
    magnetic: MagneticSetup = field(default_factory=MagneticSetup.default)
    seed: int = 0

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.default(self.width, self.height, self.fov_deg)

    def to_parser(self) -> configparser.ConfigParser:
        cp = configparser.ConfigParser()
        tr = self.trajectory
        cp["sim"] = {"seed": str(self.seed), "scene_seed": str(self.scene_seed)}
        cp["trajectory"] = {"archetype": str(tr.archetype), "duration": repr(tr.duration),
                            "rate": repr(tr.rate), "speed_scale": repr(tr.speed_scale)}
        cp["camera"] = {"width": str(self.width), "height": str(self.height), "fov_deg": repr(self.fov_deg)}
        cp["noise"] = {"rgb": repr(self.rgb_noise), "depth": repr(self.depth_noise)}
        cp["capsule"] = {"magnet_offset": repr(self.magnet_offset),
                         "current_amplitude": repr(self.current_amplitude)}
        cp.read_dict(geometry_sections(self.magnetic))
        return cp

    def write(self, path) -> None:
        with open(path, "w") as fh:
            self.to_parser().write(fh)

    @classmethod
    def read(cls, path) -> "SimConfig":
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise FileNotFoundError(path)
        tr = TrajectorySpec(cp.getint("trajectory", "archetype"), cp.getfloat("trajectory", "duration"),
                            cp.getfloat("trajectory", "rate"), cp.getfloat("trajectory", "speed_scale"))
        return cls(cp.getint("sim", "scene_seed"), tr, cp.getint("camera", "width"), cp.getint("camera", "height"),
                   cp.getfloat("camera", "fov_deg"), cp.getfloat("noise", "rgb"), cp.getfloat("noise", "depth"),
                   cp.getfloat("capsule", "magnet_offset"), cp.getfloat("capsule", "current_amplitude"),
                   read_geometry_config(path), cp.getint("sim", "seed"))


def magnet_pose(camera: Pose, offset: float) -> Pose5:
    z = camera.rotation[:, 2]
    return Pose5(camera.translation + offset * z, z / np.linalg.norm(z))


def camera_from_magnet(p5: Pose5, offset: float) -> Pose5:
    """Camera center and viewing direction implied by a magnet pose."""
    return Pose5(p5.position - offset * p5.heading, p5.heading)


# ---------------------------------------------------------------- dataset
@dataclass
class Dataset:
    config: SimConfig
    schedule: FailureSchedule
    stamps: np.ndarray
    gt: list                 # camera-to-world Pose per frame
    frames: list             # (H, W, 3) uint8
    depths: list             # (H, W) float cm, NaN invalid, quantized like the file
    readings: list           # MagneticReading per frame

    def __len__(self):
        return len(self.stamps)

    def color(self, i: int) -> np.ndarray:
        return from_uint(self.frames[i])


def _currents(t: float, amp: float, phases: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    return amp * np.sin(2 * np.pi * freqs * t + phases)


def _garbage_pose(rng: np.random.Generator) -> Pose:
    v = rng.normal(size=3)
    return Pose(so3_exp(rng.uniform(0, np.pi) * v / np.linalg.norm(v)), rng.uniform(-1.0, 1.0, 3))


def _quantize_depth(depth: np.ndarray) -> np.ndarray:
    q = np.round(np.where(np.isfinite(depth) & (depth > 0), depth, 0.0) * DATASET_DEPTH_SCALE)
    return np.where(q > 0, q / DATASET_DEPTH_SCALE, np.nan)


def render_frame(scene: SceneModel, pose: Pose, K: CameraIntrinsics, cfg: SimConfig,
                 rng: np.random.Generator | None):
    rgb, depth, _ = scene.render(pose, K)
    if rng is not None:
        rgb = rgb + cfg.rgb_noise * rng.normal(size=rgb.shape)
        depth = depth + cfg.depth_noise * rng.normal(size=depth.shape)
    return to_uint8(np.clip(rgb, 0, 1)), _quantize_depth(depth)


def simulate_readings(stamps, poses, cfg: SimConfig, schedule: FailureSchedule = FailureSchedule(),
                      seed: int | None = None, noise: bool = True) -> list:
    """Magnetic readings along camera ``poses`` with scheduled failures applied."""
    seed = cfg.seed if seed is None else seed
    setup = cfg.magnetic
    crng = np.random.default_rng([seed, 7])
    phases, freqs = crng.uniform(0, 2 * np.pi, 9), crng.uniform(0.02, 0.1, 9)
    bias = np.random.default_rng([seed, 11]).normal(size=(len(setup.array.positions), 3)) * 20.0  # uT
    out = []
    for i, (t, pose) in enumerate(zip(stamps, poses)):
        rng = np.random.default_rng([seed, i, 3]) if noise else None
        cur = _currents(t, cfg.current_amplitude, phases, freqs)
        rd = simulate_reading(magnet_pose(pose, cfg.magnet_offset), setup.magnet, setup.array, setup.actuators,
                              cur, rng, timestamp=float(t), workspace=setup.workspace)
        mode = schedule.mode_at("magnetic", t)
        if mode is not None:
            frng = np.random.default_rng([seed, i, 2])
            scale = float(np.std(rd.fields))
            if mode == "dropout":
                fields = rd.fields + frng.normal(size=rd.fields.shape) * 50 * setup.array.noise_std
            elif mode == "garbage":
                fields = frng.normal(size=rd.fields.shape) * scale
            else:
                fields = rd.fields + bias
            rd = MagneticReading(rd.timestamp, fields, rd.currents)
        out.append(rd)
    return out


def render_dataset(scene: SceneModel, trajectory: PoseSequence, cfg: SimConfig,
                   schedule: FailureSchedule = FailureSchedule(), seed: int | None = None,
                   noise: bool = True) -> Dataset:
    seed = cfg.seed if seed is None else seed
    stamps = np.asarray(trajectory.stamps)
    schedule.validate(stamps[-1] + 1e-9 if len(stamps) else 0.0)
    K = cfg.intrinsics
    frames, depths = [], []
    for i, (t, pose) in enumerate(zip(stamps, trajectory.poses)):
        rng = np.random.default_rng([seed, i]) if noise else None
        vmode = schedule.mode_at("visual", t)
        if vmode == "garbage":
            # an unrelated view of the same scene
            img, dep = render_frame(scene, _garbage_pose(np.random.default_rng([seed, i, 1])), K, cfg, rng)
        else:
            img, dep = render_frame(scene, pose, K, cfg, rng)
            if vmode == "dropout":
                img = np.zeros_like(img)
                dep = np.full_like(dep, np.nan)
            elif vmode == "bias":
                img = to_uint8(np.clip(from_uint(img) * 0.4 + 0.3, 0, 1))
        frames.append(img)
        depths.append(dep)
    readings = simulate_readings(stamps, trajectory.poses, cfg, schedule, seed, noise)
    return Dataset(cfg, schedule, stamps, list(trajectory.poses), frames, depths, readings)


def simulate(cfg: SimConfig, schedule: FailureSchedule = FailureSchedule()) -> Dataset:
    scene = generate_scene(cfg.scene_seed)
    traj = generate_trajectory(cfg.trajectory, scene, cfg.seed)
    return render_dataset(scene, traj, cfg, schedule)


# --------------------------------------------------------------------- I/O
def write_dataset(root, ds: Dataset) -> Path:
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    for i, (img, dep) in enumerate(zip(ds.frames, ds.depths)):
        write_pnm(root / "frames" / f"{i:05d}.ppm", img)
        write_depth(root / "depth" / f"{i:05d}.pgm", dep, DATASET_DEPTH_SCALE)
    write_sensor_log(root / "mag.csv", ds.readings)
    write_trajectory(root / "gt_trajectory.txt", ds.stamps, ds.gt)
    (root / "schedule.txt").write_text(ds.schedule.to_text())
    ds.config.write(root / "config.txt")
    log.info("wrote %d frames to %s", len(ds), root)
    return root


def read_dataset(root) -> Dataset:
    root = Path(root)
    cfg = SimConfig.read(root / "config.txt")
    stamps, gt = read_trajectory(root / "gt_trajectory.txt")
    sched_path = root / "schedule.txt"
    schedule = FailureSchedule.from_text(sched_path.read_text()) if sched_path.exists() else FailureSchedule()
    n = len(stamps)
    frames = [read_pnm(root / "frames" / f"{i:05d}.ppm") for i in range(n)]
    depths = [read_depth(root / "depth" / f"{i:05d}.pgm") for i in range(n)]
    readings = read_sensor_log(root / "mag.csv")
    if len(readings) != n:
        raise ValueError(f"{len(readings)} magnetic readings for {n} frames")
    return Dataset(cfg, schedule, np.asarray(stamps), gt, frames, depths, readings)
