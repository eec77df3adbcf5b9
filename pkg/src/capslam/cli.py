"""Command-line driver: ``capslam <command> [options]``.

Every command writes a CSV table plus a ``report.txt`` summary into ``--out``
(or next to the named output file) and returns exit code 0 only on success.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics
from .evaluation import TimingReport, ate_rmse, surface_rmse, write_csv
from .fusion import MAGNETIC, VISUAL, SensorObservation, SwitchingParticleFilter, write_fusion_log
from .geometry import Pose, read_trajectory, rotation_to_quat, write_trajectory
from .handeye import (
    HandEyeDegeneracyError,
    complete_5dof,
    pairs_from_trajectories,
    read_pose5_trajectory,
    solve_hand_eye,
    write_pose5_trajectory,
)
from .imageio import from_uint, read_depth, read_pnm, to_uint8, write_depth, write_pnm
from .magnetic import (
    DipoleSingularityError,
    MagneticSetup,
    initial_guess,
    localize_5dof,
    read_geometry_config,
    read_sensor_log,
    subtract_actuator,
)
from .pipeline import PipelineConfig, evaluate_result, read_pipeline_config, run_pipeline, write_outputs
from .shading import ShadingConvergenceError, depth_from_shading
from .sim.dataset import (
    FailureSchedule,
    SimConfig,
    camera_from_magnet,
    read_dataset,
    simulate,
    write_dataset,
)
from .sim.scene import generate_scene
from .surfels import read_points, write_points
from .tracker import Frame, ModelView, TrackingConfig, track
from .vessel import VesselnessParams, enhance_frame, to_gray

log = logging.getLogger("capslam")


class CommandError(RuntimeError):
    """A stage failed; reported on stderr with exit code 1."""


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _report(out: Path, text: str) -> None:
    (out / "report.txt").write_text(text)
    sys.stdout.write(text)


def _pose_row(t: float, p: Pose) -> list[str]:
    q = rotation_to_quat(p.rotation)
    return [f"{t:.6f}", *(f"{x:.9f}" for x in p.translation), *(f"{x:.9f}" for x in (q[1], q[2], q[3], q[0]))]


# ------------------------------------------------------------------ commands
def cmd_simulate(args) -> None:
    cfg = SimConfig.read(args.config) if args.config else SimConfig()
    spec = cfg.trajectory
    spec = replace(spec, archetype=args.archetype or spec.archetype, duration=args.duration or spec.duration)
    cfg = replace(cfg, trajectory=spec, seed=cfg.seed if args.seed is None else args.seed)
    if args.schedule == "none":
        schedule = FailureSchedule()
    elif args.schedule == "reference":
        schedule = FailureSchedule.reference()
    else:
        schedule = FailureSchedule.from_text(Path(args.schedule).read_text())
    schedule.validate(spec.duration)
    ds = simulate(cfg, schedule)
    out = write_dataset(_out_dir(args, "dataset"), ds)
    scene = generate_scene(cfg.scene_seed)
    write_points(out / "gt_surface.ply", scene.surface_points(args.surface_points))
    write_csv(out / "frames.csv", ["index", "t"], [[i, f"{t:.6f}"] for i, t in enumerate(ds.stamps)])
    _report(out, f"frames {len(ds)}\narchetype {spec.archetype}\nduration_s {spec.duration}\n"
                 f"seed {cfg.seed}\nscene_seed {cfg.scene_seed}\n")


def cmd_enhance(args) -> None:
    img = from_uint(read_pnm(args.image))
    params = VesselnessParams(polarity=args.polarity, gain=args.gain)
    enh = enhance_frame(img, params)
    path = Path(args.out or Path(args.image).with_suffix(".enhanced.pgm"))
    path.parent.mkdir(parents=True, exist_ok=True)
    write_pnm(path, to_uint8(enh))
    write_csv(path.with_suffix(".csv"), ["min", "max", "mean", "mean_change"],
              [[f"{enh.min():.6f}", f"{enh.max():.6f}", f"{enh.mean():.6f}",
                f"{np.abs(enh - to_gray(img)).mean():.6f}"]])
    sys.stdout.write(f"wrote {path}\n")


def cmd_sfs(args) -> None:
    img = to_gray(from_uint(read_pnm(args.image)))
    K = CameraIntrinsics.default(img.shape[1], img.shape[0], args.fov)
    try:
        depth = depth_from_shading(img, K)
    except ShadingConvergenceError as e:
        raise CommandError(f"shape from shading did not converge: {e}") from e
    path = Path(args.out or Path(args.image).with_suffix(".depth.pgm"))
    path.parent.mkdir(parents=True, exist_ok=True)
    d = depth.masked()
    write_depth(path, d, args.depth_scale)
    ok = np.isfinite(d)
    write_csv(path.with_suffix(".csv"), ["valid_fraction", "mean_depth_cm", "min_depth_cm", "max_depth_cm"],
              [[f"{ok.mean():.6f}", f"{d[ok].mean():.6f}", f"{d[ok].min():.6f}", f"{d[ok].max():.6f}"]])
    sys.stdout.write(f"wrote {path}\n")


def cmd_track(args) -> None:
    rgb0, rgb1 = (from_uint(read_pnm(p)) for p in (args.rgb0, args.rgb1))
    d0, d1 = read_depth(args.depth0), read_depth(args.depth1)
    K = CameraIntrinsics.default(d0.shape[1], d0.shape[0], args.fov)
    ref = ModelView.from_depth(np.nan_to_num(d0, nan=0.0), enhance_frame(rgb0), K)
    cur = Frame.from_depth(np.nan_to_num(d1, nan=0.0), enhance_frame(rgb1), K)
    res = track(cur, ref, Pose.identity(), K, TrackingConfig())
    out = _out_dir(args, "track")
    write_trajectory(out / "pose.txt", [0.0], [res.pose])
    write_csv(out / "track.csv", ["e_icp", "e_rgb", "iterations", "inlier_fraction", "degenerate"],
              [[f"{res.e_icp:.9g}", f"{res.e_rgb:.9g}", res.iterations, f"{res.inlier_fraction:.4f}",
                int(res.degenerate)]])
    _report(out, f"translation_cm {' '.join(f'{x:.6f}' for x in res.pose.translation)}\n"
                 f"rotation_deg {np.degrees(res.pose.angle()):.6f}\niterations {res.iterations}\n"
                 f"inlier_fraction {res.inlier_fraction:.4f}\ndegenerate {int(res.degenerate)}\n")
    if res.degenerate:
        raise CommandError("tracking is degenerate")


def cmd_maglocalize(args) -> None:
    setup = read_geometry_config(args.config) if args.config else MagneticSetup.default()
    readings = read_sensor_log(args.log)
    if not readings:
        raise CommandError("empty sensor log")
    out = _out_dir(args, "maglocalize")
    stamps, poses, rows = [], [], []
    prior = None
    for rd in readings:
        fields = subtract_actuator(rd, setup.actuators, setup.array)
        if prior is None:
            prior = initial_guess(fields, setup.array, setup.magnet, setup.workspace)
        try:
            res = localize_5dof(fields, setup.array, setup.magnet, prior)
        except DipoleSingularityError:
            rows.append([f"{rd.timestamp:.6f}", "nan", 0, 0, 0])
            continue
        inside = setup.workspace.contains(res.pose.position)
        rows.append([f"{rd.timestamp:.6f}", f"{res.residual:.6g}", res.iterations, int(res.reliable), int(inside)])
        if inside and res.converged:
            stamps.append(rd.timestamp)
            poses.append(res.pose)
            prior = res.pose
    write_pose5_trajectory(out / "magnet_trajectory.txt", stamps, poses)
    write_csv(out / "localization.csv", ["t", "residual_ut", "iterations", "reliable", "in_workspace"], rows)
    _report(out, f"readings {len(readings)}\nlocalized {len(poses)}\n"
                 f"reliable {sum(r[3] for r in rows)}\n")
    if not poses:
        raise CommandError("no reading could be localized")


def _nearest(t_src: np.ndarray, t: float, max_dt: float) -> int | None:
    if len(t_src) == 0:
        return None
    i = int(np.argmin(np.abs(t_src - t)))
    return i if abs(t_src[i] - t) <= max_dt else None


def cmd_fuse(args) -> None:
    t_vis, vis = read_trajectory(args.visual)
    t_mag, mag = read_pose5_trajectory(args.magnetic)
    if len(t_vis) < 2:
        raise CommandError("visual trajectory needs at least two poses")
    max_dt = 0.5 * float(np.median(np.diff(t_vis)))
    pf = SwitchingParticleFilter(vis[0], replace(PipelineConfig().fusion, n_particles=args.particles),
                                 rng=np.random.default_rng(args.seed or 0))
    outputs = []
    for k in range(1, len(t_vis)):
        obs = [SensorObservation(VISUAL, vis[k])]
        j = _nearest(t_mag, t_vis[k], max_dt)
        if j is not None:
            obs.append(SensorObservation(MAGNETIC, camera_from_magnet(mag[j], args.magnet_offset)))
        else:
            obs.append(SensorObservation(MAGNETIC, camera_from_magnet(mag[0], args.magnet_offset), valid=False))
        outputs.append(pf.step(obs, float(t_vis[k] - t_vis[k - 1])))
    out = _out_dir(args, "fuse")
    write_trajectory(out / "trajectory.txt", t_vis, [vis[0]] + [o.pose for o in outputs])
    write_fusion_log(out / "fusion_log.csv", t_vis[1:], outputs)
    pv = np.array([o.p_nominal(VISUAL) for o in outputs])
    pm = np.array([o.p_nominal(MAGNETIC) for o in outputs])
    _report(out, f"steps {len(outputs)}\nvisual_nominal_fraction {np.mean(pv >= 0.5):.4f}\n"
                 f"magnetic_nominal_fraction {np.mean(pm >= 0.5):.4f}\n")


def cmd_slam(args) -> None:
    cfg = read_pipeline_config(args.config) if args.config else PipelineConfig()
    changes = {}
    if args.mode:
        changes["mode"] = args.mode
    if args.no_visual:
        changes["use_visual"] = False
    if args.no_magnetic:
        changes["use_magnetic"] = False
    if args.motion_model:
        changes["motion_model"] = args.motion_model
    if args.seed is not None:
        changes["seed"] = args.seed
    cfg = replace(cfg, **changes)
    ds = read_dataset(args.dataset)
    res = run_pipeline(ds, cfg)
    report = evaluate_result(ds, res, surface=not args.no_surface)
    write_outputs(_out_dir(args, "slam"), ds, res, report)
    sys.stdout.write(report.to_text())


def cmd_calibrate(args) -> None:
    t_cam, cams = read_trajectory(args.camera)
    t_mag, mags = read_pose5_trajectory(args.magnet)
    max_dt = 0.5 * float(np.median(np.diff(t_cam))) if len(t_cam) > 1 else 0.0
    A, B = [], []
    for t, c in zip(t_cam, cams):
        j = _nearest(t_mag, t, max_dt)
        if j is not None:
            A.append(c)
            B.append(complete_5dof(mags[j], args.roll))
    try:
        res = solve_hand_eye(pairs_from_trajectories(A, B, args.step, args.stride), sigma=args.sigma)
    except HandEyeDegeneracyError as e:
        raise CommandError(str(e)) from e
    out = _out_dir(args, "calibrate")
    write_trajectory(out / "X.txt", [0.0], [res.X])
    write_csv(out / "calibration.csv", ["tx", "ty", "tz", "qx", "qy", "qz", "qw", "residual", "residual_rot",
                                        "sufficiency_deg", "pairs"],
              [_pose_row(0.0, res.X)[1:] + [f"{res.residual:.9g}", f"{res.residual_rot:.9g}",
                                            f"{res.sufficiency:.4f}", res.n_used]])
    _report(out, f"pairs {res.n_used}\nresidual {res.residual:.6g}\nresidual_rot_rad {res.residual_rot:.6g}\n"
                 f"sufficiency_deg {res.sufficiency:.4f}\nassumed_roll_rad {args.roll}\n")


def cmd_ate(args) -> None:
    t_est, est = read_trajectory(args.estimate)
    t_gt, gt = read_trajectory(args.groundtruth)
    try:
        rep = ate_rmse(t_est, est, t_gt, gt, args.rate)
    except ValueError as e:
        raise CommandError(str(e)) from e
    out = _out_dir(args, "ate")
    write_csv(out / "ate.csv", ["x", "y", "z"], [[f"{v:.6f}" for v in p] for p in rep.aligned])
    _report(out, rep.to_text())


def cmd_surface(args) -> None:
    def points(path):
        cols = read_points(path)
        return np.column_stack([cols["x"], cols["y"], cols["z"]])

    try:
        rep = surface_rmse(points(args.map), points(args.groundtruth))
    except ValueError as e:
        raise CommandError(str(e)) from e
    out = _out_dir(args, "surface")
    write_csv(out / "surface.csv", ["iteration", "rmse"], [[i, f"{r:.9g}"] for i, r in enumerate(rep.history)])
    _report(out, rep.to_text())
    if rep.diverged:
        raise CommandError("surface alignment diverged")


def cmd_bench(args) -> None:
    cfg = SimConfig.read(args.config) if args.config else SimConfig()
    rate = cfg.trajectory.rate
    spec = replace(cfg.trajectory, archetype=args.archetype, duration=args.frames / rate)
    cfg = replace(cfg, trajectory=spec, seed=args.seed or 0)
    ds = simulate(cfg)
    res = run_pipeline(ds, PipelineConfig(seed=args.seed or 0))
    rep: TimingReport = res.timing
    out = _out_dir(args, "bench")
    write_csv(out / "timing.csv", ["frame", "ms"], [[i, f"{t:.3f}"] for i, t in enumerate(rep.times_ms)])
    _report(out, rep.to_text())


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", default=None, help="INI configuration file")
    common.add_argument("--out", default=None, help="output directory or file")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="capslam", description="Capsule endoscope SLAM toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="render a synthetic dataset")
    s.add_argument("--archetype", type=int, choices=(1, 2, 3, 4), default=None)
    s.add_argument("--duration", type=float, default=None, help="seconds")
    s.add_argument("--schedule", default="none", help="'none', 'reference' or a schedule file")
    s.add_argument("--surface-points", type=int, default=200_000)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("enhance", parents=[common], help="vessel-enhance an RGB image")
    s.add_argument("image")
    s.add_argument("--polarity", choices=("dark", "bright"), default="dark")
    s.add_argument("--gain", type=float, default=0.3)
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("sfs", parents=[common], help="depth from shading of one image")
    s.add_argument("image")
    s.add_argument("--fov", type=float, default=70.0)
    s.add_argument("--depth-scale", type=float, default=1000.0)
    s.set_defaults(func=cmd_sfs)

    s = sub.add_parser("track", parents=[common], help="relative pose between two RGB-D frames")
    for name in ("rgb0", "depth0", "rgb1", "depth1"):
        s.add_argument(name)
    s.add_argument("--fov", type=float, default=70.0)
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("maglocalize", parents=[common], help="5-DoF magnet poses from a sensor log")
    s.add_argument("log")
    s.set_defaults(func=cmd_maglocalize)

    s = sub.add_parser("fuse", parents=[common], help="fuse visual and magnetic trajectories")
    s.add_argument("visual")
    s.add_argument("magnetic")
    s.add_argument("--magnet-offset", type=float, default=1.0)
    s.add_argument("--particles", type=int, default=300)
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("slam", parents=[common], help="run the full pipeline on a dataset")
    s.add_argument("dataset")
    s.add_argument("--mode", choices=("rgbd", "mono"), default=None)
    s.add_argument("--no-visual", action="store_true")
    s.add_argument("--no-magnetic", action="store_true")
    s.add_argument("--no-surface", action="store_true", help="skip the surface evaluation")
    s.add_argument("--motion-model", default=None, help="'cv' or a saved LSTM network")
    s.set_defaults(func=cmd_slam)

    s = sub.add_parser("calibrate", parents=[common], help="magnet-to-camera transform")
    s.add_argument("camera")
    s.add_argument("magnet")
    s.add_argument("--roll", type=float, default=0.0, help="assumed magnet roll (rad)")
    s.add_argument("--step", type=int, default=5)
    s.add_argument("--stride", type=int, default=5)
    s.add_argument("--sigma", type=float, default=None, help="screw-congruence filter (rad)")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("ate", parents=[common], help="absolute trajectory error")
    s.add_argument("estimate")
    s.add_argument("groundtruth")
    s.add_argument("--rate", type=float, default=15.0)
    s.set_defaults(func=cmd_ate)

    s = sub.add_parser("surface", parents=[common], help="surface error of a map export")
    s.add_argument("map")
    s.add_argument("groundtruth")
    s.set_defaults(func=cmd_surface)

    s = sub.add_parser("bench", parents=[common], help="per-frame timing on a short simulated run")
    s.add_argument("--frames", type=int, default=60)
    s.add_argument("--archetype", type=int, choices=(1, 2, 3, 4), default=1)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CommandError, OSError, ValueError) as e:
        sys.stderr.write(f"capslam {args.command}: {e}\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
