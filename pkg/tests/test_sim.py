import numpy as np
import pytest
from scipy.optimize import brentq

from capslam.camera import CameraIntrinsics, backproject
from capslam.geometry import Pose, so3_exp
from capslam.sim.dataset import (
    FailureSchedule,
    FailureWindow,
    SimConfig,
    camera_from_magnet,
    magnet_pose,
    read_dataset,
    render_dataset,
    write_dataset,
)
from capslam.sim.scene import generate_scene
from capslam.sim.trajectory import (
    TrajectorySpec,
    angular_speeds,
    generate_trajectory,
    motion_corpus,
    revisit_count,
)

K = CameraIntrinsics.default(80, 60)


@pytest.fixture(scope="module")
def scene():
    return generate_scene(0)


def test_scene_hash_deterministic():
    assert generate_scene(3).digest() == generate_scene(3).digest()
    assert generate_scene(3).digest() != generate_scene(4).digest()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_vessel_coverage_in_band(seed):
    assert 0.05 <= generate_scene(seed).vessel_coverage(50_000) <= 0.20


def test_normal_field_continuous_at_render_resolution(scene):
    pose = Pose(so3_exp([0, 1.2, 0]), [0.5, 0, 0])
    _, depth, pts = scene.render(pose, CameraIntrinsics.default())
    world = pose.apply(pts.reshape(-1, 3))
    n = scene.surface_normal(world).reshape(pts.shape)
    for a, b in ((n[1:], n[:-1]), (n[:, 1:], n[:, :-1])):
        ang = np.degrees(np.arccos(np.clip(np.sum(a * b, axis=-1), -1, 1)))
        assert ang.max() < 10.0


def test_render_depth_matches_bracketing_oracle(scene):
    pose = Pose(so3_exp([0.3, -0.9, 0.2]), [0.4, -0.3, 0.6])
    _, depth, _ = scene.render(pose, K)
    rays = K.rays()
    rng = np.random.default_rng(0)
    for v, u in zip(rng.integers(0, K.height, 40), rng.integers(0, K.width, 40)):
        r = rays[v, u]
        d = pose.rotation @ (r / np.linalg.norm(r))
        # march outward until the sign flips, then root-find on the bracket
        f = lambda s: scene.implicit((pose.translation + s * d)[None])[0]
        s0 = 0.0
        while f(s0 + 0.05) < 0:
            s0 += 0.05
        s = brentq(f, s0, s0 + 0.05, xtol=1e-12)
        assert abs(s / np.linalg.norm(r) - depth[v, u]) < 1e-3


def test_backprojected_depth_lies_on_surface(scene):
    pose = Pose(so3_exp([1.0, 0.2, 0]), [0, 0.5, 0])
    _, depth, _ = scene.render(pose, K)
    x = pose.apply(backproject(depth, K).reshape(-1, 3))
    assert np.max(np.abs(scene.implicit(x))) < 1e-3


@pytest.mark.parametrize("seed", [0, 1])
def test_archetype_speed_ordering(scene, seed):
    w1 = angular_speeds(generate_trajectory(TrajectorySpec(1), scene, seed))
    w4 = angular_speeds(generate_trajectory(TrajectorySpec(4), scene, seed))
    assert w1.max() < w4.min()
    assert np.mean(w4) >= 3 * np.mean(w1)


@pytest.mark.parametrize("archetype", [2, 3])
def test_loop_archetypes_revisit(scene, archetype):
    for seed in range(3):
        assert revisit_count(generate_trajectory(TrajectorySpec(archetype), scene, seed)) >= 3


def test_trajectory_deterministic_and_inside(scene):
    a = generate_trajectory(TrajectorySpec(3, duration=20), scene, 5)
    b = generate_trajectory(TrajectorySpec(3, duration=20), scene, 5)
    assert all(p.is_close(q, 0) for p, q in zip(a.poses, b.poses))
    pts = np.array([p.translation for p in a.poses])
    assert np.all(scene.implicit(pts) < -1.5)
    assert len(a.poses) == 300


def test_invalid_spec_rejected():
    with pytest.raises(ValueError):
        TrajectorySpec(5)


def test_schedule_invariants():
    with pytest.raises(ValueError):
        FailureSchedule((FailureWindow("visual", 1, 3), FailureWindow("visual", 2, 4)))
    with pytest.raises(ValueError):
        FailureWindow("lidar", 0, 1)
    with pytest.raises(ValueError):
        FailureSchedule.reference().validate(60.0)
    s = FailureSchedule.reference()
    assert FailureSchedule.from_text(s.to_text()) == s


def test_reference_schedule_counts_match_window_lengths():
    stamps = np.arange(1350) / 15.0
    s = FailureSchedule.reference()
    # inclusive windows at 15 Hz: 22 s -> 331 samples, 19 s -> 286 samples
    assert s.mask("visual", stamps).sum() == 22 * 15 + 1
    assert s.mask("magnetic", stamps).sum() == 19 * 15 + 1
    assert not np.any(s.mask("visual", stamps) & s.mask("magnetic", stamps))


def test_magnet_pose_round_trip():
    cam = Pose(so3_exp([0.4, -0.2, 0.9]), [1, 2, 3])
    back = camera_from_magnet(magnet_pose(cam, 1.5), 1.5)
    np.testing.assert_allclose(back.position, cam.translation, atol=1e-12)
    np.testing.assert_allclose(back.heading, cam.rotation[:, 2], atol=1e-12)


@pytest.fixture(scope="module")
def small_run(scene):
    cfg = SimConfig(trajectory=TrajectorySpec(1, duration=1.0), width=80, height=60)
    traj = generate_trajectory(cfg.trajectory, scene, 0)
    sched = FailureSchedule((FailureWindow("visual", 0.2, 0.4), FailureWindow("magnetic", 0.6, 0.8, "bias")))
    clean = render_dataset(scene, traj, cfg)
    bad = render_dataset(scene, traj, cfg, sched)
    return cfg, traj, sched, clean, bad


def test_failures_affect_only_scheduled_sensor_and_interval(small_run):
    cfg, traj, sched, clean, bad = small_run
    vmask, mmask = sched.mask("visual", clean.stamps), sched.mask("magnetic", clean.stamps)
    for i in range(len(clean)):
        same_img = np.array_equal(clean.frames[i], bad.frames[i])
        same_mag = np.array_equal(clean.readings[i].fields, bad.readings[i].fields)
        assert same_img != vmask[i]
        assert same_mag != mmask[i]


def test_dataset_bytes_identical_across_runs(small_run, scene, tmp_path):
    cfg, traj, sched, _, bad = small_run
    again = render_dataset(scene, traj, cfg, sched)
    write_dataset(tmp_path / "a", bad)
    write_dataset(tmp_path / "b", again)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 3 * len(bad) + 4  # frame, depth, depth sidecar; four logs
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_dataset_directory_round_trip(small_run, tmp_path):
    _, _, sched, _, bad = small_run
    write_dataset(tmp_path, bad)
    back = read_dataset(tmp_path)
    assert back.schedule == sched
    assert len(back) == len(bad)
    for a, b in zip(bad.frames, back.frames):
        assert np.array_equal(a, b)
    for a, b in zip(bad.depths, back.depths):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(bad.gt, back.gt):
        assert a.is_close(b, 1e-8)


def test_motion_corpora_deterministic():
    a = motion_corpus("sinusoidal", 1, n_sequences=2, n=30)
    b = motion_corpus("sinusoidal", 1, n_sequences=2, n=30)
    assert all(p.is_close(q, 0) for s, r in zip(a, b) for p, q in zip(s.poses, r.poses))
    with pytest.raises(ValueError):
        motion_corpus("random", 0)
