import numpy as np
import pytest

from capslam.cli import build_parser, main
from capslam.geometry import Pose, read_trajectory, so3_exp, write_trajectory
from capslam.handeye import complete_5dof, read_pose5_trajectory, write_pose5_trajectory
from capslam.magnetic import Pose5


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ds"
    assert main(["simulate", "--duration", "0.6", "--seed", "2", "--out", str(out),
                 "--surface-points", "20000"]) == 0
    return out


def test_all_subcommands_registered():
    sub = build_parser()._subparsers._group_actions[0].choices
    assert set(sub) == {"simulate", "enhance", "sfs", "track", "maglocalize", "fuse", "slam", "calibrate",
                        "ate", "surface", "bench"}


def test_simulate_layout(dataset):
    for name in ("config.txt", "mag.csv", "gt_trajectory.txt", "schedule.txt", "gt_surface.ply",
                 "report.txt", "frames/00000.ppm", "depth/00000.pgm"):
        assert (dataset / name).exists(), name


def test_image_commands(dataset, tmp_path):
    img = dataset / "frames" / "00000.ppm"
    assert main(["enhance", str(img), "--out", str(tmp_path / "e.pgm")]) == 0
    assert (tmp_path / "e.csv").exists()
    assert main(["track", str(img), str(dataset / "depth/00000.pgm"), str(dataset / "frames/00001.ppm"),
                 str(dataset / "depth/00001.pgm"), "--out", str(tmp_path / "tr")]) == 0
    _, (p,) = read_trajectory(tmp_path / "tr" / "pose.txt")
    assert np.linalg.norm(p.translation) < 0.5


def test_magnetic_chain(dataset, tmp_path):
    assert main(["maglocalize", str(dataset / "mag.csv"), "--config", str(dataset / "config.txt"),
                 "--out", str(tmp_path / "m")]) == 0
    t, poses = read_pose5_trajectory(tmp_path / "m" / "magnet_trajectory.txt")
    _, gt = read_trajectory(dataset / "gt_trajectory.txt")
    assert len(poses) == len(gt)
    err = [np.linalg.norm(p.position - (g.translation + g.rotation[:, 2])) for p, g in zip(poses, gt)]
    assert max(err) < 0.3
    assert main(["fuse", str(dataset / "gt_trajectory.txt"), str(tmp_path / "m" / "magnet_trajectory.txt"),
                 "--out", str(tmp_path / "f"), "--seed", "0"]) == 0
    assert (tmp_path / "f" / "fusion_log.csv").exists()
    assert main(["ate", str(tmp_path / "f" / "trajectory.txt"), str(dataset / "gt_trajectory.txt"),
                 "--out", str(tmp_path / "a")]) == 0
    assert (tmp_path / "a" / "ate.csv").exists()


def test_slam_and_surface(dataset, tmp_path):
    assert main(["slam", str(dataset), "--out", str(tmp_path / "s"), "--seed", "0"]) == 0
    text = (tmp_path / "s" / "report.txt").read_text()
    assert float(text.split("ate_rmse_cm")[1].split()[0]) < 0.2
    assert main(["surface", str(tmp_path / "s" / "map.ply"), str(dataset / "gt_surface.ply"),
                 "--out", str(tmp_path / "srf")]) == 0


def test_calibrate_exact_on_consistent_trajectories(tmp_path):
    # magnet completed with roll 0 and rigidly attached: camera = magnet @ X^-1
    rng = np.random.default_rng(0)
    X = Pose(so3_exp([0.0, 0.0, 0.3]), np.array([0.0, 0.0, -1.0]))
    mags, cams = [], []
    for k in range(20):
        h = rng.normal(size=3)
        p5 = Pose5(rng.normal(size=3), h / np.linalg.norm(h))
        mags.append(p5)
        cams.append(complete_5dof(p5, 0.0) @ X.inverse())
    t = np.arange(20) / 15
    write_trajectory(tmp_path / "c.txt", t, cams)
    write_pose5_trajectory(tmp_path / "m.txt", t, mags)
    assert main(["calibrate", str(tmp_path / "c.txt"), str(tmp_path / "m.txt"), "--step", "1", "--stride", "1",
                 "--out", str(tmp_path / "cal")]) == 0
    _, (Xh,) = read_trajectory(tmp_path / "cal" / "X.txt")
    assert Xh.is_close(X, 1e-6)


def test_failures_exit_nonzero(tmp_path, capsys):
    assert main(["ate", str(tmp_path / "missing.txt"), str(tmp_path / "missing.txt")]) == 1
    short = tmp_path / "short.txt"
    write_trajectory(short, [0.0, 1.0], [Pose.identity(), Pose.identity()])
    assert main(["ate", str(short), str(short), "--out", str(tmp_path / "a")]) == 1
    assert "capslam ate" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["nosuchcommand"])
