import numpy as np
import pytest

from capslam.fusion import read_fusion_log
from capslam.geometry import read_trajectory
from capslam.pipeline import (
    PipelineConfig,
    evaluate_result,
    magnetic_observation,
    read_pipeline_config,
    run_pipeline,
    write_outputs,
)
from capslam.sim.dataset import SimConfig, magnet_pose, simulate
from capslam.sim.trajectory import TrajectorySpec


@pytest.fixture(scope="module")
def tiny():
    return simulate(SimConfig(trajectory=TrajectorySpec(1, 0.6), seed=3))


@pytest.fixture(scope="module")
def tiny_result(tiny):
    return run_pipeline(tiny, PipelineConfig(seed=1))


def test_run_is_deterministic(tiny, tiny_result, tmp_path):
    again = run_pipeline(tiny, PipelineConfig(seed=1))
    write_outputs(tmp_path / "a", tiny, tiny_result)
    write_outputs(tmp_path / "b", tiny, again)
    assert (tmp_path / "a" / "trajectory.txt").read_bytes() == (tmp_path / "b" / "trajectory.txt").read_bytes()
    assert (tmp_path / "a" / "map.ply").read_bytes() == (tmp_path / "b" / "map.ply").read_bytes()


def test_tracks_close_to_ground_truth(tiny, tiny_result):
    rep = evaluate_result(tiny, tiny_result, surface=False)
    assert rep.ate < 0.2
    assert len(tiny_result.poses) == len(tiny)
    assert all(r.integrated for r in tiny_result.records)


def test_outputs_written(tiny, tiny_result, tmp_path):
    rep = evaluate_result(tiny, tiny_result)
    out = write_outputs(tmp_path, tiny, tiny_result, rep)
    for name in ("trajectory.txt", "map.ply", "fusion_log.csv", "frames.csv", "timing.txt", "report.txt"):
        assert (out / name).exists(), name
    t, poses = read_trajectory(out / "trajectory.txt")
    assert np.allclose(t, tiny.stamps, atol=1e-6)
    log = read_fusion_log(out / "fusion_log.csv")
    assert len(log["t"]) == len(tiny) - 1
    assert np.all((log["P_s_visual"] >= 0) & (log["P_s_visual"] <= 1))
    assert "surface_rmse_cm" in (out / "report.txt").read_text()


def test_single_sensor_modes(tiny):
    vo = run_pipeline(tiny, PipelineConfig(use_magnetic=False))
    assert not vo.outputs
    assert evaluate_result(tiny, vo, surface=False).ate < 0.2
    mag = run_pipeline(tiny, PipelineConfig(use_visual=False, seed=2))
    assert len(mag.map) > 0 and not any(r.integrated for r in mag.records[1:])
    assert evaluate_result(tiny, mag, surface=False).ate < 0.5


def test_magnetic_observation_near_truth(tiny):
    gt = tiny.gt[2]
    obs = magnetic_observation(tiny.readings[2], tiny.config, gt)
    assert obs is not None
    assert np.linalg.norm(obs.position - gt.translation) < 0.3
    assert np.degrees(np.arccos(np.clip(obs.heading @ gt.rotation[:, 2], -1, 1))) < 3.0
    assert np.allclose(magnet_pose(gt, 1.0).position - gt.translation, gt.rotation[:, 2])


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(mode="stereo")
    with pytest.raises(ValueError):
        PipelineConfig(use_visual=False, use_magnetic=False)


def test_read_pipeline_config(tmp_path):
    p = tmp_path / "p.ini"
    p.write_text("[pipeline]\nmode = mono\nuse_magnetic = no\nloop_every = 0\n"
                 "[fusion]\nn_particles = 50\n[tracking]\nmax_iter = 3\n[sim]\nseed = 4\n")
    cfg = read_pipeline_config(p)
    assert (cfg.mode, cfg.use_magnetic, cfg.loop_every) == ("mono", False, 0)
    assert cfg.fusion.n_particles == 50 and cfg.tracking.max_iter == 3
    p.write_text("[pipeline]\nbogus = 1\n")
    with pytest.raises(ValueError):
        read_pipeline_config(p)
    with pytest.raises(FileNotFoundError):
        read_pipeline_config(tmp_path / "missing.ini")
