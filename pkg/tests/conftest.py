import numpy as np
import pytest

from capslam.camera import CameraIntrinsics


def bump_depth(seed: int, K: CameraIntrinsics, base: float = 5.0) -> np.ndarray:
    """Tilted plane plus a few Gaussian bumps, in cm."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[: K.height, : K.width].astype(float)
    sx, sy = rng.uniform(-1, 1, size=2) * 0.02 * (160.0 / K.width)
    z = base + sx * (xx - K.cx) + sy * (yy - K.cy)
    for _ in range(4):
        cx, cy = rng.uniform(0.12, 0.88) * K.width, rng.uniform(0.15, 0.85) * K.height
        s = rng.uniform(0.075, 0.16) * K.width
        z += rng.uniform(-0.8, 0.8) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
    return z


@pytest.fixture
def bump_scene():
    return bump_depth


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[0])):
            terminalreporter.write_line(line)
