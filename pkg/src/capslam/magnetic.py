"""Hall-sensor array simulation and 5-DoF dipole localization.

Units: positions in cm, dipole moments in A*cm^2, currents in A, fields in
microtesla.  With these units mu0 / 4pi = 10 uT cm^3 / (A cm^2).
"""

from __future__ import annotations

import configparser
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MU0_4PI = 10.0
MIN_DISTANCE = 0.1  # cm
N_SENSORS = 64
N_COILS = 9


class DipoleSingularityError(ValueError):
    pass


class WorkspaceError(ValueError):
    pass


class MagneticLocalizationError(RuntimeError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


def _unit(v) -> np.ndarray:
    v = np.asarray(v, float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@dataclass(frozen=True)
class MagnetModel:
    moment: float = 5000.0                                   # A cm^2
    axis: tuple = (0.0, 0.0, 1.0)                            # body frame

    def __post_init__(self):
        if not self.moment > 0:
            raise ValueError("moment magnitude must be positive")
        if abs(np.linalg.norm(self.axis) - 1.0) > 1e-9:
            raise ValueError("moment axis must be a unit vector")


@dataclass(frozen=True, eq=False)
class Pose5:
    position: np.ndarray
    heading: np.ndarray

    def __post_init__(self):
        p = np.array(self.position, float).reshape(3)
        h = np.array(self.heading, float).reshape(3)
        if abs(np.linalg.norm(h) - 1.0) > 1e-6:
            raise ValueError("heading must be a unit vector")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "heading", h / np.linalg.norm(h))


@dataclass(eq=False)
class SensorArray:
    positions: np.ndarray                     # (64, 3)
    axes: np.ndarray | None = None            # (64, 3, 3) rows are measurement axes
    noise_std: np.ndarray | float = 0.5       # uT, scalar or per-axis (3,)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, float)
        if self.positions.shape != (N_SENSORS, 3):
            raise ValueError(f"expected {N_SENSORS} sensor positions")
        if len(np.unique(np.round(self.positions, 9), axis=0)) != N_SENSORS:
            raise ValueError("sensor positions must be distinct")
        if self.axes is None:
            self.axes = np.broadcast_to(np.eye(3), (N_SENSORS, 3, 3)).copy()
        self.noise_std = np.broadcast_to(np.asarray(self.noise_std, float), (3,)).copy()

    @classmethod
    def grid(cls, rows: int = 8, cols: int = 8, pitch: float = 5.0, height: float = 10.0, noise_std=0.5):
        ij = np.stack(np.meshgrid(np.arange(cols), np.arange(rows)), axis=-1).reshape(-1, 2)
        xy = (ij - [(cols - 1) / 2, (rows - 1) / 2]) * pitch
        return cls(np.column_stack([xy, np.full(len(xy), height)]), noise_std=noise_std)

    def measure(self, B: np.ndarray) -> np.ndarray:
        return np.einsum("sij,sj->si", self.axes, B)


@dataclass(eq=False)
class ActuatorModel:
    positions: np.ndarray                     # (9, 3)
    axes: np.ndarray                          # (9, 3) unit
    gains: np.ndarray                         # (9,) A cm^2 per A
    max_current: float = 5.0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, float)
        self.axes = _unit(self.axes)
        self.gains = np.broadcast_to(np.asarray(self.gains, float), (N_COILS,)).copy()
        if self.positions.shape != (N_COILS, 3):
            raise ValueError(f"expected {N_COILS} coils")

    @classmethod
    def grid(cls, pitch: float = 10.0, depth: float = -12.0, gain: float = 2000.0, max_current: float = 5.0):
        ij = np.stack(np.meshgrid(np.arange(3), np.arange(3)), axis=-1).reshape(-1, 2)
        xy = (ij - 1.0) * pitch
        pos = np.column_stack([xy, np.full(9, depth)])
        return cls(pos, np.tile([0.0, 0.0, 1.0], (9, 1)), np.full(9, gain), max_current)

    def moments(self, currents) -> np.ndarray:
        return (self.gains * np.asarray(currents, float))[:, None] * self.axes

    def field_at(self, points: np.ndarray, currents) -> np.ndarray:
        m = self.moments(currents)
        return sum(dipole_field(m[k], points - self.positions[k]) for k in range(N_COILS))


@dataclass(eq=False)
class MagneticReading:
    timestamp: float
    fields: np.ndarray           # (64, 3) measured, uT
    currents: np.ndarray         # (9,)

    def __post_init__(self):
        self.fields = np.asarray(self.fields, float)
        self.currents = np.asarray(self.currents, float)
        if not (np.isfinite(self.fields).all() and np.isfinite(self.currents).all()):
            raise ValueError("reading contains non-finite values")


@dataclass
class Workspace:
    lo: tuple = (-15.0, -15.0, -10.0)
    hi: tuple = (15.0, 15.0, 8.0)

    def contains(self, p) -> bool:
        p = np.asarray(p)
        return bool(np.all(p >= self.lo) and np.all(p <= self.hi))

    @property
    def volume(self) -> float:
        return float(np.prod(np.subtract(self.hi, self.lo)))


# ------------------------------------------------------------------ physics
def dipole_field(moment, r) -> np.ndarray:
    """Field (uT) of a point dipole ``moment`` at offsets ``r`` (..., 3) in cm."""
    m = np.asarray(moment, float)
    r = np.asarray(r, float)
    d = np.linalg.norm(r, axis=-1, keepdims=True)
    if np.any(d < MIN_DISTANCE):
        raise DipoleSingularityError("field point too close to the dipole")
    rh = r / d
    return MU0_4PI * (3.0 * rh * np.sum(rh * m, axis=-1, keepdims=True) - m) / d**3


def _dipole_jacobians(m: np.ndarray, r: np.ndarray):
    """dB/dr (n,3,3) and dB/dm (n,3,3) for offsets r (n,3)."""
    d2 = np.sum(r * r, axis=-1)[:, None, None]
    d = np.sqrt(d2)
    rm = (r @ m)[:, None, None]
    I = np.eye(3)
    rr = r[:, :, None] * r[:, None, :]
    dB_dr = MU0_4PI * (
        3.0 * (r[:, :, None] * m[None, None, :] + m[None, :, None] * r[:, None, :] + rm * I) / d**5
        - 15.0 * rm * rr / d**7
    )
    dB_dm = MU0_4PI * (3.0 * rr / d2 - I) / d**3
    return dB_dr, dB_dm


def simulate_reading(capsule: Pose5, magnet: MagnetModel, array: SensorArray, actuators: ActuatorModel,
                     currents, rng: np.random.Generator | None, timestamp: float = 0.0,
                     workspace: Workspace = Workspace()) -> MagneticReading:
    if not workspace.contains(capsule.position):
        raise WorkspaceError(f"capsule at {capsule.position} outside workspace")
    currents = np.asarray(currents, float)
    if np.any(np.abs(currents) > actuators.max_current):
        raise ValueError("coil current exceeds configured bound")
    B = dipole_field(magnet.moment * capsule.heading, array.positions - capsule.position)
    B = B + actuators.field_at(array.positions, currents)
    meas = array.measure(B)
    if rng is not None:
        meas = meas + rng.normal(size=meas.shape) * array.noise_std
    return MagneticReading(timestamp, meas, currents)


def subtract_actuator(reading: MagneticReading, actuators: ActuatorModel, array: SensorArray) -> np.ndarray:
    if not np.any(reading.currents):
        return reading.fields.copy()
    return reading.fields - array.measure(actuators.field_at(array.positions, reading.currents))


# --------------------------------------------------------------- localization
def _chart(heading: np.ndarray) -> np.ndarray:
    """Rotation whose z axis is far from ``heading`` (polar angle kept in [10, 170] deg)."""
    for R in (np.eye(3), np.array([[0.0, 0, 1], [1, 0, 0], [0, 1, 0]])):
        if abs((R.T @ heading)[2]) < np.cos(np.deg2rad(10.0)):
            return R
    raise AssertionError("unreachable")


def _angles(heading: np.ndarray, R: np.ndarray):
    h = R.T @ heading
    return np.arccos(np.clip(h[2], -1, 1)), np.arctan2(h[1], h[0])


def _heading(theta: float, phi: float, R: np.ndarray):
    st, ct, sp, cp = np.sin(theta), np.cos(theta), np.sin(phi), np.cos(phi)
    h = R @ np.array([st * cp, st * sp, ct])
    dh = np.column_stack([R @ [ct * cp, ct * sp, -st], R @ [-st * sp, st * cp, 0.0]])
    return h, dh


@dataclass
class LocalizationResult:
    pose: Pose5
    residual: float
    reliable: bool
    converged: bool
    iterations: int
    cost_history: list = field(default_factory=list)

    def __iter__(self):
        yield self.pose
        yield self.residual


def model_fields(pose: Pose5, array: SensorArray, magnet: MagnetModel) -> np.ndarray:
    return array.measure(dipole_field(magnet.moment * pose.heading, array.positions - pose.position))


def expected_noise_norm(array: SensorArray) -> float:
    return float(np.sqrt(N_SENSORS * np.sum(array.noise_std**2)))


def localize_5dof(fields, array: SensorArray, magnet: MagnetModel, init: Pose5, max_iter: int = 100,
                  tol: float = 1e-12, reliability_factor: float = 5.0, raise_on_failure: bool = False
                  ) -> LocalizationResult:
    """Levenberg-Marquardt over position and two sphere angles of the heading."""
    target = np.asarray(fields, float).ravel()
    pos = init.position.copy()
    R = _chart(init.heading)
    theta, phi = _angles(init.heading, R)

    def evaluate(pos, theta, phi, jac=True):
        h, dh = _heading(theta, phi, R)
        r = array.positions - pos
        m = magnet.moment * h
        res = array.measure(dipole_field(m, r)).ravel() - target
        if not jac:
            return res, None
        dB_dr, dB_dm = _dipole_jacobians(m, r)
        J = np.concatenate([-dB_dr, dB_dm @ (magnet.moment * dh)], axis=2)
        J = np.einsum("sij,sjk->sik", array.axes, J).reshape(-1, 5)
        return res, J

    res, J = evaluate(pos, theta, phi)
    cost = float(res @ res)
    history = [cost]
    lam, nu = 1e-3, 2.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        A = J.T @ J
        g = J.T @ res
        step = np.linalg.solve(A + lam * np.diag(np.maximum(np.diag(A), 1e-12)), -g)
        new_pos, new_theta, new_phi = pos + step[:3], theta + step[3], phi + step[4]
        try:
            new_res, _ = evaluate(new_pos, new_theta, new_phi, jac=False)
            new_cost = float(new_res @ new_res)
        except DipoleSingularityError:
            new_cost = np.inf
        pred = float(-(2 * g @ step + step @ A @ step))
        rho = (cost - new_cost) / pred if pred > 0 else -1.0
        if rho > 0:
            small = np.linalg.norm(step) < tol * (1 + np.linalg.norm(pos)) or cost - new_cost <= tol * cost
            pos, theta, phi = new_pos, new_theta, new_phi
            # re-chart if the heading wandered near a pole of the current chart
            if np.sin(theta) < np.sin(np.deg2rad(10.0)):
                h, _ = _heading(theta, phi, R)
                R = _chart(h)
                theta, phi = _angles(h, R)
            res, J = evaluate(pos, theta, phi)
            cost = new_cost
            history.append(cost)
            lam *= max(1 / 3, 1 - (2 * rho - 1) ** 3)
            nu = 2.0
            if small or cost == 0.0:
                converged = True
                break
        else:
            lam *= nu
            nu *= 2
            if lam > 1e16:
                converged = np.linalg.norm(g) <= 1e-9 * (1 + cost)
                break
    heading, _ = _heading(theta, phi, R)
    resid = float(np.sqrt(cost))
    result = LocalizationResult(Pose5(pos, heading), resid,
                                converged and resid <= reliability_factor * expected_noise_norm(array),
                                converged, it, history)
    if not converged:
        log.debug("magnetic localization did not converge after %d iterations", it)
        if raise_on_failure:
            raise MagneticLocalizationError("no convergence", result)
    return result


def initial_guess(fields, array: SensorArray, magnet: MagnetModel, workspace: Workspace = Workspace(),
                  spacing: float = 2.5) -> Pose5:
    """Grid search over positions; the moment at each candidate is a linear least-squares fit."""
    target = np.asarray(fields, float).ravel()
    axes = [np.arange(lo, hi + 1e-9, spacing) for lo, hi in zip(workspace.lo, workspace.hi)]
    best = (np.inf, None, None)
    for p in np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3):
        r = array.positions - p
        _, dB_dm = _dipole_jacobians(np.zeros(3), r)
        A = np.einsum("sij,sjk->sik", array.axes, dB_dm).reshape(-1, 3)
        m, *_ = np.linalg.lstsq(A, target, rcond=None)
        cost = float(np.sum((A @ m - target) ** 2))
        if cost < best[0]:
            best = (cost, p, m)
    return Pose5(best[1], _unit(best[2]))


# ------------------------------------------------------------------- file I/O
def write_sensor_log(path, readings) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"i{k}" for k in range(N_COILS)] + ["sensor_id", "bx", "by", "bz"])
        for rd in readings:
            cur = [repr(float(c)) for c in rd.currents]
            for s, b in enumerate(rd.fields):
                w.writerow([repr(float(rd.timestamp))] + cur + [s] + [repr(float(x)) for x in b])


def read_sensor_log(path) -> list[MagneticReading]:
    rows: dict[float, tuple[np.ndarray, np.ndarray]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[0] != "t" or len(header) != N_COILS + 5:
            raise ValueError("unexpected sensor log header")
        for row in reader:
            t = float(row[0])
            cur = np.array(row[1:1 + N_COILS], float)
            if t not in rows:
                rows[t] = (cur, np.full((N_SENSORS, 3), np.nan))
            rows[t][1][int(row[1 + N_COILS])] = [float(x) for x in row[2 + N_COILS:]]
    return [MagneticReading(t, f, c) for t, (c, f) in sorted(rows.items())]


@dataclass
class MagneticSetup:
    array: SensorArray
    actuators: ActuatorModel
    magnet: MagnetModel
    workspace: Workspace

    @classmethod
    def default(cls) -> "MagneticSetup":
        return cls(SensorArray.grid(), ActuatorModel.grid(), MagnetModel(), Workspace())


def read_geometry_config(path) -> MagneticSetup:
    """Plain-text INI geometry.

    Sections and keys (all optional, defaults in brackets)::

        [array]   rows [8], cols [8], pitch [5.0], height [10.0], noise_std [0.5]
        [coils]   pitch [10.0], depth [-12.0], gain [2000.0], max_current [5.0]
        [magnet]  moment [5000.0]
        [workspace] lo [-15,-15,-10], hi [15,15,8]
    """
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)

    def get(sec, key, default):
        return cp.getfloat(sec, key, fallback=default) if cp.has_section(sec) else default

    def vec(sec, key, default):
        if cp.has_section(sec) and cp.has_option(sec, key):
            return tuple(float(x) for x in cp.get(sec, key).split(","))
        return default

    array = SensorArray.grid(int(get("array", "rows", 8)), int(get("array", "cols", 8)), get("array", "pitch", 5.0),
                             get("array", "height", 10.0), get("array", "noise_std", 0.5))
    coils = ActuatorModel.grid(get("coils", "pitch", 10.0), get("coils", "depth", -12.0),
                               get("coils", "gain", 2000.0), get("coils", "max_current", 5.0))
    ws = Workspace(vec("workspace", "lo", Workspace.lo), vec("workspace", "hi", Workspace.hi))
    return MagneticSetup(array, coils, MagnetModel(get("magnet", "moment", 5000.0)), ws)


def geometry_sections(setup: MagneticSetup | None = None) -> dict[str, dict[str, str]]:
    s = setup or MagneticSetup.default()
    p = s.array.positions
    pitch = float(np.diff(np.unique(p[:, 0]))[0])
    cpitch = float(np.diff(np.unique(s.actuators.positions[:, 0]))[0])
    return {
        "array": {"rows": "8", "cols": "8", "pitch": repr(pitch), "height": repr(float(p[0, 2])),
                  "noise_std": repr(float(s.array.noise_std[0]))},
        "coils": {"pitch": repr(cpitch), "depth": repr(float(s.actuators.positions[0, 2])),
                  "gain": repr(float(s.actuators.gains[0])), "max_current": repr(s.actuators.max_current)},
        "magnet": {"moment": repr(s.magnet.moment)},
        "workspace": {"lo": ",".join(map(repr, s.workspace.lo)), "hi": ",".join(map(repr, s.workspace.hi))},
    }


def write_geometry_config(path, setup: MagneticSetup | None = None) -> None:
    cp = configparser.ConfigParser()
    cp.read_dict(geometry_sections(setup))
    with open(Path(path), "w") as fh:
        cp.write(fh)
