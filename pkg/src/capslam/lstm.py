"""Single-layer LSTM motion prior trained by backpropagation through time.

Inputs are relative twists between consecutive poses, so predictions are
invariant to a global change of frame.  The network maps a window of ``W``
relative twists to the next relative twist.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Pose, exp_se3, log_se3

log = logging.getLogger(__name__)

WINDOW = 50
MAGIC = b"LSTMNPZ1"


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


# ------------------------------------------------------------------ encoding
@dataclass
class PoseSequence:
    stamps: np.ndarray
    poses: list

    def __post_init__(self):
        self.stamps = np.asarray(self.stamps, float)
        if len(self.stamps) != len(self.poses):
            raise ValueError("stamps and poses differ in length")
        if np.any(np.diff(self.stamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    def window(self, start: int, length: int = WINDOW) -> "PoseSequence":
        return PoseSequence(self.stamps[start:start + length], self.poses[start:start + length])


def relative_twist(a: Pose, b: Pose) -> np.ndarray:
    return log_se3(a.inverse() @ b)


def encode_sequence(seq: PoseSequence) -> np.ndarray:
    """(len, 6) features: zero, then ``log(P_{t-1}^-1 P_t)``."""
    if not isinstance(seq, PoseSequence):
        raise TypeError("expected a PoseSequence")
    out = np.zeros((len(seq), 6))
    for t in range(1, len(seq)):
        out[t] = relative_twist(seq.poses[t - 1], seq.poses[t])
    return out


def decode_sequence(first: Pose, features: np.ndarray) -> list:
    poses = [first]
    for xi in features[1:]:
        poses.append(poses[-1] @ exp_se3(xi))
    return poses


def make_dataset(sequences: Sequence[PoseSequence], window: int = WINDOW, stride: int = 1):
    """Windows of ``window`` features and the twist to the following pose."""
    X, Y = [], []
    for seq in sequences:
        f = encode_sequence(seq)
        for s in range(0, len(seq) - window, stride):
            X.append(f[s:s + window].copy())
            X[-1][0] = 0.0  # first step of every window carries no motion
            Y.append(f[s + window])
    return np.asarray(X), np.asarray(Y)


# ------------------------------------------------------------------- network
def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class LstmNetwork:
    Wx: np.ndarray        # (4H, D) gates ordered i, f, o, g
    Wh: np.ndarray        # (4H, H)
    b: np.ndarray         # (4H,)
    Wy: np.ndarray        # (D_out, H)
    by: np.ndarray        # (D_out,)
    in_scale: np.ndarray = field(default_factory=lambda: np.ones(6))
    out_scale: np.ndarray = field(default_factory=lambda: np.ones(6))
    dropout: float = 0.2
    seed: int = 0
    skip: bool = False    # predict a correction to the last input twist (constant velocity)

    PARAMS = ("Wx", "Wh", "b", "Wy", "by")

    @property
    def hidden(self) -> int:
        return self.Wh.shape[1]

    @classmethod
    def init(cls, hidden: int = 64, n_in: int = 6, n_out: int = 6, seed: int = 0, dropout: float = 0.2):
        rng = np.random.default_rng(seed)
        s_in, s_h = 1 / np.sqrt(n_in), 1 / np.sqrt(hidden)
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0  # forget gate
        return cls(rng.uniform(-s_in, s_in, (4 * hidden, n_in)), rng.uniform(-s_h, s_h, (4 * hidden, hidden)), b,
                   rng.uniform(-s_h, s_h, (n_out, hidden)), np.zeros(n_out), np.ones(n_in), np.ones(n_out),
                   dropout, seed)

    @classmethod
    def zeros(cls, hidden: int = 64, n_in: int = 6, n_out: int = 6):
        return cls(np.zeros((4 * hidden, n_in)), np.zeros((4 * hidden, hidden)), np.zeros(4 * hidden),
                   np.zeros((n_out, hidden)), np.zeros(n_out), np.ones(n_in), np.ones(n_out), 0.0)

    def params(self) -> dict:
        return {k: getattr(self, k) for k in self.PARAMS}

    def copy(self) -> "LstmNetwork":
        return LstmNetwork(**{k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()})

    # ------------------------------------------------------------- forward
    def forward(self, x: np.ndarray, mask: np.ndarray | None = None, keep_cache: bool = False):
        """Raw (scaled-units) outputs for inputs ``x`` of shape (B, W, D)."""
        B, W, _ = x.shape
        H = self.hidden
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        cache = []
        xw = x @ self.Wx.T + self.b          # (B, W, 4H)
        for t in range(W):
            z = xw[:, t] + h @ self.Wh.T
            i = _sigmoid(z[:, :H])
            f = _sigmoid(z[:, H:2 * H])
            o = _sigmoid(z[:, 2 * H:3 * H])
            g = np.tanh(z[:, 3 * H:])
            c_prev, h_prev = c, h
            c = f * c_prev + i * g
            tc = np.tanh(c)
            h = o * tc
            if keep_cache:
                cache.append((h_prev, c_prev, i, f, o, g, tc))
        hd = h if mask is None else h * mask
        y = hd @ self.Wy.T + self.by
        return (y, (x, cache, h, hd, mask)) if keep_cache else y

    def backward(self, dy: np.ndarray, state) -> dict:
        x, cache, h_last, hd, mask = state
        H = self.hidden
        grads = {k: np.zeros_like(v) for k, v in self.params().items()}
        grads["Wy"] = dy.T @ hd
        grads["by"] = dy.sum(axis=0)
        dh = dy @ self.Wy
        if mask is not None:
            dh = dh * mask
        dc = np.zeros_like(dh)
        dz_all = np.zeros(x.shape[:2] + (4 * H,))
        for t in reversed(range(x.shape[1])):
            h_prev, c_prev, i, f, o, g, tc = cache[t]
            do = dh * tc
            dc = dc + dh * o * (1 - tc**2)
            di = dc * g
            df = dc * c_prev
            dg = dc * i
            dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g**2)], axis=1)
            dz_all[:, t] = dz
            grads["Wh"] += dz.T @ h_prev
            dh = dz @ self.Wh
            dc = dc * f
        grads["Wx"] = np.einsum("btk,btd->kd", dz_all, x)
        grads["b"] = dz_all.sum(axis=(0, 1))
        return grads

    # ----------------------------------------------------------- inference
    def predict_twist(self, features: np.ndarray) -> np.ndarray:
        """Predicted next relative twist for a (W, 6) or (B, W, 6) feature window."""
        single = features.ndim == 2
        x = features[None] if single else features
        y = self.forward(x / self.in_scale) * self.out_scale
        if self.skip:
            y = y + x[:, -1]
        return y[0] if single else y


def lstm_forward(net: LstmNetwork, features: np.ndarray) -> np.ndarray:
    return net.predict_twist(np.asarray(features, float))


# -------------------------------------------------------------------- losses
def mse_loss(net: LstmNetwork, X: np.ndarray, Y: np.ndarray, mask=None, with_grad: bool = False):
    """Mean squared error in scaled units, with BPTT gradients on request."""
    xs = X / net.in_scale
    ys = ((Y - X[:, -1]) if net.skip else Y) / net.out_scale
    if not with_grad:
        y = net.forward(xs, mask)
        return float(np.mean((y - ys) ** 2))
    y, state = net.forward(xs, mask, keep_cache=True)
    err = y - ys
    loss = float(np.mean(err**2))
    grads = net.backward(2 * err / err.size, state)
    return loss, grads


# ------------------------------------------------------------------ training
@dataclass
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 1e-3
    optimizer: str = "adam"       # "adam" or "sgd"
    batch_size: int = 32
    dropout: float = 0.2
    patience: int = 20
    clip_norm: float = 5.0
    val_fraction: float = 0.1
    hidden: int = 64
    skip: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epochs <= 0 or self.learning_rate <= 0 or self.batch_size <= 0 or self.patience <= 0:
            raise ValueError("epochs, learning rate, batch size and patience must be positive")
        if not 0 <= self.dropout < 1 or not 0 < self.val_fraction < 1:
            raise ValueError("dropout and validation fraction must lie in [0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainResult:
    net: LstmNetwork
    train_loss: list
    val_loss: list
    best_epoch: int


def lstm_train(X: np.ndarray, Y: np.ndarray, cfg: TrainConfig = TrainConfig(), net: LstmNetwork | None = None
               ) -> TrainResult:
    if len(X) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(X))
    n_val = max(1, int(round(cfg.val_fraction * len(X))))
    val, tr = order[:n_val], order[n_val:]
    if len(tr) == 0:
        raise ValueError("dataset too small for a validation split")
    if net is None:
        net = LstmNetwork.init(cfg.hidden, X.shape[2], Y.shape[1], cfg.seed, cfg.dropout)
        net.skip = cfg.skip
        # scale-only normalization keeps zero twist mapped to zero
        target = (Y[tr] - X[tr, -1]) if cfg.skip else Y[tr]
        net.in_scale = np.maximum(np.sqrt(np.mean(X[tr] ** 2, axis=(0, 1))), 1e-9)
        net.out_scale = np.maximum(np.sqrt(np.mean(target**2, axis=0)), 1e-9)
    net.dropout = cfg.dropout
    m = {k: np.zeros_like(v) for k, v in net.params().items()}
    v = {k: np.zeros_like(v) for k, v in net.params().items()}
    step = 0
    best = (mse_loss(net, X[val], Y[val]), net.copy(), 0)
    train_curve, val_curve = [], []
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(tr)
        total = 0.0
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            mask = None
            if cfg.dropout > 0:
                mask = (rng.random((len(idx), net.hidden)) >= cfg.dropout) / (1 - cfg.dropout)
            loss, grads = mse_loss(net, X[idx], Y[idx], mask, with_grad=True)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            total += loss * len(idx)
            gnorm = np.sqrt(sum(float(np.sum(g**2)) for g in grads.values()))
            scale = min(1.0, cfg.clip_norm / max(gnorm, 1e-300))
            step += 1
            for k, g in grads.items():
                g = g * scale
                p = getattr(net, k)
                if cfg.optimizer == "sgd":
                    p -= cfg.learning_rate * g
                else:
                    m[k] = 0.9 * m[k] + 0.1 * g
                    v[k] = 0.999 * v[k] + 0.001 * g**2
                    mh = m[k] / (1 - 0.9**step)
                    vh = v[k] / (1 - 0.999**step)
                    p -= cfg.learning_rate * mh / (np.sqrt(vh) + 1e-8)
        train_curve.append(total / len(tr))
        vl = mse_loss(net, X[val], Y[val])
        if not np.isfinite(vl):
            raise TrainingDivergedError(epoch)
        val_curve.append(vl)
        if vl < best[0]:
            best, stale = (vl, net.copy(), epoch), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best[2])
                break
    return TrainResult(best[1], train_curve, val_curve, best[2])


# ----------------------------------------------------------------- predictors
@dataclass
class LstmMotionModel:
    net: LstmNetwork
    window: int = WINDOW

    def predict_next(self, poses: Sequence[Pose]) -> Pose:
        poses = list(poses)[-self.window:]
        if len(poses) < 2:
            return poses[-1]
        f = np.zeros((self.window, 6))
        rel = [relative_twist(a, b) for a, b in zip(poses[:-1], poses[1:])]
        f[self.window - len(rel):] = rel  # left-pad short histories with zero motion
        return poses[-1] @ exp_se3(self.net.predict_twist(f))


def predict_next(model, window: PoseSequence | Sequence[Pose]) -> Pose:
    """Next pose from an LSTM network, a motion model, or ``None`` for constant velocity."""
    poses = window.poses if isinstance(window, PoseSequence) else list(window)
    if model is None:
        if len(poses) < 2:
            return poses[-1]
        return poses[-1] @ (poses[-2].inverse() @ poses[-1])
    if isinstance(model, LstmNetwork):
        model = LstmMotionModel(model, len(poses))
    return model.predict_next(poses)


# ------------------------------------------------------------- serialization
def save_network(path, net: LstmNetwork, extra: dict | None = None) -> None:
    """Container: magic, u32 header length, JSON header, little-endian float64 blobs in header order."""
    arrays = {**net.params(), "in_scale": net.in_scale, "out_scale": net.out_scale}
    header = {
        "arrays": [{"name": k, "shape": list(a.shape)} for k, a in arrays.items()],
        "dropout": net.dropout,
        "seed": net.seed,
        "skip": net.skip,
        "config": extra or {},
    }
    hb = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_network(path) -> tuple[LstmNetwork, dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError("not an LSTM parameter file")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + n])
    off = 12 + n
    arrays = {}
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"]))
        arrays[spec["name"]] = np.frombuffer(data, "<f8", count, off).reshape(spec["shape"]).astype(float)
        off += 8 * count
    net = LstmNetwork(**arrays, dropout=header["dropout"], seed=header["seed"], skip=header.get("skip", False))
    return net, header["config"]


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
