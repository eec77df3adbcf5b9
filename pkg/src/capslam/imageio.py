"""Portable pixmap I/O (binary PGM/PPM) and raw float dumps.

Depth maps are stored as 16-bit PGM in hundredths of a centimeter with a
``.txt`` sidecar recording the scale; zero encodes an invalid pixel.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

DEPTH_SCALE = 100.0


def _read_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_pnm(path) -> np.ndarray:
    """Read binary P5/P6; returns uint8 or uint16 array (H, W) or (H, W, 3)."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _read_tokens(data, 4)
    w, h, maxval = int(w), int(h), int(maxval)
    channels = {b"P5": 1, b"P6": 3}.get(magic)
    if channels is None:
        raise ValueError(f"{path}: unsupported PNM magic {magic!r}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = w * h * channels
    arr = np.frombuffer(data, dtype=dtype, count=n, offset=offset)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return arr.reshape(shape).astype(np.uint16 if maxval > 255 else np.uint8)


def write_pnm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write array of shape {img.shape} as PNM")
    if img.dtype == np.uint8:
        maxval, payload = 255, img.tobytes()
    elif img.dtype == np.uint16:
        maxval, payload = 65535, img.astype(">u2").tobytes()
    else:
        raise TypeError("PNM arrays must be uint8 or uint16")
    h, w = img.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n{maxval}\n".encode() + payload)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint(img: np.ndarray) -> np.ndarray:
    scale = 65535.0 if img.dtype == np.uint16 else 255.0
    return img.astype(float) / scale


def write_depth(path, depth: np.ndarray, scale: float = DEPTH_SCALE) -> None:
    d = np.where(np.isfinite(depth) & (depth > 0), depth, 0.0)
    q = np.round(d * scale)
    if q.max(initial=0) > 65535:
        raise ValueError("depth exceeds 16-bit range at this scale")
    write_pnm(path, q.astype(np.uint16))
    Path(str(path) + ".txt").write_text(f"scale = {scale!r}\nunit = cm\ninvalid = 0\n")


def read_depth(path) -> np.ndarray:
    """Depth in cm, NaN where invalid."""
    raw = read_pnm(path).astype(float)
    scale = DEPTH_SCALE
    side = Path(str(path) + ".txt")
    if side.exists():
        for line in side.read_text().splitlines():
            key, _, val = line.partition("=")
            if key.strip() == "scale":
                scale = float(val)
    return np.where(raw > 0, raw / scale, np.nan)


def write_raw(path, arr: np.ndarray) -> None:
    """Little-endian float64 dump with a one-line text header of the shape."""
    arr = np.ascontiguousarray(arr, dtype="<f8")
    header = ("RAWF64 " + " ".join(str(s) for s in arr.shape) + "\n").encode()
    Path(path).write_bytes(header + arr.tobytes())


def read_raw(path) -> np.ndarray:
    data = Path(path).read_bytes()
    line, _, payload = data.partition(b"\n")
    parts = line.split()
    if parts[0] != b"RAWF64":
        raise ValueError(f"{path}: not a raw float dump")
    shape = tuple(int(s) for s in parts[1:])
    return np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
