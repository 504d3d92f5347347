"""Heatmap image strips written as binary portable pixmaps (P6)."""
from __future__ import annotations

import numpy as np

from .persistence import atomic_write


def _colormap(x: np.ndarray, diverging: bool) -> np.ndarray:
    """Values scaled to [0, 1] (or [-1, 1] when diverging) -> uint8 RGB."""
    if diverging:
        t = np.clip(x, -1.0, 1.0)
        r = np.where(t > 0, 1.0, 1.0 + t)
        b = np.where(t < 0, 1.0, 1.0 - t)
        g = 1.0 - np.abs(t)
        rgb = np.stack([r, g, b], axis=-1)
    else:
        t = np.clip(x, 0.0, 1.0)
        rgb = np.stack([t ** 0.8, t ** 1.6, 0.25 + 0.5 * t * (1 - t)], axis=-1)
    return (rgb * 255 + 0.5).astype(np.uint8)


def strip_image(traj: np.ndarray, channel: int, frames=None, scale: int = 4, gap: int = 2) -> np.ndarray:
    """Frames of one channel side by side, y axis pointing up; traj is (T, H, W, C)."""
    T, H, W, _ = traj.shape
    frames = list(range(T)) if frames is None else list(frames)
    data = traj[frames, :, :, channel]
    diverging = bool(data.min() < 0)
    top = float(np.abs(data).max()) or 1.0
    img = _colormap(data / top, diverging)[:, ::-1]  # row 0 is the bottom of the box
    img = img.repeat(scale, axis=1).repeat(scale, axis=2)
    h, w = img.shape[1:3]
    out = np.full((h, len(frames) * (w + gap) - gap, 3), 255, dtype=np.uint8)
    for i in range(len(frames)):
        out[:, i * (w + gap): i * (w + gap) + w] = img[i]
    return out


def ppm_bytes(img: np.ndarray) -> bytes:
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def write_strip(path, traj: np.ndarray, channel: int, frames=None, scale: int = 4) -> None:
    atomic_write(path, ppm_bytes(strip_image(traj, channel, frames, scale)))


def read_ppm(path) -> np.ndarray:
    raw = open(path, "rb").read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)
