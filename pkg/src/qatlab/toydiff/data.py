"""Synthetic 2-D datasets replicated over a few frames.

Each sample is a 2-D point drawn from two interleaved moons or an 8-mode
Gaussian ring, standardized, then repeated over ``frames`` frames with a
fixed rotation per frame so the data keeps a temporal axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..rng import Rng

FRAME_ROTATION = 0.2  # radians per frame
MOON_NOISE = 0.05
RING_RADIUS = 2.0
RING_STD = 0.2

# analytic mean / std of the raw point clouds
_MOON_MEAN = np.array([0.5, 0.25])
_MOON_STD = np.sqrt(np.array([0.75, 0.5625 - 1.0 / np.pi]) + MOON_NOISE**2)
_RING_STD = np.sqrt(RING_RADIUS**2 / 2.0 + RING_STD**2)

DATASETS = {"two_moons": 2, "gmm8": 8}


@dataclass
class DiffusionBatch:
    x0: np.ndarray  # (batch, frames, dim)
    eps: np.ndarray
    tau: np.ndarray  # (batch,) ints in [1, N]
    cond: np.ndarray  # (batch,) class labels


def sample_points(kind: str, n: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    if kind == "two_moons":
        label = rng.integers(0, 2, n)
        t = rng.uniform(n, 0.0, np.pi)
        x = np.where(label == 0, np.cos(t), 1.0 - np.cos(t))
        y = np.where(label == 0, np.sin(t), 0.5 - np.sin(t))
        pts = np.stack([x, y], axis=1) + rng.normal((n, 2), MOON_NOISE)
        return (pts - _MOON_MEAN) / _MOON_STD, label
    if kind == "gmm8":
        label = rng.integers(0, 8, n)
        ang = 2.0 * np.pi * label / 8.0
        centers = RING_RADIUS * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        return (centers + rng.normal((n, 2), RING_STD)) / _RING_STD, label
    raise ValueError(f"unknown dataset {kind!r}")


def to_frames(points: np.ndarray, frames: int) -> np.ndarray:
    """(n, 2) -> (n, frames, 2), frame j rotated by j * FRAME_ROTATION."""
    out = np.empty((points.shape[0], frames, 2))
    for j in range(frames):
        c, s = np.cos(j * FRAME_ROTATION), np.sin(j * FRAME_ROTATION)
        out[:, j] = points @ np.array([[c, s], [-s, c]])
    return out


def sample_clean(kind: str, n: int, frames: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    pts, label = sample_points(kind, n, rng)
    return to_frames(pts, frames), label


def make_batch(kind: str, batch: int, frames: int, N: int, streams: dict[str, Rng]) -> DiffusionBatch:
    """One training batch; ``streams`` holds the ``data``, ``noise`` and ``timesteps`` Rngs."""
    x0, cond = sample_clean(kind, batch, frames, streams["data"])
    eps = streams["noise"].normal(x0.shape)
    tau = streams["timesteps"].integers(1, N + 1, batch)
    return DiffusionBatch(x0, eps, tau, cond)


def write_cache(path, kind: str, n: int, frames: int, seed: int) -> Path:
    """Save a seeded sample set as ``.npz`` (arrays ``x0`` float64 and ``cond`` int64)."""
    x0, cond = sample_clean(kind, n, frames, Rng(seed).child("data"))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, x0=x0, cond=cond.astype(np.int64))
    return path


def read_cache(path) -> tuple[np.ndarray, np.ndarray]:
    with np.load(path) as z:
        return z["x0"], z["cond"]
