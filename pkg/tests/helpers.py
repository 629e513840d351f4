"""Shared oracles and fixtures for the test-suite."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from qatlab import checkpoint
from qatlab import tensor as T
from qatlab.trainer import restore_model, save_model
from qatlab.toydiff import DenoiserConfig, NoiseSchedule, pretrain_teacher

CACHE = Path(os.environ.get("QATLAB_TEST_CACHE", Path(__file__).parent / ".cache"))


def central_diff(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def autodiff(build, *arrays):
    """Gradients of ``build(*tensors)`` w.r.t. each input array."""
    ts = [T.Tensor(a, requires_grad=True) for a in arrays]
    T.backward(build(*ts))
    return [t.grad for t in ts]


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def cached_teacher(seed: int = 0, steps: int = 3000, dataset: str = "two_moons"):
    """Pretrain once per (seed, steps, dataset) and keep the result on disk."""
    cfg = DenoiserConfig.for_dataset(dataset)
    path = CACHE / f"teacher_{dataset}_s{seed}_n{steps}.qvgn"
    if path.exists():
        return restore_model(checkpoint.load(path), cfg)
    teacher = pretrain_teacher(cfg, dataset, NoiseSchedule.cosine(cfg.noise_steps), seed, steps=steps)
    save_model(path, teacher)
    return teacher


# one line per acceptance criterion, printed in the terminal summary
CRITERIA_LINES: dict[int, str] = {}


def report(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    CRITERIA_LINES[number] = line
    print(line)
