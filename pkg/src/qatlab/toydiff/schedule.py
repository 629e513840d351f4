"""Variance-preserving noise schedule and the forward noising map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ALPHA_BAR_FLOOR = 1e-4


@dataclass(frozen=True)
class NoiseSchedule:
    alpha_bar: np.ndarray  # index 0 is tau = 1

    @classmethod
    def cosine(cls, steps: int = 100, offset: float = 0.008) -> "NoiseSchedule":
        tau = np.arange(0, steps + 1, dtype=np.float64)
        f = np.cos((tau / steps + offset) / (1.0 + offset) * np.pi / 2.0) ** 2
        abar = np.clip(f[1:] / f[0], ALPHA_BAR_FLOOR, 1.0)
        return cls(np.minimum.accumulate(abar))

    @property
    def N(self) -> int:
        return self.alpha_bar.size

    def alpha(self, tau) -> np.ndarray:
        return np.sqrt(self._abar(tau))

    def sigma(self, tau) -> np.ndarray:
        return np.sqrt(1.0 - self._abar(tau))

    def _abar(self, tau) -> np.ndarray:
        t = np.asarray(tau)
        if np.any(t < 1) or np.any(t > self.N):
            raise ValueError(f"timestep outside [1, {self.N}]")
        return self.alpha_bar[t.astype(np.int64) - 1]


def add_noise(x0: np.ndarray, eps: np.ndarray, tau, schedule: NoiseSchedule) -> np.ndarray:
    """``x_tau = alpha_tau * x0 + sigma_tau * eps`` with one timestep per leading index."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {x0.shape} and eps {eps.shape} differ")
    tau = np.asarray(tau)
    shape = tau.shape + (1,) * (x0.ndim - tau.ndim)
    a = schedule.alpha(tau).reshape(shape)
    s = schedule.sigma(tau).reshape(shape)
    return a * x0 + s * eps
