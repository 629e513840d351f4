"""Denoising and distillation losses, a deterministic sampler, and teacher pretraining."""

from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..optim import AdamW
from ..rng import Rng
from ..tensor import Tensor
from .data import DiffusionBatch, make_batch
from .model import Denoiser, DenoiserConfig
from .schedule import NoiseSchedule, add_noise


def _batch_sq_error(pred: Tensor, target) -> Tensor:
    diff = T.sub(pred, T.as_tensor(target))
    return T.mul(T.sum(T.square(diff)), 1.0 / pred.shape[0])


def denoise_loss(model, batch: DiffusionBatch, schedule: NoiseSchedule) -> Tensor:
    """Mean over the batch of ``||eps - model(x_tau, c, tau)||_F^2``."""
    x_tau = add_noise(batch.x0, batch.eps, batch.tau, schedule)
    return _batch_sq_error(model(x_tau, batch.cond, batch.tau), batch.eps)


def teacher_output(teacher: Denoiser, x_tau, cond, tau) -> np.ndarray:
    if any(p.requires_grad for p in teacher.parameters()):
        raise ValueError("teacher parameters must be frozen before distillation")
    return teacher(x_tau, cond, tau).data


def kd_loss(student, teacher: Denoiser, batch: DiffusionBatch, schedule: NoiseSchedule) -> Tensor:
    """Mean over the batch of ``||student(x_tau) - teacher(x_tau)||_F^2`` on shared inputs."""
    x_tau = add_noise(batch.x0, batch.eps, batch.tau, schedule)
    target = teacher_output(teacher, x_tau, batch.cond, batch.tau)
    return _batch_sq_error(student(x_tau, batch.cond, batch.tau), target)


def sample(model, schedule: NoiseSchedule, steps: int, seed: int, n: int = 256, cond=None, clip: float | None = 3.0) -> np.ndarray:
    """Deterministic DDIM update from pure noise at tau = N down to a clean estimate.

    The clean-sample estimate is clipped to ``[-clip, clip]`` each step (the data
    are standardized), which keeps the near-zero ``alpha`` of the first steps
    from amplifying small noise-prediction errors.
    """
    if steps < 1:
        raise ValueError("sampling needs at least one step")
    rng = Rng(seed).child("sample")
    cfg = model.cfg
    x = rng.normal((n, cfg.frames, cfg.data_dim))
    if cond is None:
        cond = rng.integers(0, cfg.num_classes, n)
    cond = np.broadcast_to(np.asarray(cond, dtype=np.int64), (n,))
    taus = np.unique(np.round(np.linspace(1, schedule.N, steps)).astype(np.int64))[::-1]
    for i, tau in enumerate(taus):
        t = np.full(n, tau)
        eps = model(x, cond, t).data
        a, s = schedule.alpha(tau), schedule.sigma(tau)
        x0_hat = (x - s * eps) / a
        if clip is not None:
            x0_hat = np.clip(x0_hat, -clip, clip)
        if i + 1 == len(taus):
            x = x0_hat
        else:
            nxt = taus[i + 1]
            x = schedule.alpha(nxt) * x0_hat + schedule.sigma(nxt) * eps
    return x


def pretrain_teacher(
    cfg: DenoiserConfig,
    dataset: str,
    schedule: NoiseSchedule,
    seed: int,
    steps: int = 3000,
    batch: int = 128,
    lr: float = 2e-3,
) -> Denoiser:
    """Full-precision training on the denoising objective; returns a frozen model."""
    root = Rng(seed).child("teacher")
    model = Denoiser(cfg, root.child("init"))
    streams = {k: root.child(k) for k in ("data", "noise", "timesteps")}
    opt = AdamW(weight_decay=0.0)
    params = dict(model.named_parameters())
    warm = max(1, steps // 20)
    for t in range(steps):
        b = make_batch(dataset, batch, cfg.frames, schedule.N, streams)
        loss = denoise_loss(model, b, schedule)
        T.zero_grads(params.values())
        T.backward(loss)
        rate = lr * min(1.0, (t + 1) / warm) * 0.5 * (1.0 + np.cos(np.pi * t / steps))
        opt.step(params, rate)
    return model.freeze()
