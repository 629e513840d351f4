"""Naive W4A4 QAT against QAT with a persistent low-rank error branch, same seed.
Writes a merged step-indexed series for plotting gradient norm and loss.

    python3 demos/gradnorm_naive_vs_phi.py
"""

import json

import numpy as np

from qatlab.toydiff import DenoiserConfig, NoiseSchedule, pretrain_teacher
from qatlab.trainer import TrainConfig, grad_norm_comparison

cfg = DenoiserConfig.for_dataset("two_moons")
teacher = pretrain_teacher(cfg, "two_moons", NoiseSchedule.cosine(cfg.noise_steps), seed=0, steps=1500)

base = dict(steps=1000, seed=0)
out = grad_norm_comparison(TrainConfig(r0=0, strategy="none", **base), TrainConfig(r0=32, strategy="none", **base), teacher)
for key, label in (("a", "naive"), ("b", "with branch")):
    g = np.array(out[key]["grad_norm"])
    print(f"{label:12s} mean |g| (steps 100+) {g[100:].mean():.4f}   final KD {out[key]['summary']['final_kd']:.4f}")

series = {"step": out["a"]["step"][::10],
          "naive": {"grad_norm": out["a"]["grad_norm"][::10], "loss": out["a"]["loss"][::10]},
          "branch": {"grad_norm": out["b"]["grad_norm"][::10], "loss": out["b"]["loss"][::10]}}
with open("gradnorm_series.json", "w") as fh:
    json.dump(series, fh)
print("wrote gradnorm_series.json")
