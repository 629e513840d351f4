"""Train a teacher, distill a W4A4 student with a decaying low-rank branch, and
show that every truncation leaves the layer outputs unchanged.

    python3 demos/rank_decay_walkthrough.py
"""

import numpy as np

from qatlab import checkpoint
from qatlab.toydiff import DenoiserConfig, NoiseSchedule, pretrain_teacher, sample
from qatlab.trainer import TrainConfig, train

cfg = DenoiserConfig.for_dataset("two_moons")
schedule = NoiseSchedule.cosine(cfg.noise_steps)
print("pretraining the full-precision teacher ...")
teacher = pretrain_teacher(cfg, "two_moons", schedule, seed=0, steps=1500)

run = TrainConfig(steps=600, r0=16, lam=0.5, strategy="rank", spectra_every=100)
trainer, summary = train(run, teacher, out_dir="runs/walkthrough")
print(f"KD loss {summary['initial_kd']:.4f} -> {summary['final_kd']:.4f}")
for e in summary["phase_log"]:
    print(f"  step {e['step']:4d}: rank {e['rank_before']:2d} -> {e['rank_after']:2d}, "
          f"max output change at truncation {e['max_output_diff']:.1e}")

digest = trainer.write_checkpoint("runs/walkthrough/final.qvgn")
blob = open("runs/walkthrough/final.qvgn", "rb").read()
print(f"final checkpoint {digest[:12]}..., auxiliary bytes: {checkpoint.aux_payload_bytes(blob)}")

x = sample(trainer.student, schedule, steps=50, seed=1, n=1000)
print("student sample mean per frame:", np.round(x.mean(axis=0), 3).tolist())
