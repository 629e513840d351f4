"""Seeded toy QAT runs shared by several acceptance criteria, cached on disk.

Cache entries are keyed by the run config and a digest of the package
sources, so any code change invalidates them and the runs are redone.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import qatlab
from helpers import CACHE, cached_teacher
from qatlab.rng import Rng
from qatlab.toydiff import NoiseSchedule, add_noise, make_batch
from qatlab.trainer import TrainConfig, train

SEEDS = (0, 1, 2, 3, 4)
# shared settings for the directional comparisons; everything else is the TrainConfig default
DIRECTIONAL: dict = {}
RUNS = {
    "naive": dict(r0=0, strategy="none"),
    "phi": dict(r0=32, strategy="none"),
    "rank": dict(r0=32, strategy="rank"),
    "sparse": dict(r0=32, strategy="sparse"),
    "residual-quant": dict(r0=32, strategy="residual-quant"),
}


def source_digest() -> str:
    h = hashlib.sha256()
    root = Path(qatlab.__file__).parent
    for path in sorted(root.rglob("*.py")):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def run_config(name: str, seed: int, **extra) -> TrainConfig:
    return TrainConfig(**{**DIRECTIONAL, **RUNS[name], **extra, "seed": seed})


def probe_inputs(cfg: TrainConfig):
    """A fixed noisy batch for comparing a live student with its reloaded checkpoint."""
    b = make_batch(cfg.dataset, 64, 4, 100, {k: Rng(1234).child(k) for k in ("data", "noise", "timesteps")})
    return add_noise(b.x0, b.eps, b.tau, NoiseSchedule.cosine(100)), b.cond, b.tau


def cached_run(name: str, seed: int, keep_checkpoint: bool = False, **extra) -> dict:
    """Summary, spectra fractions and traces of one full run, computed once per code version."""
    cfg = run_config(name, seed, **extra)
    key = hashlib.sha256(json.dumps({"cfg": asdict(cfg), "src": source_digest()}, sort_keys=True).encode()).hexdigest()[:20]
    folder = CACHE / "runs" / f"{name}_s{seed}_{key}"
    meta = folder / "result.json"
    if meta.exists() and (not keep_checkpoint or (folder / "final.qvgn").exists()):
        return {**json.loads(meta.read_text()), "folder": str(folder)}
    folder.mkdir(parents=True, exist_ok=True)
    tr, summary = train(cfg, cached_teacher(seed, dataset=cfg.dataset))
    result = {
        "summary": {k: v for k, v in summary.items() if k != "config"},
        "grad_norm": tr.trace.column("grad_norm").tolist(),
        "loss": tr.trace.column("loss").tolist(),
        "fractions": [
            {"step": s["step"], **{g: v["fraction_small"] for g, v in s["groups"].items()}} for s in tr.trace.spectra
        ],
    }
    if keep_checkpoint:
        tr.write_checkpoint(folder / "final.qvgn")
        x, cond, tau = probe_inputs(cfg)
        result["probe_output"] = tr.student(x, cond, tau).data.tolist()
    meta.write_text(json.dumps(result))
    return {**result, "folder": str(folder)}
