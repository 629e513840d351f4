"""Experiment configs, seeded runs, ablation grids and plot-data export.

A config is a YAML document with a schema version and five sections::

    schema_version: 1
    seed: 0
    output_dir: runs/example
    dataset: {name: two_moons}
    model: {width: 64, depth: 2, frames: 4, time_features: 16, noise_steps: 100}
    teacher: {steps: 3000, batch: 128, lr: 0.002, cache_dir: null}
    train: {steps: 2000, lr: 0.001, batch: 64, ...}
    aux: {strategy: rank, r0: 32, lam: 0.5, anneal: cosine, ordering: trailing, refactorize: true}

Missing keys take the defaults below, unknown keys are rejected with the line
they appear on, and the fully resolved document is written next to the run's
artifacts so it can be fed back in to repeat the run.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from copy import deepcopy
from pathlib import Path

import numpy as np
import yaml

from . import checkpoint
from .toydiff.model import DenoiserConfig
from .toydiff.objectives import pretrain_teacher
from .toydiff.schedule import NoiseSchedule
from .trainer import TrainConfig, read_trace_csv, restore_model, save_model, train

SCHEMA_VERSION = 1
RESOLVED_NAME = "config.resolved.yaml"

_TRAIN_KEYS = (
    "steps", "warmup", "lr", "beta1", "beta2", "eps", "weight_decay", "batch", "weight_bits", "act_bits",
    "learn_scale", "eval_batches", "eval_batch", "spectra_every", "snapshot_every", "checkpoint_every",
)
_AUX_KEYS = ("strategy", "r0", "lam", "anneal", "ordering", "refactorize")
_MODEL_KEYS = ("width", "depth", "frames", "mlp_ratio", "time_features", "noise_steps")

_tc, _mc = TrainConfig(), DenoiserConfig()
DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "output_dir": "runs/default",
    "dataset": {"name": "two_moons"},
    "model": {k: getattr(_mc, k) for k in _MODEL_KEYS},
    "teacher": {"steps": 3000, "batch": 128, "lr": 2e-3, "cache_dir": None},
    "train": {k: getattr(_tc, k) for k in _TRAIN_KEYS},
    "aux": {k: getattr(_tc, k) for k in _AUX_KEYS},
}
# keys whose value may be null
_NULLABLE = {("teacher", "cache_dir")}


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        self.line = line
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


# ---------------------------------------------------------------------------
# config ingestion


def _line_map(node, path=(), out=None) -> dict:
    """Map every key path in a composed YAML node tree to its 1-based line."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = (*path, k.value)
            out[key] = k.start_mark.line + 1
            _line_map(v, key, out)
    return out


def _check_type(value, default, path, line, source):
    name = ".".join(path)
    if value is None:
        if path in _NULLABLE:
            return None
        raise ConfigError(f"{name} may not be null", line, source)
    if path in _NULLABLE:
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a path string or null", line, source)
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{name} must be {type(default).__name__}, got {value!r}", line, source)
    return value


def _merge(doc: dict, defaults: dict, lines: dict, path: tuple, source: str) -> dict:
    out = {}
    for key, value in doc.items():
        kp = (*path, key)
        line = lines.get(kp)
        if key not in defaults:
            raise ConfigError(f"unknown key {'.'.join(map(str, kp))!r}", line, source)
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{'.'.join(kp)} must be a mapping", line, source)
            out[key] = _merge(value, defaults[key], lines, kp, source)
        else:
            out[key] = _check_type(value, defaults[key], kp, line, source)
    # canonical key order so echoed configs diff cleanly
    return {key: out[key] if key in out else deepcopy(default) for key, default in defaults.items()}


def parse_config(text: str, source: str = "<config>") -> dict:
    """Schema-check a YAML document and fill defaults; errors carry the offending line."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"malformed YAML: {getattr(exc, 'problem', exc)}", mark.line + 1 if mark else None, source)
    if doc is None:
        doc, node = {}, None
    if not isinstance(doc, dict):
        raise ConfigError("top level must be a mapping", 1, source)
    lines = _line_map(node) if node is not None else {}
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r}; expected {SCHEMA_VERSION}", lines.get(("schema_version",)), source)
    cfg = _merge(doc, DEFAULTS, lines, (), source)
    try:
        train_config(cfg)
        model_config(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc), _guess_line(str(exc), lines), source) from None
    return cfg


def _guess_line(message: str, lines: dict) -> int | None:
    for path, line in lines.items():
        if len(path) == 2 and (path[1] in message or f"{path[0]}.{path[1]}" in message):
            return line
    return None


def load_config(path) -> dict:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=False, default_flow_style=False)


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg["train"], **cfg["aux"], seed=cfg["seed"], dataset=cfg["dataset"]["name"])


def model_config(cfg: dict) -> DenoiserConfig:
    return DenoiserConfig.for_dataset(cfg["dataset"]["name"], **cfg["model"])


def with_overrides(cfg: dict, overrides: dict) -> dict:
    """Apply dotted-key overrides such as ``{"aux.lam": 0.25, "seed": 3}``, re-validated."""
    doc = deepcopy(cfg)
    for dotted, value in overrides.items():
        *head, last = dotted.split(".")
        node = doc
        for k in head:
            node = node.setdefault(k, {})
        node[last] = value
    return parse_config(dump_config(doc), "<overrides>")


# ---------------------------------------------------------------------------
# teacher


def teacher_key(cfg: dict) -> str:
    blob = json.dumps({"seed": cfg["seed"], "dataset": cfg["dataset"], "model": cfg["model"], "teacher": {
        k: v for k, v in cfg["teacher"].items() if k != "cache_dir"}}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def obtain_teacher(cfg: dict):
    """Pretrain the full-precision teacher, reusing a cached checkpoint when one exists."""
    mcfg = model_config(cfg)
    cache = cfg["teacher"]["cache_dir"]
    path = Path(cache) / f"teacher_{teacher_key(cfg)}.qvgn" if cache else None
    if path is not None and path.exists():
        return restore_model(checkpoint.load(path), mcfg)
    t = cfg["teacher"]
    teacher = pretrain_teacher(
        mcfg, cfg["dataset"]["name"], NoiseSchedule.cosine(mcfg.noise_steps), cfg["seed"],
        steps=t["steps"], batch=t["batch"], lr=t["lr"],
    )
    if path is not None:
        save_model(path, teacher)
    return teacher


# ---------------------------------------------------------------------------
# run


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, default=_json_default, allow_nan=True) + "\n")


def run_experiment(cfg: dict, out_dir=None, teacher=None) -> dict:
    """Teacher, QAT run and artifacts in ``out_dir``; returns the run summary."""
    out = Path(out_dir if out_dir is not None else cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED_NAME).write_text(dump_config(cfg))
    if teacher is None:
        teacher = obtain_teacher(cfg)
    trainer, summary = train(train_config(cfg), teacher, out_dir=out)
    trainer.trace.write_csv(out / "trace.csv")
    write_json(out / "spectra.json", trainer.trace.spectra)
    if summary["status"] == "complete":
        summary["checkpoint"] = "final.qvgn"
        summary["checkpoint_sha256"] = trainer.write_checkpoint(out / "final.qvgn")
        summary["aux_bytes"] = checkpoint.aux_payload_bytes((out / "final.qvgn").read_bytes())
    # wall time varies between invocations, so it lives outside the summary
    write_json(out / "timing.json", {"wall_time_s": summary.pop("wall_time_s")})
    write_json(out / "summary.json", summary)
    return summary


# ---------------------------------------------------------------------------
# ablation


def grid_cells(grid: dict) -> list[dict]:
    if not grid or any(not isinstance(v, list) or not v for v in grid.values()):
        raise ConfigError("ablation grid needs at least one axis with at least one value")
    axes = list(grid)
    return [dict(zip(axes, combo)) for combo in itertools.product(*(grid[a] for a in axes))]


def cell_name(cell: dict) -> str:
    return "__".join(f"{k.split('.')[-1]}={v}" for k, v in cell.items())


def _run_cell(args):
    cfg, cell_dir = args
    summary = run_experiment(cfg, cell_dir)
    timing = json.loads((Path(cell_dir) / "timing.json").read_text())
    return summary, timing["wall_time_s"]


def ablate(base: dict, grid: dict, out_dir, parallel: int = 1) -> list[dict]:
    """One seeded run per grid cell; writes ``ablation.csv`` and ``ablation.txt``."""
    out = Path(out_dir)
    cells = grid_cells(grid)
    if base["teacher"]["cache_dir"] is None:
        base = with_overrides(base, {"teacher.cache_dir": str(out / "teachers")})
    jobs = []
    for cell in cells:
        cfg = with_overrides(base, cell)
        jobs.append((cfg, out / cell_name(cell)))
    # teachers are shared between cells with the same seed; build them before fanning out
    for cfg in {teacher_key(c): c for c, _ in jobs}.values():
        obtain_teacher(cfg)
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]
    rows = []
    for cell, (summary, wall) in zip(cells, results):
        rows.append({**cell, "status": summary["status"], "final_kd": summary["final_kd"],
                     "mean_grad_norm": summary["mean_grad_norm"], "wall_time_s": wall})
    write_table(rows, out / "ablation.csv", out / "ablation.txt")
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6g}"
    return "-" if v is None else str(v)


def write_table(rows: list[dict], csv_path, txt_path) -> None:
    cols = list(rows[0])
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, cols, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    cells = [[_fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    Path(txt_path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# plot data


def downsample(n: int, points: int) -> np.ndarray:
    """Indices of at most ``points`` evenly spread rows, always keeping the last."""
    if n <= points:
        return np.arange(n)
    idx = np.unique(np.round(np.linspace(0, n - 1, points)).astype(int))
    return idx


def plot_series(run_dir, points: int = 200) -> dict:
    run_dir = Path(run_dir)
    trace = run_dir / "trace.csv"
    if not trace.exists():
        raise FileNotFoundError(f"no trace.csv in {run_dir}")
    rows = read_trace_csv(trace)
    idx = downsample(len(rows), points)
    spectra = []
    if (run_dir / "spectra.json").exists():
        for snap in json.loads((run_dir / "spectra.json").read_text()):
            spectra.append({"step": snap["step"], **{g: v["fraction_small"] for g, v in snap["groups"].items()}})
    return {
        "step": [rows[i]["step"] for i in idx],
        "grad_norm": [rows[i]["grad_norm"] for i in idx],
        "loss": [rows[i]["loss"] for i in idx],
        "spectra": spectra,
    }


def merge_series(named: dict[str, dict]) -> dict:
    """Join several runs' series on the step index (steps present in every run)."""
    common = sorted(set.intersection(*(set(s["step"]) for s in named.values())))
    out = {"step": common}
    for name, s in named.items():
        pos = {st: i for i, st in enumerate(s["step"])}
        out[name] = {k: [s[k][pos[st]] for st in common] for k in ("grad_norm", "loss")}
        out[name]["spectra"] = s["spectra"]
    return out


def export_plotdata(run_dirs, out_path, points: int = 200) -> dict:
    series = {Path(d).name or str(d): plot_series(d, points) for d in run_dirs}
    data = next(iter(series.values())) if len(series) == 1 else merge_series(series)
    write_json(out_path, data)
    return data
