"""Command line entry point: ``qatlab run | ablate | export-plotdata | verify``."""

from __future__ import annotations

import argparse
import math
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import experiment as ex
from .intexec import int_linear, pack
from .quantizer import compute_qparams
from .tensor import Tensor
from .toydiff.layers import quantized_linear_forward
from .trainer import regret_bound_check, run_convex_sgd


def _resolve(args) -> dict:
    cfg = ex.load_config(args.config) if args.config else ex.parse_config("")
    if args.seed_override is not None:
        cfg = ex.with_overrides(cfg, {"seed": args.seed_override})
    return cfg


def cmd_run(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out or cfg["output_dir"])
    summary = ex.run_experiment(cfg, out)
    print(f"{summary['status']}: final KD {summary['final_kd']}, mean grad norm {summary['mean_grad_norm']:.6g} -> {out}")
    if summary.get("rank_log"):
        print("rank log: " + " -> ".join(map(str, summary["rank_log"])))
    if summary["status"] != "complete":
        print(f"aborted: {summary['abort']}", file=sys.stderr)
        return 3
    return 0


def _load_grid(path):
    """Grid file: ``base`` (inline config mapping or path) plus ``grid`` of dotted keys to value lists."""
    path = Path(path)
    doc = yaml.safe_load(path.read_text()) or {}
    unknown = set(doc) - {"base", "grid"}
    if unknown:
        raise ex.ConfigError(f"unknown grid keys {sorted(unknown)}", None, str(path))
    base = doc.get("base") or {}
    if isinstance(base, str):
        base = ex.load_config(path.parent / base)
    else:
        base = ex.parse_config(yaml.safe_dump(base), str(path))
    return base, doc.get("grid") or {}


def cmd_ablate(args) -> int:
    if not args.config:
        raise ex.ConfigError("ablate needs --config pointing at a grid file")
    base, grid = _load_grid(args.config)
    if args.seed_override is not None:
        base = ex.with_overrides(base, {"seed": args.seed_override})
    out = Path(args.out or base["output_dir"])
    rows = ex.ablate(base, grid, out, parallel=args.parallel)
    print((out / "ablation.txt").read_text(), end="")
    return 0 if all(r["status"] == "complete" for r in rows) else 3


def cmd_export(args) -> int:
    out = Path(args.out or Path(args.run_dirs[0]) / "plotdata.json")
    data = ex.export_plotdata(args.run_dirs, out, points=args.points)
    print(f"wrote {len(data['step'])} points to {out}")
    return 0


def verify_intexec(seeds: int = 100) -> tuple[bool, float]:
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        W, X = rng.normal(size=(64, 64)), rng.normal(size=(64, 16))
        q = compute_qparams(W, 4, "channel")
        ref = quantized_linear_forward(Tensor(X), Tensor(W), q, 4).data
        worst = max(worst, float(np.max(np.abs(int_linear(pack(W, q), X) - ref))))
    return worst == 0.0, worst


def verify_regret(seeds: int = 50) -> tuple[int, float]:
    held, slack = 0, math.inf
    for seed in range(seeds):
        rep = regret_bound_check(run_convex_sgd(seed), strict=False)
        held += rep["holds"]
        slack = min(slack, rep["slack"])
    return held, slack


def cmd_verify(args) -> int:
    t = time.perf_counter()
    ok_int, worst = verify_intexec()
    print(f"{'PASS' if ok_int else 'FAIL'} integer path vs fake-quant path, 100 layers 64x64x16: max |diff| = {worst:g}")
    held, slack = verify_regret()
    ok_reg = held == 50
    print(f"{'PASS' if ok_reg else 'FAIL'} average regret <= bound on {held}/50 convex runs (smallest slack {slack:.4g})")
    print(f"verify finished in {time.perf_counter() - t:.1f}s")
    return 0 if ok_int and ok_reg else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qatlab", description="Quantization-aware training lab on a toy diffusion model.")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, config_help):
        sp.add_argument("--config", help=config_help)
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("--seed-override", type=int, help="replace the config seed")

    r = sub.add_parser("run", help="train one configuration")
    common(r, "YAML experiment config (defaults when omitted)")
    r.set_defaults(fn=cmd_run)
    a = sub.add_parser("ablate", help="run a grid of configurations")
    common(a, "YAML grid file with 'base' and 'grid'")
    a.add_argument("--parallel", type=int, default=1, help="cells run concurrently")
    a.set_defaults(fn=cmd_ablate)
    e = sub.add_parser("export-plotdata", help="down-sampled series from run directories")
    e.add_argument("run_dirs", nargs="+")
    e.add_argument("--out", help="output JSON path")
    e.add_argument("--points", type=int, default=200)
    e.set_defaults(fn=cmd_export)
    v = sub.add_parser("verify", help="integer-path equivalence and regret-bound checks")
    v.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ex.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
