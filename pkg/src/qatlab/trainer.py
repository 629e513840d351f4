"""Quantization-aware distillation loop with auxiliary-branch decay and diagnostics.

A run clones the frozen teacher into a student, fake-quantizes every block
linear layer, attaches the auxiliary branch chosen by ``strategy`` and trains
on the distillation loss with AdamW. The trace keeps per-step loss, global
gradient norm, learning rate, annealing factor and branch rank, plus periodic
singular spectra of the auxiliary weights and a running estimate of the
largest parameter excursion used by the regret bound.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T
from .auxrank import (
    ANNEAL_TAGS,
    ORDERINGS,
    SPARSE_RATIOS,
    RESQ_TERMS,
    AuxState,
    DecayBaselineState,
    anneal_u,
    aux_singulars,
    begin_phase,
    init_phi,
    rank_sequence,
    refactorize,
    resq_decay_init,
    resq_drop_term,
    resq_set_coeff,
    sparse_decay_init,
    sparse_decay_step,
    truncate,
)
from .optim import SGD, AdamW
from .quantizer import NonFiniteInput
from .rng import Rng
from .tensor import Tensor
from .toydiff.data import DATASETS, make_batch
from .toydiff.layers import quantized_linear_forward
from .toydiff.model import Denoiser, DenoiserConfig
from .toydiff.objectives import kd_loss
from .toydiff.schedule import NoiseSchedule

STRATEGIES = ("rank", "sparse", "residual-quant", "none")
SMALL_SINGULAR_RATIO = 14.0
TRACE_COLUMNS = ("step", "loss", "grad_norm", "lr", "u", "rank")


@dataclass
class TrainConfig:
    steps: int = 2000
    warmup: float = 0.1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    batch: int = 64
    r0: int = 32
    lam: float = 0.5
    anneal: str = "cosine"
    ordering: str = "trailing"
    refactorize: bool = True
    strategy: str = "rank"
    seed: int = 0
    weight_bits: int = 4
    act_bits: int = 4
    learn_scale: bool = True
    dataset: str = "two_moons"
    eval_batches: int = 4
    eval_batch: int = 256
    spectra_every: int = 500
    snapshot_every: int = 50
    checkpoint_every: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.warmup < 1.0:
            raise ValueError(f"warmup fraction must lie in [0, 1), got {self.warmup}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown decay strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.anneal not in ANNEAL_TAGS:
            raise ValueError(f"unknown annealing tag {self.anneal!r}; expected one of {ANNEAL_TAGS}")
        if self.ordering not in ORDERINGS:
            raise ValueError(f"unknown gamma ordering {self.ordering!r}; expected one of {ORDERINGS}")
        if self.dataset not in DATASETS:
            raise ValueError(f"unknown dataset {self.dataset!r}")
        if not 0.0 < self.lam <= 1.0:
            raise ValueError(f"shrink ratio must lie in (0, 1], got {self.lam}")
        if self.r0 < 0 or self.batch < 1 or self.steps < 1:
            raise ValueError("r0 must be >= 0; batch and steps must be positive")
        for b in (self.weight_bits, self.act_bits):
            if not 2 <= b <= 16:
                raise ValueError(f"bit-widths must lie in [2, 16], got {b}")
        if self.steps < phase_count(self):
            raise ValueError(f"{self.steps} steps cannot hold {phase_count(self)} decay phases")


def phase_count(cfg: TrainConfig) -> int:
    if cfg.r0 == 0 or cfg.strategy == "none":
        return 0
    if cfg.strategy == "rank":
        return len(rank_sequence(cfg.r0, cfg.lam)) - 1
    if cfg.strategy == "sparse":
        return len(SPARSE_RATIOS)
    return RESQ_TERMS


def lr_at(t: int, cfg: TrainConfig) -> float:
    """Linear warm-up from 0 to ``cfg.lr`` over ``floor(warmup * T)`` steps, then cosine to 0 at T."""
    if not 0 <= t < cfg.steps:
        raise ValueError(f"step {t} outside [0, {cfg.steps})")
    warm = int(math.floor(cfg.warmup * cfg.steps))
    if t < warm:
        return cfg.lr * t / warm
    span = cfg.steps - warm
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (t - warm) / span))


# ---------------------------------------------------------------------------
# trace


@dataclass
class RunTrace:
    records: list[dict] = field(default_factory=list)
    spectra: list[dict] = field(default_factory=list)
    phase_log: list[dict] = field(default_factory=list)
    d_inf: list[tuple[int, float]] = field(default_factory=list)
    bound_gradient_term: float = 0.0  # running sum of lr_t / 2 * ||g_t||^2
    abort: dict | None = None

    def append(self, rec: dict) -> None:
        if self.records and rec["step"] <= self.records[-1]["step"]:
            raise ValueError("trace records must be strictly ordered by step")
        self.records.append(rec)
        self.bound_gradient_term += 0.5 * rec["lr"] * rec["grad_norm"] ** 2

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=np.float64)

    def mean_grad_norm(self, start: int = 100) -> float:
        g = [r["grad_norm"] for r in self.records if r["step"] >= start]
        return float(np.mean(g)) if g else float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for r in self.records:
                w.writerow([r["step"]] + [repr(float(r[k])) for k in TRACE_COLUMNS[1:-1]] + [r["rank"]])


def read_trace_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        {"step": int(r["step"]), "rank": int(r["rank"]), **{k: float(r[k]) for k in TRACE_COLUMNS[1:-1]}} for r in rows
    ]


class NonFiniteLoss(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# diagnostics


def singular_spectrum_trace(model: Denoiser, groups: tuple[str, ...] = ("attention", "mlp")) -> dict:
    """Average auxiliary singular spectrum per layer group and its share of values below sigma_1 / 14."""
    per_group: dict[str, list[np.ndarray]] = {g: [] for g in groups}
    skipped = []
    for name, group, layer in model.quant_layers():
        if group not in per_group:
            continue
        sv = aux_singulars(layer.aux)
        if sv.size == 0:
            skipped.append(name)
            continue
        per_group[group].append(sv)
    out = {"groups": {}, "skipped": skipped}
    for g, spectra in per_group.items():
        if not spectra:
            out["groups"][g] = {"spectrum": [], "fraction_small": None, "layers": 0}
            continue
        width = max(s.size for s in spectra)
        padded = np.zeros((len(spectra), width))
        for i, s in enumerate(spectra):
            padded[i, : s.size] = s
        avg = padded.mean(axis=0)
        frac = float(np.mean(avg < avg[0] / SMALL_SINGULAR_RATIO)) if avg[0] > 0 else 0.0
        out["groups"][g] = {"spectrum": avg.tolist(), "fraction_small": frac, "layers": len(spectra)}
    return out


def _flat_fixed(model: Denoiser) -> np.ndarray:
    """Concatenation of every parameter whose shape never changes during a run."""
    return np.concatenate([p.data.ravel() for name, p in model.named_parameters() if ".aux." not in name])


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


# ---------------------------------------------------------------------------
# model plumbing


def model_entries(model: Denoiser) -> dict:
    """Checkpoint entries: plain tensors, weight quantizer specs, auxiliary states."""
    entries = {}
    for name, p in model.named_parameters():
        if ".aux." in name or name.endswith(".scale"):
            continue
        entries[name] = p.data
    for name, _, layer in model.quant_layers():
        if layer.w_spec is not None:
            entries[f"{name}.wq"] = layer.w_spec
            entries[f"{name}.aux"] = layer.aux
    return entries


def restore_model(entries: dict, cfg: DenoiserConfig, act_bits: int = 4, trainable: bool = False) -> Denoiser:
    model = Denoiser(cfg, Rng(0))
    for name, p in model.named_parameters():
        p.data = np.array(entries[name], dtype=np.float64)
    for name, _, layer in model.quant_layers():
        if f"{name}.wq" in entries:
            layer.w_spec = entries[f"{name}.wq"]
            layer.act_bits = act_bits
            layer.aux = entries.get(f"{name}.aux")
    return model if trainable else model.freeze()


def save_model(path, model: Denoiser) -> str:
    return checkpoint.save(path, model_entries(model))


# ---------------------------------------------------------------------------
# the loop


class Trainer:
    def __init__(self, cfg: TrainConfig, teacher: Denoiser, schedule: NoiseSchedule | None = None, out_dir=None):
        cfg.validate()
        self.cfg = cfg
        self.teacher = teacher
        self.schedule = schedule or NoiseSchedule.cosine(teacher.cfg.noise_steps)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        root = Rng(cfg.seed)
        self.streams = {k: root.child(k) for k in ("data", "noise", "timesteps")}
        self.gamma_rng = root.child("gamma")
        self.eval_root = root.child("eval")
        self.probe_rng = root.child("probe")
        self.opt = AdamW(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
        self.trace = RunTrace()
        self.phases = phase_count(cfg)
        self.phase_len = cfg.steps // self.phases if self.phases else 0
        self.student = teacher.clone(trainable=True)
        self.layers = list(self.student.quant_layers())
        self.probes = {name: self.probe_rng.child(name).normal((layer.weight.shape[1], 8)) for name, _, layer in self.layers}
        self._snapshots: list[np.ndarray] = []
        self._attach()
        self.t = 0
        self.last_checkpoint: Path | None = None
        self.rank_log = [self.current_rank()] if cfg.strategy == "rank" and cfg.r0 > 0 else []

    # -- setup --------------------------------------------------------------------
    def _attach(self) -> None:
        c = self.cfg
        for name, _, layer in self.layers:
            layer.quantize(c.weight_bits, c.act_bits, c.learn_scale)
            if c.r0 == 0:
                continue
            phi = init_phi(
                layer.weight, layer.w_spec, c.r0, c.lam,
                steps_per_phase=self.phase_len, anneal=c.anneal, ordering=c.ordering,
            )
            if c.strategy in ("rank", "none"):
                layer.aux = begin_phase(phi, self.gamma_rng.child(f"{name}/0")) if c.strategy == "rank" else phi
            elif c.strategy == "sparse":
                layer.aux = sparse_decay_step(sparse_decay_init(phi.product()), 1)
            else:
                layer.aux = resq_decay_init(phi.product())

    def params(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.student.named_parameters() if p.requires_grad}

    def current_rank(self) -> int:
        c = self.cfg
        if c.r0 == 0:
            return 0
        if c.strategy in ("rank", "none"):
            aux = self.layers[0][2].aux
            return aux.rank if aux is not None else 0
        return -1

    def _u_for(self, t: int) -> float:
        p, j = divmod(t, self.phase_len)
        if p >= self.phases:
            return 0.0
        return 0.0 if self.phase_len == 1 else anneal_u(j, self.phase_len - 1, self.cfg.anneal)

    # -- schedule -----------------------------------------------------------------
    def _before_step(self, t: int) -> float:
        c = self.cfg
        if c.strategy == "none" or c.r0 == 0:
            return 1.0
        u = self._u_for(t)
        if t >= self.phases * self.phase_len:
            return 0.0
        for _, _, layer in self.layers:
            aux = layer.aux
            if aux is None or not aux.present:
                continue
            if c.strategy == "rank":
                aux.u = u
            elif c.strategy == "residual-quant":
                resq_set_coeff(aux, u)
        return u if c.strategy != "sparse" else 1.0

    def _after_step(self, t: int) -> None:
        c = self.cfg
        if not self.phases or (t + 1) % self.phase_len or (t + 1) // self.phase_len > self.phases:
            return
        p = (t + 1) // self.phase_len  # phases completed so far
        if c.strategy == "rank":
            self._end_rank_phase(t, p)
        elif c.strategy == "residual-quant":
            for name, _, layer in self.layers:
                dropped = f"{name}.aux.term{len(layer.aux.terms) - 1}"
                layer.aux = resq_drop_term(layer.aux)
                self.opt.reset_state(dropped)
            self.trace.phase_log.append({"phase": p, "step": t, "terms": len(self.layers[0][2].aux.terms)})
        elif c.strategy == "sparse" and p < self.phases:
            for name, _, layer in self.layers:
                layer.aux = sparse_decay_step(layer.aux, p + 1)
            self.trace.phase_log.append({"phase": p, "step": t, "ratio": self.layers[0][2].aux.ratio})

    def _end_rank_phase(self, t: int, p: int) -> None:
        before_rank = self.current_rank()
        worst = 0.0
        for name, _, layer in self.layers:
            X = Tensor(self.probes[name])
            before = quantized_linear_forward(X, layer.weight, layer.w_spec, layer.act_bits, layer.aux).data
            old = layer.aux
            layer.aux = truncate(old)
            after = quantized_linear_forward(X, layer.weight, layer.w_spec, layer.act_bits, layer.aux).data
            worst = max(worst, float(np.max(np.abs(before - after))))
            self.opt.slice_state(f"{name}.aux.L", cols=old.keep)
            self.opt.slice_state(f"{name}.aux.R", rows=old.keep)
            if layer.aux.present and p < self.phases:
                if self.cfg.refactorize:
                    layer.aux = refactorize(layer.aux)
                    self.opt.reset_state(f"{name}.aux.L")
                    self.opt.reset_state(f"{name}.aux.R")
                layer.aux = begin_phase(layer.aux, self.gamma_rng.child(f"{name}/{p}"))
        after_rank = self.current_rank()
        self.rank_log.append(after_rank)
        self.trace.phase_log.append(
            {"phase": p, "step": t, "rank_before": before_rank, "rank_after": after_rank, "max_output_diff": worst}
        )

    # -- diagnostics --------------------------------------------------------------
    def _maybe_snapshot(self, t: int) -> None:
        c = self.cfg
        if c.spectra_every and (t % c.spectra_every == 0 or t == c.steps):
            self.trace.spectra.append({"step": t, **singular_spectrum_trace(self.student)})
        if c.snapshot_every and (t % c.snapshot_every == 0 or t == c.steps):
            flat = _flat_fixed(self.student)
            best = self.trace.d_inf[-1][1] if self.trace.d_inf else 0.0
            for old in self._snapshots:
                best = max(best, float(np.max(np.abs(flat - old))))
            self._snapshots.append(flat)
            self.trace.d_inf.append((t, best))

    def eval_kd(self) -> float:
        """Distillation loss on a fixed set of evaluation batches."""
        c = self.cfg
        streams = {k: self.eval_root.child(k) for k in ("data", "noise", "timesteps")}
        total = 0.0
        for _ in range(c.eval_batches):
            b = make_batch(c.dataset, c.eval_batch, self.teacher.cfg.frames, self.schedule.N, streams)
            total += float(kd_loss(self.student, self.teacher, b, self.schedule).data)
        return total / c.eval_batches

    # -- stepping -----------------------------------------------------------------
    def step(self) -> dict:
        """One optimizer step on a fresh batch; returns the appended trace record."""
        c, t = self.cfg, self.t
        if t >= c.steps:
            raise ValueError("run already finished")
        self._maybe_snapshot(t)
        u = self._before_step(t)
        batch = make_batch(c.dataset, c.batch, self.teacher.cfg.frames, self.schedule.N, self.streams)
        # divergence is detected explicitly below, so numpy's overflow chatter is muted
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                loss = kd_loss(self.student, self.teacher, batch, self.schedule)
            except NonFiniteInput:
                # activations blew up before the loss could be formed
                self.trace.abort = {"step": t, "loss": "nan", "reason": "non-finite activations"}
                raise NonFiniteLoss(f"activations became non-finite at step {t}") from None
            value = float(loss.data)
            if not math.isfinite(value):
                self.trace.abort = {"step": t, "loss": repr(value), "reason": "non-finite loss"}
                raise NonFiniteLoss(f"loss became {value} at step {t}")
            params = self.params()
            T.zero_grads(params.values())
            T.backward(loss)
            gnorm = global_grad_norm(params.values())
            lr = lr_at(t, c)
            self.opt.step(params, lr)
        for _, _, layer in self.layers:
            if isinstance(layer.aux, DecayBaselineState):
                layer.aux.enforce_mask()
        rec = {"step": t, "loss": value, "grad_norm": gnorm, "lr": lr, "u": u, "rank": self.current_rank()}
        self.trace.append(rec)
        self._after_step(t)
        self.t += 1
        if c.checkpoint_every and self.out_dir is not None and self.t % c.checkpoint_every == 0:
            self.write_checkpoint(self.out_dir / "checkpoints" / f"step_{self.t:06d}.qvgn")
        return rec

    def write_checkpoint(self, path) -> str:
        digest = save_model(path, self.student)
        self.last_checkpoint = Path(path)
        return digest

    def run(self) -> RunTrace:
        while self.t < self.cfg.steps:
            self.step()
        self._maybe_snapshot(self.cfg.steps)
        return self.trace


def train(cfg: TrainConfig, teacher: Denoiser, out_dir=None) -> tuple[Trainer, dict]:
    """Run to completion (or abort) and return the trainer and a summary dictionary."""
    start = time.perf_counter()
    tr = Trainer(cfg, teacher, out_dir=out_dir)
    initial = tr.eval_kd()
    status = "complete"
    try:
        tr.run()
    except NonFiniteLoss:
        status = "aborted"
    summary = {
        "status": status,
        "config": asdict(cfg),
        "initial_kd": initial,
        "final_kd": tr.eval_kd() if status == "complete" else None,
        "final_train_loss": tr.trace.records[-1]["loss"] if tr.trace.records else None,
        "mean_grad_norm": tr.trace.mean_grad_norm(min(100, cfg.steps - 1)),
        "phase_log": tr.trace.phase_log,
        "rank_log": tr.rank_log,
        "d_inf_proxy": tr.trace.d_inf[-1][1] if tr.trace.d_inf else 0.0,
        "abort": tr.trace.abort,
        "wall_time_s": time.perf_counter() - start,
    }
    return tr, summary


def grad_norm_comparison(cfg_a: TrainConfig, cfg_b: TrainConfig, teacher: Denoiser) -> dict:
    """Paired runs that may differ only in decay strategy / auxiliary rank."""
    allowed = {"strategy", "r0"}
    for f in fields(TrainConfig):
        if f.name not in allowed and getattr(cfg_a, f.name) != getattr(cfg_b, f.name):
            raise ValueError(f"configs differ on {f.name!r}; only {sorted(allowed)} may vary")
    out = {}
    for key, cfg in (("a", cfg_a), ("b", cfg_b)):
        tr, summary = train(cfg, teacher)
        out[key] = {
            "step": tr.trace.column("step").astype(int).tolist(),
            "grad_norm": tr.trace.column("grad_norm").tolist(),
            "loss": tr.trace.column("loss").tolist(),
            "summary": summary,
            "spectra": tr.trace.spectra,
        }
    return out


# ---------------------------------------------------------------------------
# regret bound on a convex surrogate


@dataclass
class ConvexTrace:
    losses: np.ndarray  # f_t(theta_t)
    optimal_losses: np.ndarray  # f_t(theta_star)
    grad_sq: np.ndarray  # ||g_t||^2
    lrs: np.ndarray
    d_inf: float
    dim: int
    convex: bool = True


def run_convex_sgd(seed: int, steps: int = 200, dim: int = 8, lr=0.1, theta0=None, spread: float = 1.0, start_at_optimum: bool = False) -> ConvexTrace:
    """Plain SGD on ``f_t(theta) = 0.5 * ||theta - c_t||^2`` with random centres ``c_t``.

    ``lr`` is a constant or a callable ``t -> eta_t`` (t starting at 1). The
    fixed comparator is the minimizer of the summed losses, the mean centre.
    """
    rng = Rng(seed).child("convex")
    centres = rng.normal((steps, dim), spread) + rng.normal(dim, 2.0)
    theta_star = centres.mean(axis=0)
    if start_at_optimum:
        theta = theta_star.copy()
    else:
        theta = rng.normal(dim, 3.0) if theta0 is None else np.array(theta0, dtype=np.float64)
    eta = (lambda t: lr) if not callable(lr) else lr
    opt = SGD()
    p = Tensor(theta, requires_grad=True)
    losses, best, gsq, lrs = [], [], [], []
    d_inf = float(np.max(np.abs(p.data - theta_star)))
    snaps = [theta_star.copy()]
    for t in range(1, steps + 1):
        c = Tensor(centres[t - 1])
        loss = T.mul(T.sum(T.square(T.sub(p, c))), 0.5)
        losses.append(float(loss.data))
        best.append(0.5 * float(np.sum((theta_star - centres[t - 1]) ** 2)))
        p.grad = None
        T.backward(loss)
        gsq.append(float(np.sum(p.grad**2)))
        for s in snaps:
            d_inf = max(d_inf, float(np.max(np.abs(p.data - s))))
        snaps.append(p.data.copy())
        lrs.append(eta(t))
        opt.step({"theta": p}, lrs[-1])
    return ConvexTrace(np.array(losses), np.array(best), np.array(gsq), np.array(lrs), d_inf, dim)


def regret_bound_check(trace: ConvexTrace, strict: bool = True) -> dict:
    """Average regret against ``d D^2 / (2 T eta_T) + (1/T) sum eta_t / 2 ||g_t||^2``."""
    if not trace.convex:
        raise ValueError("regret bound is only meaningful for convex per-step losses")
    T_ = trace.losses.size
    empirical = float(np.mean(trace.losses - trace.optimal_losses))
    bound = trace.dim * trace.d_inf**2 / (2.0 * T_ * trace.lrs[-1]) + float(np.sum(0.5 * trace.lrs * trace.grad_sq)) / T_
    report = {"empirical": empirical, "bound": bound, "slack": bound - empirical, "d_inf": trace.d_inf, "holds": bound >= empirical}
    if strict and not report["holds"]:
        raise AssertionError(f"average regret {empirical} exceeds bound {bound}")
    return report
