"""Error-compensating auxiliary branch and its rank-decay schedule.

A quantized layer computes ``Q(W) Q(X) + (gamma * L) R Q(X)``. ``L R`` starts
as the best rank-``r0`` approximation of the weight quantization error. Each
decay phase anneals the mask ``gamma`` on the weakest ``lam * r`` columns
from 1 to 0 and then drops those columns, until nothing is left.

Two alternative decay strategies (magnitude sparsification and residual
4-bit decomposition) share the :class:`DecayBaselineState` container.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .linalg import svd, svd_of_product
from .quantizer import QuantSpec, compute_qparams, fake_quantize, round_half_away
from .rng import Rng
from .tensor import Tensor

ANNEAL_TAGS = ("cosine", "linear", "logarithmic", "exponential", "square")
ORDERINGS = ("trailing", "leading", "random")
_EXP_RATE = 5.0


def anneal_u(step: int, steps: int, tag: str = "cosine") -> float:
    """Annealing factor going from 1 at ``step == 0`` to 0 at ``step == steps``."""
    if steps <= 0:
        raise ValueError("steps-per-phase must be positive")
    if not 0 <= step <= steps:
        raise ValueError(f"step {step} outside [0, {steps}]")
    x = step / steps
    if tag == "cosine":
        u = 0.5 * (1.0 + math.cos(math.pi * x))
    elif tag == "linear":
        u = 1.0 - x
    elif tag == "square":
        u = (1.0 - x) ** 2
    elif tag == "logarithmic":
        u = 1.0 - math.log1p((math.e - 1.0) * x)
    elif tag == "exponential":
        u = (math.exp(-_EXP_RATE * x) - math.exp(-_EXP_RATE)) / (1.0 - math.exp(-_EXP_RATE))
    else:
        raise ValueError(f"unknown annealing tag {tag!r}")
    if step == steps:
        return 0.0
    return min(1.0, max(0.0, u))


def kept_rank(r: int, lam: float) -> int:
    """Columns still held at 1 during a phase; 0 once ``r < 1/lam`` (final phase)."""
    if r <= 0 or r * lam < 1.0:
        return 0
    return min(r, math.ceil((1.0 - lam) * r - 1e-9))


def rank_sequence(r0: int, lam: float) -> list[int]:
    """Ranks visited by the schedule, e.g. 32, 16, 8, 4, 2, 1, 0 for lam = 1/2."""
    if not 0.0 < lam <= 1.0:
        raise ValueError(f"shrink ratio must lie in (0, 1], got {lam}")
    seq = [r0]
    while seq[-1] > 0:
        seq.append(kept_rank(seq[-1], lam))
    return seq


def kept_columns(r: int, lam: float, ordering: str = "trailing", rng: Rng | None = None) -> np.ndarray:
    k = kept_rank(r, lam)
    if ordering == "trailing":
        return np.arange(k)
    if ordering == "leading":
        return np.arange(r - k, r)
    if ordering == "random":
        if rng is None:
            raise ValueError("random ordering needs an Rng")
        return np.sort(rng.permutation(r)[:k])
    raise ValueError(f"unknown gamma ordering {ordering!r}")


def gamma(n: int, r: int, lam: float, u: float, keep: np.ndarray | None = None) -> np.ndarray:
    """n x r mask: kept columns are 1, the rest equal ``u``."""
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"u must lie in [0, 1], got {u}")
    if keep is None:
        keep = kept_columns(r, lam)
    mask = np.full((n, r), float(u))
    mask[:, keep] = 1.0
    return mask


@dataclass
class AuxState:
    L: Tensor
    R: Tensor
    r0: int
    lam: float = 0.5
    u: float = 1.0
    phase: int = 0
    steps_per_phase: int = 0
    anneal: str = "cosine"
    ordering: str = "trailing"
    keep: np.ndarray | None = None

    def __post_init__(self):
        if self.L.shape[1] != self.R.shape[0]:
            raise ValueError(f"L {self.L.shape} and R {self.R.shape} disagree on rank")
        if self.keep is None:
            self.keep = kept_columns(self.rank, self.lam) if self.ordering != "random" else np.arange(0)

    @property
    def rank(self) -> int:
        return self.L.shape[1]

    @property
    def out_features(self) -> int:
        return self.L.shape[0]

    @property
    def in_features(self) -> int:
        return self.R.shape[1]

    @property
    def present(self) -> bool:
        return self.rank > 0

    def mask(self) -> np.ndarray:
        return gamma(self.out_features, self.rank, self.lam, self.u, self.keep)

    def parameters(self) -> dict[str, Tensor]:
        return {"L": self.L, "R": self.R} if self.present else {}

    def product(self) -> np.ndarray:
        return self.L.data @ self.R.data

    def forward(self, Qx: Tensor) -> Tensor:
        return forward_aux(Qx, self)


def init_phi(W, q: QuantSpec, r0: int, lam: float = 0.5, **kwargs) -> AuxState:
    """Factor the weight quantization error ``W - Q(W)`` into its top-``r0`` SVD pair."""
    w = W.data if isinstance(W, Tensor) else np.asarray(W, dtype=np.float64)
    n, m = w.shape
    if not 0 <= r0 <= min(n, m):
        raise ValueError(f"initial rank {r0} exceeds min({n}, {m})")
    err = w - fake_quantize(Tensor(w), q).data
    if r0 == 0:
        return AuxState(Tensor(np.zeros((n, 0)), True), Tensor(np.zeros((0, m)), True), 0, lam, **kwargs)
    dec = svd(err)
    root = np.sqrt(dec.singulars[:r0])
    L = dec.left[:, :r0] * root
    R = root[:, None] * dec.right[:r0]
    return AuxState(Tensor(L, requires_grad=True), Tensor(R, requires_grad=True), r0, lam, **kwargs)


def forward_aux(Qx: Tensor, state: AuxState) -> Tensor:
    """``(gamma * L) @ (R @ Qx)``; an exact zero block once the rank reaches 0."""
    if Qx.data.ndim != 2 or Qx.shape[0] != state.in_features:
        raise T.ShapeError(f"aux branch expects ({state.in_features}, k) input, got {Qx.shape}")
    if state.rank == 0:
        return Tensor(np.zeros((state.out_features, Qx.shape[1])))
    masked = T.mul(state.L, Tensor(state.mask()))
    return T.matmul(masked, T.matmul(state.R, Qx))


def truncate(state: AuxState) -> AuxState:
    """Drop the annealed columns once ``u`` has reached 0."""
    if state.u != 0.0:
        raise ValueError(f"truncate called mid-phase (u = {state.u})")
    keep = state.keep
    L = Tensor(state.L.data[:, keep], requires_grad=True)
    R = Tensor(state.R.data[keep, :], requires_grad=True)
    return replace(state, L=L, R=R, u=1.0, phase=state.phase + 1, keep=None)


def refactorize(state: AuxState) -> AuxState:
    """Re-split ``L R`` through its SVD so columns are ordered by singular value again."""
    r = state.rank
    if r == 0:
        return state
    dec = svd_of_product(state.L.data, state.R.data)
    root = np.sqrt(dec.singulars[:r])
    L = Tensor(dec.left[:, :r] * root, requires_grad=True)
    R = Tensor(root[:, None] * dec.right[:r], requires_grad=True)
    return replace(state, L=L, R=R, keep=state.keep)


def begin_phase(state: AuxState, rng: Rng | None = None) -> AuxState:
    """Reset ``u`` to 1 and choose which columns survive this phase."""
    keep = kept_columns(state.rank, state.lam, state.ordering, rng)
    return replace(state, u=1.0, keep=keep)


def aux_singulars(state) -> np.ndarray:
    """Singular values of the live auxiliary weight (empty when eliminated)."""
    if state is None or not state.present:
        return np.zeros(0)
    if isinstance(state, AuxState):
        return svd_of_product(state.L.data, state.R.data).singulars
    return svd(state.effective_weight()).singulars


# ---------------------------------------------------------------------------
# baseline decay strategies

SPARSE_RATIOS = (0.5, 0.75, 0.875, 0.9375, 0.96875, 1.0)
RESQ_TERMS = 4


@dataclass
class DecayBaselineState:
    strategy: str
    # sparse
    W: Tensor | None = None
    mask: np.ndarray | None = None
    ratio: float = 0.0
    increment: float = 0.5
    # residual-quant: terms ordered [Q4(W_phi), Q4(E1), Q4(E2), Q4(E3)], trailing one decays first
    terms: list[Tensor] = field(default_factory=list)
    specs: list[QuantSpec] = field(default_factory=list)
    coeff: float = 1.0
    phase: int = 0

    @property
    def present(self) -> bool:
        if self.strategy == "sparse":
            return self.W is not None and self.ratio < 1.0
        return bool(self.terms)

    @property
    def out_features(self) -> int:
        if self.strategy == "sparse":
            return self.W.shape[0]
        return self.terms[0].shape[0]

    def parameters(self) -> dict[str, Tensor]:
        if not self.present:
            return {}
        if self.strategy == "sparse":
            return {"W": self.W}
        return {f"term{i}": t for i, t in enumerate(self.terms)}

    def effective_weight(self) -> np.ndarray:
        if self.strategy == "sparse":
            return self.W.data * self.mask
        total = np.zeros_like(self.terms[0].data)
        for i, (t, q) in enumerate(zip(self.terms, self.specs)):
            c = self.coeff if i == len(self.terms) - 1 else 1.0
            total = total + c * fake_quantize(t.data, q).data
        return total

    def weight_tensor(self) -> Tensor:
        if self.strategy == "sparse":
            return T.mul(self.W, Tensor(self.mask))
        total = None
        for i, (t, q) in enumerate(zip(self.terms, self.specs)):
            part = fake_quantize(t, q)
            if i == len(self.terms) - 1 and self.coeff != 1.0:
                part = T.mul(part, self.coeff)
            total = part if total is None else T.add(total, part)
        return total

    def forward(self, Qx: Tensor) -> Tensor:
        if not self.present:
            return Tensor(np.zeros((self.out_features, Qx.shape[1])))
        return T.matmul(self.weight_tensor(), Qx)

    def enforce_mask(self) -> None:
        """Keep frozen entries at exactly zero after an optimizer update."""
        if self.strategy == "sparse" and self.W is not None:
            self.W.data *= self.mask


def sparse_decay_init(W_phi) -> DecayBaselineState:
    w = W_phi.data if isinstance(W_phi, Tensor) else np.asarray(W_phi, dtype=np.float64)
    return DecayBaselineState("sparse", W=Tensor(w.copy(), requires_grad=True), mask=np.ones_like(w))


def sparse_decay_step(state: DecayBaselineState, phase: int) -> DecayBaselineState:
    """Enter ``phase`` (1-based): zero and freeze the smallest live entries up to the phase's ratio."""
    if state.strategy != "sparse":
        raise ValueError(f"sparse_decay_step on a {state.strategy!r} state")
    if not 1 <= phase <= len(SPARSE_RATIOS):
        raise ValueError(f"sparse phase must be in 1..{len(SPARSE_RATIOS)}, got {phase}")
    target = SPARSE_RATIOS[phase - 1]
    total = state.mask.size
    frozen_now = int(total - state.mask.sum())
    frozen_goal = int(round_half_away(np.array(target * total)))
    extra = max(0, frozen_goal - frozen_now)
    mask = state.mask.copy().reshape(-1)
    if extra:
        mags = np.abs(state.W.data).reshape(-1)
        live = np.flatnonzero(mask)
        order = live[np.argsort(mags[live], kind="stable")]
        mask[order[:extra]] = 0.0
    mask = mask.reshape(state.mask.shape)
    W = state.W
    W.data *= mask
    return replace(
        state, W=W, mask=mask, ratio=target, increment=state.increment / 2 if phase > 1 else 0.5, phase=phase
    )


def resq_decay_init(W_phi, bits: int = 4) -> DecayBaselineState:
    """Split ``W_phi`` into four 4-bit per-channel quantized residual levels."""
    w = W_phi.data if isinstance(W_phi, Tensor) else np.asarray(W_phi, dtype=np.float64)
    terms, specs = [], []
    residual = w
    for _ in range(RESQ_TERMS):
        q = compute_qparams(residual, bits, "channel")
        level = fake_quantize(residual, q).data
        terms.append(Tensor(level, requires_grad=True))
        specs.append(q)
        residual = residual - level
    return DecayBaselineState("residual-quant", terms=terms, specs=specs)


def resq_set_coeff(state: DecayBaselineState, coeff: float) -> None:
    if state.strategy != "residual-quant":
        raise ValueError(f"residual-quant op on a {state.strategy!r} state")
    state.coeff = float(coeff)


def resq_drop_term(state: DecayBaselineState) -> DecayBaselineState:
    if state.strategy != "residual-quant":
        raise ValueError(f"residual-quant op on a {state.strategy!r} state")
    if state.coeff != 0.0:
        raise ValueError("a residual term can only be dropped once its factor reaches 0")
    return replace(state, terms=state.terms[:-1], specs=state.specs[:-1], coeff=1.0, phase=state.phase + 1)


def aux_forward(Qx: Tensor, aux) -> Tensor | None:
    """Dispatch for whichever auxiliary container a layer carries (``None`` when absent)."""
    if aux is None or not aux.present:
        return None
    return aux.forward(Qx)
