"""Asymmetric uniform fake quantization with straight-through gradients.

Groups:
    ``tensor``  one (scale, zero) pair for the whole array
    ``channel`` one pair per row of a weight matrix (output channel)
    ``token``   one pair per column of an activation matrix (token)

Weights use static per-channel parameters whose scales may be learned (LSQ);
activations are re-quantized per token on every forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

GRANULARITIES = ("tensor", "channel", "token")
DEGENERATE_SCALE = 1e-8


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (exact for |x| < 2**52)."""
    a = np.abs(x)
    f = np.floor(a)
    return np.copysign(f + (a - f >= 0.5), x)


class NonFiniteInput(ValueError):
    """Raised when quantization parameters are requested for NaN/inf data."""


@dataclass
class QuantSpec:
    bits: int
    granularity: str
    scale: Tensor  # one entry per group
    zero: np.ndarray  # int64, one entry per group
    learnable: bool = False

    def __post_init__(self):
        if self.bits < 2:
            raise ValueError(f"bits must be >= 2, got {self.bits}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.scale.data.ndim != 1 or self.scale.size != self.zero.size:
            raise ValueError("scale and zero must be 1-D with one entry per group")

    @property
    def qmax(self) -> int:
        return 2**self.bits - 1

    @property
    def groups(self) -> int:
        return self.zero.size

    def copy(self) -> "QuantSpec":
        return QuantSpec(
            self.bits,
            self.granularity,
            Tensor(self.scale.data.copy(), requires_grad=self.learnable),
            self.zero.copy(),
            self.learnable,
        )


def _group_view(values: np.ndarray, granularity: str, shape: tuple[int, ...]) -> np.ndarray:
    """Broadcast a per-group vector against an array of ``shape``."""
    if granularity == "tensor":
        return values.reshape((1,) * len(shape))
    if granularity == "channel":
        return values.reshape((-1,) + (1,) * (len(shape) - 1))
    return values.reshape((1, -1))


def _expected_groups(shape: tuple[int, ...], granularity: str) -> int:
    if granularity == "tensor":
        return 1
    if len(shape) != 2:
        raise ValueError(f"{granularity} granularity needs a matrix, got shape {shape}")
    return shape[0] if granularity == "channel" else shape[1]


def _group_reduce(x: np.ndarray, granularity: str, fn) -> np.ndarray:
    if granularity == "tensor":
        return np.atleast_1d(fn(x))
    return fn(x, axis=1 if granularity == "channel" else 0)


def compute_qparams(X, bits: int, granularity: str, learnable: bool = False) -> QuantSpec:
    """Min/max asymmetric parameters: ``s = (max - min) / (2^b - 1)``, ``z = -round(min / s)``.

    ``min`` and ``max`` are taken over the group together with 0. An all-zero
    group is degenerate and gets ``s = 1e-8``, ``z = 0``.
    """
    x = X.data if isinstance(X, Tensor) else np.asarray(X, dtype=np.float64)
    if granularity not in GRANULARITIES:
        raise ValueError(f"unknown granularity {granularity!r}")
    if x.size == 0:
        raise ValueError("compute_qparams: input must be non-empty")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("compute_qparams: input must be finite")
    _expected_groups(x.shape, granularity)
    qmax = 2**bits - 1
    # the grid always spans zero, so z lands in [0, 2^b - 1] and one-signed groups stay on it
    lo = np.minimum(_group_reduce(x, granularity, np.min), 0.0)
    hi = np.maximum(_group_reduce(x, granularity, np.max), 0.0)
    degenerate = hi == lo
    scale = np.where(degenerate, DEGENERATE_SCALE, (hi - lo) / qmax)
    zero = np.where(degenerate, 0.0, -round_half_away(lo / np.where(degenerate, 1.0, scale)))
    zero = np.clip(zero, 0, qmax).astype(np.int64)
    return QuantSpec(bits, granularity, Tensor(scale, requires_grad=learnable), zero, learnable)


def _check_alignment(x: np.ndarray, q: QuantSpec) -> None:
    expected = _expected_groups(x.shape, q.granularity)
    if expected != q.groups:
        raise ValueError(
            f"quant spec has {q.groups} groups but a {q.granularity} split of {x.shape} needs {expected}"
        )


def _unclamped_codes(x: np.ndarray, q: QuantSpec) -> np.ndarray:
    s = _group_view(q.scale.data, q.granularity, x.shape)
    z = _group_view(q.zero.astype(np.float64), q.granularity, x.shape)
    return round_half_away(x / s) + z


def quantize_codes(X, q: QuantSpec) -> np.ndarray:
    """Integer codes ``clamp(round(X / s) + z, 0, 2^b - 1)`` as int64."""
    x = X.data if isinstance(X, Tensor) else np.asarray(X, dtype=np.float64)
    _check_alignment(x, q)
    return np.clip(_unclamped_codes(x, q), 0, q.qmax).astype(np.int64)


def code_offsets(X, q: QuantSpec) -> np.ndarray:
    """``codes - z`` as float64; the integer factor of the dequantized value."""
    x = X.data if isinstance(X, Tensor) else np.asarray(X, dtype=np.float64)
    codes = quantize_codes(x, q)
    return (codes - _group_view(q.zero, q.granularity, x.shape)).astype(np.float64)


def ste_mask(X, q: QuantSpec) -> np.ndarray:
    x = X.data if isinstance(X, Tensor) else np.asarray(X, dtype=np.float64)
    _check_alignment(x, q)
    c = _unclamped_codes(x, q)
    return ((c >= 0) & (c <= q.qmax)).astype(np.float64)


def lsq_grad_scale(q: QuantSpec, shape: tuple[int, ...]) -> float:
    per_group = int(np.prod(shape)) // q.groups
    return 1.0 / np.sqrt(per_group * q.qmax)


def lsq_scale_grad(X, q: QuantSpec, upstream: np.ndarray, scaled: bool = True) -> np.ndarray:
    """Gradient of ``sum(upstream * fake_quantize(X, q))`` with respect to each group scale.

    In range the rounding is passed straight through, giving ``round(x/s) - x/s``;
    clamped elements contribute ``code - z``. With ``scaled`` the result is
    multiplied by ``1 / sqrt(N * (2^b - 1))``.
    """
    if not q.learnable:
        raise ValueError("lsq_scale_grad called on a spec whose scale is not learnable")
    x = X.data if isinstance(X, Tensor) else np.asarray(X, dtype=np.float64)
    _check_alignment(x, q)
    s = _group_view(q.scale.data, q.granularity, x.shape)
    z = _group_view(q.zero.astype(np.float64), q.granularity, x.shape)
    v = x / s
    c = round_half_away(v) + z
    inside = (c >= 0) & (c <= q.qmax)
    local = np.where(inside, c - z - v, np.clip(c, 0, q.qmax) - z)
    ds = _group_reduce(upstream * local, q.granularity, np.sum)
    if scaled:
        ds = ds * lsq_grad_scale(q, x.shape)
    return ds


def _fake_quantize(X: Tensor, q: QuantSpec) -> tuple[Tensor, np.ndarray]:
    x = X.data
    _check_alignment(x, q)
    s = _group_view(q.scale.data, q.granularity, x.shape)
    z = _group_view(q.zero.astype(np.float64), q.granularity, x.shape)
    raw = _unclamped_codes(x, q)
    mask = (raw >= 0) & (raw <= q.qmax)
    offsets = np.clip(raw, 0, q.qmax) - z
    out = offsets * s

    def backward(g):
        gx = g * mask
        gs = lsq_scale_grad(x, q, g) if q.learnable else None
        return gx, gs

    return T.custom(out, (X, q.scale), backward), offsets


def fake_quantize(X, q: QuantSpec) -> Tensor:
    """``(clamp(round(X/s) + z, 0, 2^b - 1) - z) * s`` with STE / LSQ backward."""
    return _fake_quantize(T.as_tensor(X), q)[0]


def fake_quantize_with_offsets(X: Tensor, q: QuantSpec) -> tuple[Tensor, np.ndarray]:
    """As :func:`fake_quantize`, also returning the integer offsets ``codes - z``."""
    return _fake_quantize(X, q)


def row_scales(q: QuantSpec, rows: int) -> np.ndarray:
    return np.full(rows, q.scale.data[0]) if q.granularity == "tensor" else q.scale.data


def col_scales(q: QuantSpec, cols: int) -> np.ndarray:
    return np.full(cols, q.scale.data[0]) if q.granularity == "tensor" else q.scale.data
