"""Integer execution of quantized linear layers.

Weights are stored as packed unsigned codes (two 4-bit codes per byte, the
even-index element in the low nibble) plus per-output-channel scale and
zero-shift. :func:`int_linear` accumulates ``(code_w - z_w) * (code_x - z_x)``
in int64 and rescales once per (channel, token), which reproduces the
fake-quantization training path bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quantizer import QuantSpec, compute_qparams, quantize_codes, row_scales
from .tensor import Tensor


@dataclass
class PackedWeights:
    codes: np.ndarray  # uint8 buffer
    scale: np.ndarray  # float64, one per output channel
    zero: np.ndarray  # uint8, one per output channel
    n: int
    m: int
    bits: int

    @property
    def nibble_packed(self) -> bool:
        return self.bits <= 4

    def unpack(self) -> np.ndarray:
        count = self.n * self.m
        flat = unpack_nibbles(self.codes, count) if self.nibble_packed else self.codes[:count].astype(np.int64)
        return flat.reshape(self.n, self.m)

    @property
    def payload_bytes(self) -> int:
        return self.codes.nbytes + self.scale.nbytes + self.zero.nbytes


def pack_nibbles(codes: np.ndarray) -> np.ndarray:
    flat = np.asarray(codes, dtype=np.int64).reshape(-1)
    if flat.size and (flat.min() < 0 or flat.max() > 15):
        raise ValueError("nibble packing needs codes in [0, 15]")
    if flat.size % 2:
        flat = np.concatenate([flat, [0]])
    lo, hi = flat[0::2], flat[1::2]
    return (lo | (hi << 4)).astype(np.uint8)


def unpack_nibbles(buf: np.ndarray, count: int) -> np.ndarray:
    b = np.asarray(buf, dtype=np.uint8).astype(np.int64)
    out = np.empty(b.size * 2, dtype=np.int64)
    out[0::2] = b & 0x0F
    out[1::2] = b >> 4
    return out[:count]


def pack(W, q: QuantSpec) -> PackedWeights:
    w = W.data if isinstance(W, Tensor) else np.asarray(W, dtype=np.float64)
    if q.bits > 8:
        raise ValueError(f"packing supports at most 8-bit codes, got {q.bits}")
    if q.granularity == "token":
        raise ValueError("weights are packed with per-channel or per-tensor parameters")
    n, m = w.shape
    codes = quantize_codes(w, q)
    buf = pack_nibbles(codes) if q.bits <= 4 else codes.reshape(-1).astype(np.uint8)
    zero = q.zero if q.granularity == "channel" else np.full(n, q.zero[0])
    return PackedWeights(buf, row_scales(q, n).copy(), zero.astype(np.uint8), n, m, q.bits)


def dequantize(p: PackedWeights) -> np.ndarray:
    return (p.unpack() - p.zero.astype(np.int64)[:, None]).astype(np.float64) * p.scale[:, None]


def rescale(acc: np.ndarray, s_rows: np.ndarray, s_cols: np.ndarray) -> np.ndarray:
    """Shared by the integer and fake-quant paths so both round identically."""
    return (s_rows[:, None] * acc) * s_cols[None, :]


def check_accumulator(max_w: int, max_x: int, depth: int) -> None:
    """Reject layers whose worst-case dot product could leave the int64 range."""
    if max_w * max_x * depth >= 2**62:
        raise OverflowError("int64 accumulator could overflow for this layer")


def int_linear(packed: PackedWeights, X, q_a: QuantSpec | None = None, act_bits: int = 4) -> np.ndarray:
    """``Q(W) @ Q(X)`` from integer codes; ``q_a`` defaults to dynamic per-token parameters."""
    x = X.data if isinstance(X, Tensor) else np.asarray(X, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != packed.m:
        raise ValueError(f"expected activations of shape ({packed.m}, k), got {x.shape}")
    if q_a is None:
        q_a = compute_qparams(x, act_bits, "token")
    w_off = packed.unpack() - packed.zero.astype(np.int64)[:, None]
    x_off = quantize_codes(x, q_a) - q_a.zero[None, :] if q_a.granularity == "token" else (
        quantize_codes(x, q_a) - q_a.zero[0]
    )
    check_accumulator(int(np.abs(w_off).max(initial=0)), int(np.abs(x_off).max(initial=0)), packed.m)
    acc = w_off @ x_off
    s_cols = q_a.scale.data if q_a.granularity == "token" else np.full(x.shape[1], q_a.scale.data[0])
    return rescale(acc.astype(np.float64), packed.scale, s_cols)


def dense_fp16_bytes(n: int, m: int) -> int:
    return 2 * n * m
