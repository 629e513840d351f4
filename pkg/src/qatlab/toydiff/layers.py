"""Linear layers that can run full precision, fake-quantized, or with an auxiliary branch.

Activations are laid out features x tokens, so a layer computes ``Y = W X``
with ``W`` of shape (out, in) and ``X`` of shape (in, tokens).
"""

from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..auxrank import AuxState, DecayBaselineState, aux_forward
from ..intexec import rescale
from ..quantizer import QuantSpec, col_scales, compute_qparams, fake_quantize_with_offsets, row_scales
from ..rng import Rng
from ..tensor import Tensor


def quant_matmul(Qw: Tensor, Qx: Tensor, w_off: np.ndarray, x_off: np.ndarray, q_w: QuantSpec, q_a: QuantSpec) -> Tensor:
    """Product of two fake-quantized matrices, evaluated as integer matmul plus rescale.

    The value equals ``Qw @ Qx`` up to float rounding and is bit-identical to
    the integer execution path; gradients are those of the plain product.
    """
    acc = w_off @ x_off  # integer-valued, exact in float64 at these sizes
    out = rescale(acc, row_scales(q_w, Qw.shape[0]), col_scales(q_a, Qx.shape[1]))
    wd, xd = Qw.data, Qx.data

    def backward(g):
        return g @ xd.T, wd.T @ g

    return T.custom(out, (Qw, Qx), backward)


def quantized_linear_forward(X: Tensor, W: Tensor, q_w: QuantSpec, act_bits: int, aux=None) -> Tensor:
    """``Q(W) Q(X) + aux(Q(X))`` with per-token activation parameters taken from ``X``."""
    if X.data.ndim != 2 or W.shape[1] != X.shape[0]:
        raise T.ShapeError(f"quantized linear: weight {W.shape} cannot act on {X.shape}")
    q_a = compute_qparams(X.data, act_bits, "token")
    Qw, w_off = fake_quantize_with_offsets(W, q_w)
    Qx, x_off = fake_quantize_with_offsets(X, q_a)
    Y = quant_matmul(Qw, Qx, w_off, x_off, q_w, q_a)
    extra = aux_forward(Qx, aux)
    return Y if extra is None else T.add(Y, extra)


class Linear:
    """``W x + b``; becomes a quantized layer once :meth:`quantize` is called."""

    def __init__(self, out_features: int, in_features: int, rng: Rng, bias: bool = True, gain: float = 1.0):
        std = gain / np.sqrt(in_features)
        self.weight = Tensor(rng.normal((out_features, in_features), std), requires_grad=True)
        self.bias = Tensor(np.zeros((out_features, 1)), requires_grad=True) if bias else None
        self.w_spec: QuantSpec | None = None
        self.act_bits: int | None = None
        self.aux: AuxState | DecayBaselineState | None = None

    @property
    def quantized(self) -> bool:
        return self.w_spec is not None

    def quantize(self, weight_bits: int, act_bits: int, learn_scale: bool = True) -> None:
        if self.bias is not None:
            raise ValueError("quantized layers are bias-free")
        self.w_spec = compute_qparams(self.weight.data, weight_bits, "channel", learnable=learn_scale)
        self.act_bits = act_bits

    def named_parameters(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias
        if self.w_spec is not None and self.w_spec.learnable:
            yield f"{prefix}.scale", self.w_spec.scale
        if self.aux is not None:
            for k, v in self.aux.parameters().items():
                yield f"{prefix}.aux.{k}", v

    def __call__(self, X: Tensor) -> Tensor:
        if self.quantized:
            return quantized_linear_forward(X, self.weight, self.w_spec, self.act_bits, self.aux)
        Y = T.matmul(self.weight, X)
        if self.bias is not None:
            Y = T.add(Y, T.expand(self.bias, Y.shape))
        return Y
