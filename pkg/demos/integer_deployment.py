"""Pack a 4-bit layer into nibbles, run it with integer accumulation, and compare
against the fake-quantization path used in training.

    python3 demos/integer_deployment.py
"""

import numpy as np

from qatlab.intexec import dense_fp16_bytes, int_linear, pack
from qatlab.quantizer import compute_qparams
from qatlab.tensor import Tensor
from qatlab.toydiff import quantized_linear_forward

rng = np.random.default_rng(0)
W, X = rng.normal(size=(64, 64)), rng.normal(size=(64, 16))
q = compute_qparams(W, 4, "channel")
packed = pack(W, q)

y_int = int_linear(packed, X)
y_fake = quantized_linear_forward(Tensor(X), Tensor(W), q, act_bits=4).data
print("max |integer - fake-quant| =", np.max(np.abs(y_int - y_fake)))

codes = packed.codes.nbytes
params = packed.scale.nbytes + packed.zero.nbytes
dense = dense_fp16_bytes(64, 64)
print(f"codes {codes} B + per-channel params {params} B = {codes + params} B "
      f"({(codes + params) / dense:.1%} of the {dense} B fp16 layer; codes alone {codes / dense:.0%})")
